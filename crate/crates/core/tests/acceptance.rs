//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! values and wall time. Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use ifsc_core::classifier::{gradient_check, Label, LstmParams, SequenceSample};
use ifsc_core::defense::{pad_length, BatchPolicy, CountermeasureConfig, PaddingPolicy};
use ifsc_core::enclave::rules::RuleSet;
use ifsc_core::enclave::trie::linear_lpm;
use ifsc_core::enclave::vnf::{compressed_size, compression_ratio, Role};
use ifsc_core::enclave::{run_stream, Chain, ChainConfig};
use ifsc_core::event::Direction;
use ifsc_core::harness::sweep::{narrowest_range_width, noise_sweep};
use ifsc_core::harness::{prepare, run_experiment, ClassifierBank, ExperimentConfig};
use ifsc_core::packet::{ContentClass, PacketKind};
use ifsc_core::profiling::PageProfile;
use ifsc_core::recognition::{clear_indicator, interval_stage1, interval_stage2, r_appeared, MatchingIndicator};
use ifsc_core::traffic::{generate_corpus, interleave_sessions, standard_visit_plan, CorpusParams};
use ifsc_core::{seed, write_trace};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn standard() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn c1_indicator() -> Outcome {
    let mut ind = MatchingIndicator {
        page_id: 0,
        counts: vec![2, 4, 3, 0],
    };
    let r0 = r_appeared(&ind);
    ind.counts[3] += 1;
    let r1 = r_appeared(&ind);
    let profile: PageProfile = serde_json::from_value(serde_json::json!({
        "page_id": 0,
        "packets": (0..4).map(|i| serde_json::json!({
            "index": i,
            "discrete": {"hops": []},
            "delay_ranges": [],
            "per_visit_count": ([2, 2, 2, 1])[i],
        })).collect::<Vec<_>>(),
        "interval_threshold_t": 1.0,
        "exemplar_sequences": [[0, 1, 2, 3]],
        "total_per_visit": 7,
    }))
    .map_err(|e| e.to_string())?;
    clear_indicator(&mut ind, &profile);
    let r2 = r_appeared(&ind);
    check(
        r0 == 0.75 && r1 == 1.0 && ind.counts == [0, 2, 1, 0] && r2 == 0.5,
        format!("R {r0} -> {r1}, cleared {:?} R {r2}", ind.counts),
    )
}

fn c2_routing() -> Outcome {
    let params = CorpusParams {
        suspicious_prob: 0.3,
        ..CorpusParams::default()
    };
    let corpus = generate_corpus(21, 500, &params).map_err(|e| e.to_string())?;
    let plan = standard_visit_plan(&corpus, 1, 600.0, 22);
    let mut packets = interleave_sessions(&corpus, &plan, 23, &params)
        .map_err(|e| e.to_string())?
        .packets;
    if packets.len() < 10_000 {
        return Err(format!("stream has only {} packets", packets.len()));
    }
    packets.truncate(10_000);
    let chain = Chain::new(ChainConfig::default(), 24).map_err(|e| e.to_string())?;
    let run = run_stream(&chain, &packets, CountermeasureConfig::default(), Default::default(), 25)
        .map_err(|e| e.to_string())?;
    let topo = &chain.config.topology;
    let (waf, ids, nat) = (topo.enclave(Role::Waf), topo.enclave(Role::Ids), topo.enclave(Role::Nat));
    let units = topo.segment(&run.events);
    if units.len() != packets.len() {
        return Err(format!("{} units for {} packets", units.len(), packets.len()));
    }
    let (mut violations, mut suspicious) = (0, 0);
    for (pkt, unit) in packets.iter().zip(units) {
        let ecalls: Vec<u32> = run.events[unit]
            .iter()
            .filter(|e| e.direction == Direction::Ecall)
            .map(|e| e.enclave_id)
            .collect();
        let has = |a: u32, b: u32| ecalls.windows(2).any(|w| w == [a, b]);
        let ok = match (pkt.kind, pkt.suspicious) {
            (PacketKind::Response, true) => has(waf, ids) && !has(waf, nat),
            (PacketKind::Response, false) => has(waf, nat) && !ecalls.contains(&ids),
            (PacketKind::Request, _) => !ecalls.contains(&ids),
        };
        suspicious += usize::from(pkt.suspicious);
        violations += usize::from(!ok);
    }
    check(
        violations == 0,
        format!("{} packets, {suspicious} suspicious, {violations} violations", packets.len()),
    )
}

fn c3_clean_world() -> Outcome {
    let exp = run_experiment(&standard()).map_err(|e| e.to_string())?;
    let r = &exp.online.report;
    check(
        r.page_recall >= 0.95 && r.page_accuracy >= 0.90 && r.packet_accuracy >= 0.85,
        format!(
            "page recall {:.3}, page accuracy {:.3}, packet accuracy {:.3} ({} detections, {} tracked visits)",
            r.page_recall, r.page_accuracy, r.packet_accuracy, r.detections, r.tracked_visits
        ),
    )
}

fn c4_countermeasures() -> Outcome {
    let mut cfg = standard();
    cfg.countermeasures = CountermeasureConfig {
        padding: Some(PaddingPolicy::MaxLen { max_bytes: 1500 }),
        batch: Some(BatchPolicy {
            threshold_n: 8,
            flush_timeout: None,
        }),
    };
    let exp = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let r = &exp.online.report;
    check(
        r.page_accuracy <= 0.05 && r.page_recall <= 0.05,
        format!(
            "page accuracy {:.3}, page recall {:.3} ({} detections, {} pages profiled)",
            r.page_accuracy, r.page_recall, r.detections, r.profiled_pages
        ),
    )
}

fn c5_padding() -> Outcome {
    let mut bad = 0;
    for x in [100u32, 200, 500, 1000] {
        for l in 1..=5000u32 {
            let mut oracle = x;
            while oracle <= l {
                oracle += x;
            }
            let got = pad_length(l, PaddingPolicy::MultipleOf { x_bytes: x }).map_err(|e| e.to_string())?;
            if got != oracle || got <= l || got > l + x || got % x != 0 {
                bad += 1;
            }
        }
    }
    check(bad == 0, format!("20000 cases, {bad} mismatches"))
}

fn c6_noise() -> Outcome {
    let cfg = standard();
    let offline = prepare(&cfg).map_err(|e| e.to_string())?;
    let w = narrowest_range_width(&offline.profiles).ok_or("no profiles")?;
    let a = w / 2 + 1;
    let mut bank = ClassifierBank::new(cfg.attack.train, cfg.seed);
    let rows = noise_sweep(&cfg, &offline, &mut bank, &[0, a, 2 * a, 4 * a]).map_err(|e| e.to_string())?;
    let recalls: Vec<f64> = rows.iter().map(|r| r.page_recall).collect();
    check(
        recalls.windows(2).all(|p| p[1] <= p[0]),
        format!("A = {a} cycles (narrowest width {w}), recall {recalls:?}"),
    )
}

fn c7_gradient() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let mut rng = seed::rng(s);
        let mut p = LstmParams::<f64>::zeros(4, 3, 5);
        for x in &mut p.theta {
            *x = rng.gen_range(-1.0..1.0);
        }
        let batch: Vec<SequenceSample> = (0..6)
            .map(|i| SequenceSample {
                tokens: (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..4)).collect(),
                label: if i % 2 == 0 { Label::Legal } else { Label::Illegal },
            })
            .collect();
        worst = worst.max(gradient_check(&p, &batch, 1e-5, 1e-8));
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 10 seeds"))
}

fn c8_oracles() -> Outcome {
    let rules = RuleSet::generate(&Default::default(), 81).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(82);
    let mut lpm_bad = 0;
    for _ in 0..1000 {
        let addr: u32 = rng.gen();
        let trie = rules.trie().lookup(addr).map(|h| (h.translation, h.prefix_len));
        if trie != linear_lpm(&rules.nat_table, addr) {
            lpm_bad += 1;
        }
    }
    let (mut buffers, mut filter_bad) = (0, 0);
    for _ in 0..400 {
        let n = rng.gen_range(0..=10);
        let times: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..40)) * 0.25).collect();
        let t = f64::from(rng.gen_range(1..8)) * 0.25;
        let brute1: Vec<bool> = (0..n)
            .map(|i| (0..n).any(|j| j != i && (times[i] - times[j]).abs() <= t))
            .collect();
        filter_bad += usize::from(interval_stage1(&times, t) != brute1);
        for mask in 0u32..(1 << n) {
            let sub: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| times[i]).collect();
            let brute2 = sub.iter().all(|a| sub.iter().all(|b| (a - b).abs() <= t));
            filter_bad += usize::from(interval_stage2(&sub, t) != brute2);
        }
        buffers += 1;
    }
    check(
        lpm_bad == 0 && filter_bad == 0,
        format!("1000 lookups, {lpm_bad} mismatches; {buffers} buffers with all subsets, {filter_bad} mismatches"),
    )
}

fn c9_determinism() -> Outcome {
    let cfg = standard();
    let run = || -> Result<(Vec<u8>, _), String> {
        let exp = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        write_trace(&exp.online.run.events, &mut bytes).map_err(|e| e.to_string())?;
        Ok((bytes, exp.online.report))
    };
    let (t1, r1) = run()?;
    let (t2, r2) = run()?;
    check(
        t1 == t2 && r1 == r2,
        format!("trace {} bytes, identical: {}, reports identical: {}", t1.len(), t1 == t2, r1 == r2),
    )
}

fn c10_compression() -> Outcome {
    let corpus = generate_corpus(101, 200, &CorpusParams::default()).map_err(|e| e.to_string())?;
    let objects: Vec<_> = corpus
        .pages
        .iter()
        .flat_map(|p| p.objects.iter().map(move |o| (p.page_id, o)))
        .take(1000)
        .collect();
    if objects.len() < 1000 {
        return Err(format!("only {} objects", objects.len()));
    }
    let (mut text_min, mut image_max) = (f64::INFINITY, 0.0f64);
    for (page, o) in &objects {
        let r = compression_ratio(*page, o.object_id, o.content_class);
        for &len in std::iter::once(&o.request_bytes).chain(&o.response_segments) {
            let achieved = 1.0 - f64::from(compressed_size(len, r)) / f64::from(len);
            match o.content_class {
                ContentClass::Text => text_min = text_min.min(achieved),
                ContentClass::Image => image_max = image_max.max(achieved),
            }
        }
    }
    check(
        text_min >= 0.30 && image_max <= 0.05,
        format!("1000 objects, min text ratio {text_min:.4}, max image ratio {image_max:.4}"),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("indicator arithmetic", Duration::from_millis(1), c1_indicator),
        ("routing channel", Duration::from_secs(10), c2_routing),
        ("clean-world attack", Duration::from_secs(300), c3_clean_world),
        ("countermeasures", Duration::from_secs(300), c4_countermeasures),
        ("padding arithmetic", Duration::from_secs(1), c5_padding),
        ("noise degradation", Duration::from_secs(600), c6_noise),
        ("gradient check", Duration::from_secs(10), c7_gradient),
        ("oracle equivalence", Duration::from_secs(30), c8_oracles),
        ("determinism", Duration::from_secs(600), c9_determinism),
        ("compression channel", Duration::from_secs(5), c10_compression),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (took <= limit, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {name}: {detail} [{:.3?} of {:?}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took,
            limit
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Parameter sweeps: padding overhead, IDS throughput under the
//! countermeasures, and recognition under processing-time noise.

use serde::{Deserialize, Serialize};

use super::metrics::{bandwidth_overhead, busy_cycles};
use super::{build_stream, run_online, ClassifierBank, ExperimentConfig, HarnessError, Offline};
use crate::defense::{BatchPolicy, CountermeasureConfig, PaddingPolicy};
use crate::enclave::vnf::Role;
use crate::enclave::{run_stream, Chain};
use crate::packet::{PacketGroundTruth, PacketKind};
use crate::profiling::PageProfile;
use crate::seed;
use crate::traffic::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub policy: String,
    pub x_bytes: u32,
    pub overhead: f64,
}

pub fn overhead_sweep(
    corpus: &Corpus,
    xs: &[u32],
    max_len: u32,
    record_overhead: u64,
) -> Result<Vec<OverheadRow>, HarnessError> {
    let stage = |e: crate::defense::PaddingError| HarnessError::Stage {
        stage: "sweep",
        cause: e.to_string(),
    };
    let mut rows = Vec::new();
    for &x in xs {
        let p = PaddingPolicy::MultipleOf { x_bytes: x };
        rows.push(OverheadRow {
            policy: "multiple_of".into(),
            x_bytes: x,
            overhead: bandwidth_overhead(corpus, Some(p), record_overhead).map_err(stage)?,
        });
    }
    let p = PaddingPolicy::MaxLen { max_bytes: max_len };
    rows.push(OverheadRow {
        policy: "max_len".into(),
        x_bytes: max_len,
        overhead: bandwidth_overhead(corpus, Some(p), record_overhead).map_err(stage)?,
    });
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    None,
    Batch,
    BatchPad,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 3] = [DefenseMode::None, DefenseMode::Batch, DefenseMode::BatchPad];

    pub fn countermeasures(self, max_len: u32) -> CountermeasureConfig {
        let batch = Some(BatchPolicy::default());
        match self {
            DefenseMode::None => CountermeasureConfig::default(),
            DefenseMode::Batch => CountermeasureConfig { padding: None, batch },
            DefenseMode::BatchPad => CountermeasureConfig {
                padding: Some(PaddingPolicy::MaxLen { max_bytes: max_len }),
                batch,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub ids_rules: usize,
    pub mode: DefenseMode,
    pub ids_cycles_per_packet: f64,
    pub chain_cycles_per_packet: f64,
    /// Stream packets per second of IDS busy time.
    pub ids_packets_per_second: f64,
}

/// IDS cost under each defense mode. The stream is the experiment's
/// responses with every packet flagged suspicious, so each one crosses the
/// IDS as in a standalone IDS benchmark.
pub fn throughput_sweep(config: &ExperimentConfig, corpus: &Corpus, rule_counts: &[usize]) -> Result<Vec<ThroughputRow>, HarnessError> {
    let (_, stream) = build_stream(config, corpus)?;
    let packets: Vec<PacketGroundTruth> = stream
        .packets
        .into_iter()
        .filter(|p| p.kind == PacketKind::Response)
        .map(|p| PacketGroundTruth { suspicious: true, ..p })
        .collect();
    let max_len = config.corpus.segment_max_bytes.max(config.corpus.request_max_bytes);
    let mut rows = Vec::new();
    for &rules in rule_counts {
        let mut cc = config.chain.clone();
        cc.rules.ids_rules = rules;
        let chain = Chain::new(cc, seed::derive(config.seed, "rules")).map_err(|e| HarnessError::Stage {
            stage: "sweep",
            cause: e.to_string(),
        })?;
        let ids = chain.config.topology.enclave(Role::Ids);
        for mode in DefenseMode::ALL {
            let run = run_stream(
                &chain,
                &packets,
                mode.countermeasures(max_len),
                config.collector.clone(),
                seed::derive(config.seed, "sweep"),
            )
            .map_err(|e| HarnessError::Stage {
                stage: "sweep",
                cause: e.to_string(),
            })?;
            let busy = busy_cycles(&run.events);
            let n = run.real_packets().max(1) as f64;
            let ids_busy = busy.get(&ids).copied().unwrap_or(0) as f64;
            rows.push(ThroughputRow {
                ids_rules: rules,
                mode,
                ids_cycles_per_packet: ids_busy / n,
                chain_cycles_per_packet: busy.values().sum::<u64>() as f64 / n,
                ids_packets_per_second: if ids_busy == 0.0 { 0.0 } else { n * chain.config.cpu_hz / ids_busy },
            });
        }
    }
    Ok(rows)
}

/// Width of the tightest delay range in any profile.
pub fn narrowest_range_width(profiles: &[PageProfile]) -> Option<u64> {
    profiles
        .iter()
        .flat_map(|p| &p.packets)
        .flat_map(|p| &p.delay_ranges)
        .map(|r| r.width())
        .min()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub amplitude: u64,
    pub page_accuracy: f64,
    pub page_recall: f64,
    pub packet_accuracy: f64,
    pub detections: usize,
}

/// Profiles once without noise, then replays the online stream with the
/// given processing-time noise amplitudes. Noise draws are shared across
/// levels, so a larger amplitude perturbs every hop at least as much.
pub fn noise_sweep(
    config: &ExperimentConfig,
    offline: &Offline,
    bank: &mut ClassifierBank,
    amplitudes: &[u64],
) -> Result<Vec<NoiseRow>, HarnessError> {
    let mut rows = Vec::new();
    for &a in amplitudes {
        let mut cc = offline.chain.config.clone();
        cc.delay.noise_amplitude = a;
        let chain = Chain {
            config: cc,
            rules: offline.chain.rules.clone(),
        };
        let online = run_online(config, offline, &chain, bank)?;
        let r = online.report;
        rows.push(NoiseRow {
            amplitude: a,
            page_accuracy: r.page_accuracy,
            page_recall: r.page_recall,
            packet_accuracy: r.packet_accuracy,
            detections: r.detections,
        });
    }
    Ok(rows)
}

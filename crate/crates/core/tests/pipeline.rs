use std::fs::{self, File};
use std::io::BufReader;

use ifsc_core::harness::sweep::{overhead_sweep, throughput_sweep, DefenseMode};
use ifsc_core::harness::{build_corpus, persist, read_report, run_experiment, ExperimentConfig};
use ifsc_core::profiling::read_profiles;
use ifsc_core::read_trace;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_json(r#"{"n_pages": 12, "attack": {"profile_visits": 6}, "plan": {"span_seconds": 30}}"#)
        .unwrap()
}

#[test]
fn persisted_artifacts_read_back() {
    let cfg = small();
    let exp = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist(&cfg, &exp, dir.path()).unwrap();

    let events = read_trace(BufReader::new(File::open(dir.path().join("trace.isc")).unwrap())).unwrap();
    assert_eq!(events, exp.online.run.events);

    let profiles = read_profiles(BufReader::new(File::open(dir.path().join("profiles.iscprof")).unwrap())).unwrap();
    assert_eq!(profiles, exp.offline.profiles);

    assert_eq!(read_report(dir.path()).unwrap(), exp.online.report);

    let log = fs::read_to_string(dir.path().join("detections.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + exp.online.detections.len());
}

#[test]
fn overhead_falls_with_finer_padding_and_max_len_costs_most() {
    let cfg = small();
    let corpus = build_corpus(&cfg).unwrap();
    let rows = overhead_sweep(&corpus, &[200, 400, 800], 1500, cfg.chain.record_overhead).unwrap();
    assert!(rows[0].overhead <= rows[1].overhead && rows[1].overhead <= rows[2].overhead);
    assert!(rows.iter().all(|r| r.overhead > 0.0));
    assert!(rows[3].overhead >= rows[2].overhead);
}

#[test]
fn countermeasures_only_add_ids_work() {
    let cfg = small();
    let corpus = build_corpus(&cfg).unwrap();
    let rows = throughput_sweep(&cfg, &corpus, &[1000, 4000]).unwrap();
    assert_eq!(rows.len(), 6);
    for chunk in rows.chunks(3) {
        let cost = |m: DefenseMode| chunk.iter().find(|r| r.mode == m).unwrap().ids_cycles_per_packet;
        assert!(cost(DefenseMode::None) <= cost(DefenseMode::Batch));
        assert!(cost(DefenseMode::Batch) <= cost(DefenseMode::BatchPad));
    }
    // More rules, more matching work.
    assert!(rows[3].ids_cycles_per_packet > rows[0].ids_cycles_per_packet);
}

//! End-to-end experiments: corpus, offline profiling, online replay,
//! recognition, scoring, and the artifacts each stage leaves on disk.

pub mod metrics;
pub mod report;
pub mod sweep;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{train, TrainConfig, Trained};
use crate::collector::CollectorConfig;
use crate::defense::{CountermeasureConfig, PaddingPolicy};
use crate::enclave::{run_stream, Chain, ChainConfig, ChainRun};
use crate::event::write_trace;
use crate::features::observe;
use crate::profiling::{build_profile, collect_visits, write_profiles, PageProfile, ProfileError, ReplaySetup};
use crate::recognition::{write_detection_log, RecognitionConfig, RecognitionEvent, Recognizer};
use crate::seed;
use crate::traffic::{
    generate_corpus, interleave_sessions, standard_visit_plan, write_corpus, write_session, Corpus, CorpusParams,
    PlannedVisit, SessionStream,
};

pub use metrics::MetricsReport;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {cause}")]
    Stage { stage: &'static str, cause: String },
}

impl HarnessError {
    fn stage(stage: &'static str) -> impl FnOnce(String) -> HarnessError {
        move |cause| HarnessError::Stage { stage, cause }
    }
}

fn io_err(stage: &'static str) -> impl Fn(std::io::Error) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        cause: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    /// Replays per page in the offline phase.
    pub profile_visits: usize,
    pub recognition: RecognitionConfig,
    pub train: TrainConfig,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            profile_visits: 20,
            recognition: RecognitionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisitPlanConfig {
    pub visits_per_page: u32,
    /// Visit start times are spread uniformly over this many seconds.
    pub span_seconds: f64,
}

impl Default for VisitPlanConfig {
    fn default() -> Self {
        VisitPlanConfig {
            visits_per_page: 2,
            span_seconds: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_pages: usize,
    pub corpus: CorpusParams,
    pub chain: ChainConfig,
    pub collector: CollectorConfig,
    pub countermeasures: CountermeasureConfig,
    pub attack: AttackParams,
    pub plan: VisitPlanConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            n_pages: 100,
            corpus: CorpusParams::default(),
            chain: ChainConfig::default(),
            collector: CollectorConfig::default(),
            countermeasures: CountermeasureConfig::default(),
            attack: AttackParams::default(),
            plan: VisitPlanConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| HarnessError::Config(m);
        if self.n_pages == 0 {
            return Err(cfg("n_pages must be at least 1".into()));
        }
        self.corpus.validate().map_err(|e| cfg(e.to_string()))?;
        self.chain.topology.validate().map_err(|e| cfg(e.to_string()))?;
        if !(self.chain.cpu_hz > 0.0 && self.chain.cpu_hz.is_finite()) {
            return Err(cfg("cpu_hz must be positive".into()));
        }
        self.collector.validate().map_err(cfg)?;
        self.countermeasures.validate().map_err(cfg)?;
        if let Some(PaddingPolicy::MaxLen { max_bytes }) = self.countermeasures.padding {
            let largest = self.corpus.segment_max_bytes.max(self.corpus.request_max_bytes);
            if max_bytes < largest {
                return Err(cfg(format!("MaxLen {max_bytes} is below the largest payload {largest}")));
            }
        }
        if self.attack.profile_visits < 2 {
            return Err(cfg("profile_visits must be at least 2".into()));
        }
        self.attack.train.validate().map_err(|e| cfg(e.to_string()))?;
        let r = &self.attack.recognition;
        if !(r.buffer_timeout > 0.0) || r.candidate_cap == 0 || !(0.0..=1.0).contains(&r.legality_threshold) {
            return Err(cfg("recognition config out of range".into()));
        }
        if self.plan.visits_per_page == 0 || !(self.plan.span_seconds > 0.0) {
            return Err(cfg("visit plan needs at least one visit and a positive span".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let c: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn sub(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }
}

pub fn build_corpus(config: &ExperimentConfig) -> Result<Corpus, HarnessError> {
    generate_corpus(config.sub("corpus"), config.n_pages, &config.corpus)
        .map_err(|e| HarnessError::Stage {
            stage: "corpus",
            cause: e.to_string(),
        })
}

pub fn build_chain(config: &ExperimentConfig) -> Result<Chain, HarnessError> {
    Chain::new(config.chain.clone(), config.sub("rules")).map_err(|e| HarnessError::stage("chain")(e.to_string()))
}

pub fn build_stream(config: &ExperimentConfig, corpus: &Corpus) -> Result<(Vec<PlannedVisit>, SessionStream), HarnessError> {
    let plan = standard_visit_plan(
        corpus,
        config.plan.visits_per_page,
        config.plan.span_seconds,
        config.sub("plan"),
    );
    let stream = interleave_sessions(corpus, &plan, config.sub("stream"), &config.corpus)
        .map_err(|e| HarnessError::stage("stream")(e.to_string()))?;
    Ok((plan, stream))
}

/// Profiles every tracked page; pages without a constant packet are
/// reported separately instead of failing the run.
pub fn build_profiles(
    config: &ExperimentConfig,
    corpus: &Corpus,
    chain: &Chain,
) -> Result<(Vec<PageProfile>, Vec<u32>), HarnessError> {
    let setup = ReplaySetup {
        chain,
        countermeasures: config.countermeasures,
        collector: config.collector.clone(),
        corpus_params: &config.corpus,
    };
    let mut profiles = Vec::new();
    let mut untrackable = Vec::new();
    for &id in &corpus.tracked_ids {
        let page = corpus
            .pages
            .iter()
            .find(|p| p.page_id == id)
            .ok_or_else(|| HarnessError::stage("profile")(format!("tracked page {id} missing from corpus")))?;
        let visits = collect_visits(
            page,
            &setup,
            config.attack.profile_visits,
            seed::derive_indexed(config.seed, "profiling", u64::from(id)),
        )
        .map_err(|e| HarnessError::stage("profile")(e.to_string()))?;
        match build_profile(id, &visits) {
            Ok(p) => profiles.push(p),
            Err(ProfileError::Untrackable(id)) => {
                log::info!("page {id} has no constant packet; not tracked");
                untrackable.push(id);
            }
            Err(e) => return Err(HarnessError::stage("profile")(e.to_string())),
        }
    }
    Ok((profiles, untrackable))
}

/// Trained classifiers, keyed by page, trained on first use.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    train: TrainConfig,
    master: u64,
    models: BTreeMap<u32, Trained<f64>>,
}

impl ClassifierBank {
    pub fn new(train: TrainConfig, master_seed: u64) -> Self {
        ClassifierBank {
            train,
            master: master_seed,
            models: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, profiles: &[PageProfile], index: usize) -> Result<&Trained<f64>, HarnessError> {
        let profile = &profiles[index];
        if !self.models.contains_key(&profile.page_id) {
            let others: Vec<&PageProfile> = profiles.iter().filter(|p| p.page_id != profile.page_id).collect();
            let cfg = TrainConfig {
                seed: seed::derive_indexed(self.master, "train", u64::from(profile.page_id)),
                ..self.train
            };
            let trained = train::<f64>(profile, &others, &cfg).map_err(|e| HarnessError::stage("train")(e.to_string()))?;
            self.models.insert(profile.page_id, trained);
        }
        Ok(&self.models[&profile.page_id])
    }

    pub fn train_all(&mut self, profiles: &[PageProfile]) -> Result<(), HarnessError> {
        for i in 0..profiles.len() {
            self.get(profiles, i)?;
        }
        Ok(())
    }

    pub fn models(&self) -> &BTreeMap<u32, Trained<f64>> {
        &self.models
    }
}

/// Offline artifacts, independent of the online stream.
#[derive(Debug, Clone)]
pub struct Offline {
    pub corpus: Corpus,
    pub chain: Chain,
    pub profiles: Vec<PageProfile>,
    pub untrackable: Vec<u32>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Offline, HarnessError> {
    config.validate()?;
    let corpus = build_corpus(config)?;
    let chain = build_chain(config)?;
    let (profiles, untrackable) = build_profiles(config, &corpus, &chain)?;
    Ok(Offline {
        corpus,
        chain,
        profiles,
        untrackable,
    })
}

#[derive(Debug, Clone)]
pub struct Online {
    pub plan: Vec<PlannedVisit>,
    pub stream: SessionStream,
    pub run: ChainRun,
    pub detections: Vec<RecognitionEvent>,
    pub report: MetricsReport,
}

/// Replays the stream through `chain` with the collector attached, runs
/// recognition over what the collector saw, and scores it.
pub fn run_online(
    config: &ExperimentConfig,
    offline: &Offline,
    chain: &Chain,
    bank: &mut ClassifierBank,
) -> Result<Online, HarnessError> {
    let (plan, stream) = build_stream(config, &offline.corpus)?;
    let run = run_stream(
        chain,
        &stream.packets,
        config.countermeasures,
        config.collector.clone(),
        config.sub("online"),
    )
    .map_err(|e| HarnessError::stage("online")(e.to_string()))?;
    let cfg = &chain.config;
    let observations = observe(&run.events, &cfg.topology, cfg.cpu_hz);
    let aligned = observations.len() == run.records.len();

    let profiles = &offline.profiles;
    let mut recognizer = Recognizer::new(profiles.clone(), config.attack.recognition);
    let mut train_error = None;
    let mut scorer = |idx: usize, _: &PageProfile, seqs: &[Vec<usize>]| -> Vec<f64> {
        match bank.get(profiles, idx) {
            Ok(m) => seqs
                .iter()
                .map(|s| m.params.forward(s).map_or(0.0, |p| p))
                .collect(),
            Err(e) => {
                train_error.get_or_insert(e);
                vec![0.0; seqs.len()]
            }
        }
    };
    let mut detections = Vec::new();
    let mut unattributable = 0;
    for (i, o) in observations.iter().enumerate() {
        match &o.features {
            Ok(fv) => {
                let uid = aligned.then(|| run.records[i].packet_uid);
                detections.extend(recognizer.ingest(fv, o.time, uid, &mut scorer));
            }
            Err(_) => unattributable += 1,
        }
    }
    if let Some(e) = train_error {
        return Err(e);
    }

    let tracked: Vec<u32> = profiles.iter().map(|p| p.page_id).collect();
    let all_tracked = &offline.corpus.tracked_ids;
    let (page_acc, page_rec) = metrics::page_metrics(&detections, &plan, all_tracked);
    let (pkt_acc, pkt_rec) = metrics::packet_metrics(&detections, &stream.packets, all_tracked);
    let mut undefined = Vec::new();
    for (name, r) in [
        ("page_accuracy", page_acc),
        ("page_recall", page_rec),
        ("packet_accuracy", pkt_acc),
        ("packet_recall", pkt_rec),
    ] {
        if r.undefined {
            undefined.push(name.to_string());
        }
    }
    let overhead = metrics::bandwidth_overhead(&offline.corpus, config.countermeasures.padding, cfg.record_overhead)
        .map_err(|e| HarnessError::stage("metrics")(e.to_string()))?;
    let busy: u64 = metrics::busy_cycles(&run.events).values().sum();
    let real = run.real_packets().max(1);
    let cycles_per_packet = busy as f64 / real as f64;
    let trained: Vec<&Trained<f64>> = tracked.iter().filter_map(|id| bank.models().get(id)).collect();
    let report = MetricsReport {
        page_accuracy: page_acc.value,
        page_recall: page_rec.value,
        packet_accuracy: pkt_acc.value,
        packet_recall: pkt_rec.value,
        undefined,
        detections: detections.len(),
        tracked_visits: plan.iter().filter(|v| all_tracked.contains(&v.page_id)).count(),
        profiled_pages: profiles.len(),
        untrackable_pages: offline.untrackable.clone(),
        stream_packets: stream.packets.len(),
        unattributable_units: unattributable,
        rejected_batches: run.rejected_batches,
        bandwidth_overhead: overhead,
        cycles_per_packet,
        packets_per_second: if busy == 0 { 0.0 } else { cfg.cpu_hz / cycles_per_packet },
        classifiers_trained: trained.len(),
        classifiers_unconverged: trained.iter().filter(|t| !t.converged).count(),
        candidate_cap_hits: detections.iter().filter(|d| d.cap_hit).count(),
    };
    Ok(Online {
        plan,
        stream,
        run,
        detections,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub offline: Offline,
    pub online: Online,
    pub bank: ClassifierBank,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    let offline = prepare(config)?;
    let mut bank = ClassifierBank::new(config.attack.train, config.seed);
    let chain = offline.chain.clone();
    let online = run_online(config, &offline, &chain, &mut bank)?;
    log::info!(
        "page accuracy {:.3}, page recall {:.3}, {} detections",
        online.report.page_accuracy,
        online.report.page_recall,
        online.report.detections
    );
    Ok(Experiment { offline, online, bank })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path, stage: &'static str) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(io_err(stage))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| HarnessError::stage(stage)(e.to_string()))
}

pub fn persist_corpus(config: &ExperimentConfig, corpus: &Corpus, stream: &SessionStream, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(io_err("persist"))?;
    write_json(config, &out.join("config.json"), "persist")?;
    let f = File::create(out.join("corpus.json")).map_err(io_err("persist"))?;
    write_corpus(corpus, BufWriter::new(f)).map_err(|e| HarnessError::stage("persist")(e.to_string()))?;
    let f = File::create(out.join("session.csv")).map_err(io_err("persist"))?;
    write_session(stream, BufWriter::new(f)).map_err(|e| HarnessError::stage("persist")(e.to_string()))
}

pub fn persist_trace(run: &ChainRun, out: &Path) -> Result<(), HarnessError> {
    let f = File::create(out.join("trace.isc")).map_err(io_err("persist"))?;
    write_trace(&run.events, BufWriter::new(f)).map_err(|e| HarnessError::stage("persist")(e.to_string()))?;
    Ok(())
}

pub fn persist_profiles(profiles: &[PageProfile], out: &Path) -> Result<(), HarnessError> {
    let f = File::create(out.join("profiles.iscprof")).map_err(io_err("persist"))?;
    write_profiles(profiles, BufWriter::new(f)).map_err(|e| HarnessError::stage("persist")(e.to_string()))
}

pub fn persist_params(bank: &ClassifierBank, out: &Path) -> Result<(), HarnessError> {
    let dir = out.join("params");
    fs::create_dir_all(&dir).map_err(io_err("persist"))?;
    for (id, m) in bank.models() {
        let f = File::create(dir.join(format!("page_{id}.iscnet"))).map_err(io_err("persist"))?;
        m.params
            .write(BufWriter::new(f))
            .map_err(|e| HarnessError::stage("persist")(e.to_string()))?;
    }
    Ok(())
}

/// Writes every artifact of a finished experiment under `out`.
pub fn persist(config: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(), HarnessError> {
    persist_corpus(config, &exp.offline.corpus, &exp.online.stream, out)?;
    persist_trace(&exp.online.run, out)?;
    persist_profiles(&exp.offline.profiles, out)?;
    persist_params(&exp.bank, out)?;
    let f = File::create(out.join("detections.csv")).map_err(io_err("persist"))?;
    write_detection_log(&exp.online.detections, BufWriter::new(f))
        .map_err(|e| HarnessError::stage("persist")(e.to_string()))?;
    report::write_report(&exp.online.report, out)
}

pub fn read_report(out: &Path) -> Result<MetricsReport, HarnessError> {
    let f = File::open(out.join("metrics.json")).map_err(io_err("report"))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| HarnessError::stage("report")(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small() -> ExperimentConfig {
        ExperimentConfig {
            n_pages: 12,
            plan: VisitPlanConfig {
                visits_per_page: 2,
                span_seconds: 30.0,
            },
            attack: AttackParams {
                profile_visits: 6,
                ..AttackParams::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"n_pages": 0}"#),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"bogus": 1}"#),
            Err(HarnessError::Config(_))
        ));
        let mut c = ExperimentConfig::default();
        c.countermeasures.padding = Some(PaddingPolicy::MaxLen { max_bytes: 1000 });
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn small_clean_run_detects_pages() {
        let c = small();
        let exp = run_experiment(&c).unwrap();
        let r = &exp.online.report;
        assert!(r.detections > 0);
        assert!(r.page_recall > 0.5, "{r:?}");
        assert!((0.0..=1.0).contains(&r.page_accuracy));
        assert_eq!(r.unattributable_units, 0);
    }
}

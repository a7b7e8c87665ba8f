//! Offline pattern collection: replay each tracked page through the chain,
//! keep the packets that recur in every visit, and summarize them.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::CollectorConfig;
use crate::defense::CountermeasureConfig;
use crate::enclave::{run_stream, Chain, ChainError};
use crate::features::{observe, DelayRange, DiscreteFeatures, PacketFeatureVector, ProfiledPacket};
use crate::seed;
use crate::traffic::{render_visit, CorpusParams, WebPageSpec};

pub const PROFILE_HEADER: &str = "ISCPROF 1";

/// Interval threshold used when every constant packet arrives at once.
pub const MIN_INTERVAL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profiling needs at least 2 visits, got {0}")]
    TooFewVisits(usize),
    #[error("page {0} has no packet present in every visit")]
    Untrackable(u32),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("profile file: {0}")]
    Format(String),
    #[error("profile file: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Packets observed during one replay, with arrival times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitTrace {
    pub packets: Vec<(f64, PacketFeatureVector)>,
    /// Ground-truth uids aligned with `packets`; only used by tests and scoring.
    pub uids: Vec<u64>,
    /// Units whose features could not be attributed to a single packet.
    pub unattributable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageProfile {
    pub page_id: u32,
    pub packets: Vec<ProfiledPacket>,
    pub interval_threshold_t: f64,
    pub exemplar_sequences: Vec<Vec<usize>>,
    pub total_per_visit: u32,
}

impl PageProfile {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.packets.is_empty() {
            return Err(format!("page {}: empty profile", self.page_id));
        }
        if !(self.interval_threshold_t > 0.0) {
            return Err(format!("page {}: t must be positive", self.page_id));
        }
        if self.exemplar_sequences.is_empty() {
            return Err(format!("page {}: no exemplars", self.page_id));
        }
        let t = self.packets.len();
        for (i, p) in self.packets.iter().enumerate() {
            if p.index != i || p.per_visit_count == 0 {
                return Err(format!("page {}: bad packet {i}", self.page_id));
            }
            if p.delay_ranges.len() != p.discrete.hops.len() || p.delay_ranges.iter().any(|r| r.min > r.max) {
                return Err(format!("page {}: bad delay ranges at packet {i}", self.page_id));
            }
        }
        if self.exemplar_sequences.iter().flatten().any(|&x| x >= t) {
            return Err(format!("page {}: exemplar index out of range", self.page_id));
        }
        Ok(())
    }
}

/// Settings shared by every replay of the offline phase.
#[derive(Debug, Clone)]
pub struct ReplaySetup<'a> {
    pub chain: &'a Chain,
    pub countermeasures: CountermeasureConfig,
    pub collector: CollectorConfig,
    pub corpus_params: &'a CorpusParams,
}

/// Replays `page` `n` times through fresh chain instances.
pub fn collect_visits(
    page: &WebPageSpec,
    setup: &ReplaySetup<'_>,
    n: usize,
    seed_value: u64,
) -> Result<Vec<VisitTrace>, ProfileError> {
    if n < 2 {
        return Err(ProfileError::TooFewVisits(n));
    }
    let cfg = &setup.chain.config;
    (0..n)
        .map(|v| {
            let visit_seed = seed::derive_indexed(seed_value, "profile-visit", v as u64);
            let packets = render_visit(page, visit_seed, 0.0, setup.corpus_params);
            let run = run_stream(
                setup.chain,
                &packets,
                setup.countermeasures,
                setup.collector.clone(),
                seed::derive(visit_seed, "chain"),
            )?;
            let obs = observe(&run.events, &cfg.topology, cfg.cpu_hz);
            let aligned = obs.len() == run.records.len();
            let mut trace = VisitTrace {
                packets: Vec::new(),
                uids: Vec::new(),
                unattributable: 0,
            };
            for (i, o) in obs.into_iter().enumerate() {
                match o.features {
                    Ok(fv) => {
                        trace.packets.push((o.time, fv));
                        trace.uids.push(if aligned { run.records[i].packet_uid } else { u64::MAX });
                    }
                    Err(_) => trace.unattributable += 1,
                }
            }
            Ok(trace)
        })
        .collect()
}

/// Keeps the packets (by discrete features) present in every visit. Slots
/// are ordered by first appearance in the first visit.
pub fn extract_constant_packets(visits: &[VisitTrace]) -> Result<Vec<ProfiledPacket>, ProfileError> {
    if visits.len() < 2 {
        return Err(ProfileError::TooFewVisits(visits.len()));
    }
    let per_visit: Vec<HashMap<DiscreteFeatures, u32>> = visits
        .iter()
        .map(|v| {
            let mut m = HashMap::new();
            for (_, fv) in &v.packets {
                *m.entry(fv.discrete()).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let mut order: Vec<DiscreteFeatures> = Vec::new();
    for (_, fv) in &visits[0].packets {
        let key = fv.discrete();
        if !order.contains(&key) && per_visit.iter().all(|m| m.contains_key(&key)) {
            order.push(key);
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for (index, key) in order.into_iter().enumerate() {
        let counts: Vec<u32> = per_visit.iter().map(|m| m[&key]).collect();
        let per_visit_count = *counts.iter().min().expect("at least two visits");
        if counts.iter().any(|&c| c != per_visit_count) {
            log::debug!("profiled packet {index}: per-visit counts differ ({counts:?}); using {per_visit_count}");
        }
        let mut ranges: Option<Vec<DelayRange>> = None;
        for (_, fv) in visits.iter().flat_map(|v| &v.packets).filter(|(_, fv)| fv.discrete() == key) {
            match ranges.as_mut() {
                None => ranges = Some(fv.delays().into_iter().map(DelayRange::point).collect()),
                Some(r) => r.iter_mut().zip(fv.delays()).for_each(|(r, d)| r.widen(d)),
            }
        }
        out.push(ProfiledPacket {
            index,
            discrete: key,
            delay_ranges: ranges.expect("key seen in the first visit"),
            per_visit_count,
        });
    }
    Ok(out)
}

/// Builds the page profile: constant packets, interval threshold `t`, and
/// one exemplar slot sequence per training visit.
pub fn build_profile(page_id: u32, visits: &[VisitTrace]) -> Result<PageProfile, ProfileError> {
    let packets = extract_constant_packets(visits)?;
    if packets.is_empty() {
        return Err(ProfileError::Untrackable(page_id));
    }
    let slot_of: HashMap<&DiscreteFeatures, usize> = packets.iter().map(|p| (&p.discrete, p.index)).collect();
    let mut t = 0.0f64;
    let mut exemplars = Vec::with_capacity(visits.len());
    for v in visits {
        let mut taken = vec![0u32; packets.len()];
        let mut seq = Vec::new();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ordered: Vec<&(f64, PacketFeatureVector)> = v.packets.iter().collect();
        ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (time, fv) in ordered {
            let key = fv.discrete();
            if let Some(&slot) = slot_of.get(&key) {
                lo = lo.min(*time);
                hi = hi.max(*time);
                if taken[slot] < packets[slot].per_visit_count {
                    taken[slot] += 1;
                    seq.push(slot);
                }
            }
        }
        t = t.max(hi - lo);
        exemplars.push(seq);
    }
    let total_per_visit = packets.iter().map(|p| p.per_visit_count).sum();
    Ok(PageProfile {
        page_id,
        packets,
        interval_threshold_t: t.max(MIN_INTERVAL),
        exemplar_sequences: exemplars,
        total_per_visit,
    })
}

pub fn write_profiles<W: Write>(profiles: &[PageProfile], mut sink: W) -> Result<(), ProfileError> {
    writeln!(sink, "{PROFILE_HEADER}")?;
    serde_json::to_writer_pretty(&mut sink, profiles)?;
    writeln!(sink)?;
    Ok(())
}

pub fn read_profiles<R: BufRead>(mut source: R) -> Result<Vec<PageProfile>, ProfileError> {
    let mut header = String::new();
    source.read_line(&mut header)?;
    if header.trim_end() != PROFILE_HEADER {
        return Err(ProfileError::Format(format!("expected header `{PROFILE_HEADER}`")));
    }
    let profiles: Vec<PageProfile> = serde_json::from_reader(source)?;
    for p in &profiles {
        p.validate().map_err(ProfileError::Format)?;
    }
    Ok(profiles)
}

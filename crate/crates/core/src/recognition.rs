//! Online recognition: matching indicators, the information buffer, page
//! detection, and packet attribution.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use serde::Serialize;

use crate::features::{features_match, DiscreteFeatures, PacketFeatureVector};
use crate::profiling::PageProfile;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingIndicator {
    pub page_id: u32,
    pub counts: Vec<u32>,
}

impl MatchingIndicator {
    pub fn new(page_id: u32, t: usize) -> Self {
        MatchingIndicator {
            page_id,
            counts: vec![0; t],
        }
    }
}

/// Fraction of profiled packets seen at least once.
pub fn r_appeared(indicator: &MatchingIndicator) -> f64 {
    let t = indicator.counts.len();
    assert!(t >= 1, "indicator over an empty profile");
    indicator.counts.iter().filter(|&&c| c > 0).count() as f64 / t as f64
}

/// Subtracts one visit's worth of appearances, clamping at zero.
pub fn clear_indicator(indicator: &mut MatchingIndicator, profile: &PageProfile) {
    for (c, p) in indicator.counts.iter_mut().zip(&profile.packets) {
        *c = c.saturating_sub(p.per_visit_count);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub features: PacketFeatureVector,
    pub arrival_time: f64,
    pub arrival_seq: u64,
    /// Index of the profile (page) whose slot this entry matched.
    pub profile: usize,
    pub slot: usize,
    pub expiry: f64,
    /// Ground truth carried for scoring only; recognition never reads it.
    pub truth_uid: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionEvent {
    pub page_id: u32,
    pub detection_time: f64,
    pub r_before: f64,
    pub contributing: Vec<BufferEntry>,
    pub attributed: Vec<BufferEntry>,
    pub candidates_scored: usize,
    pub cap_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognitionConfig {
    pub buffer_timeout: f64,
    pub candidate_cap: usize,
    pub legality_threshold: f64,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        RecognitionConfig {
            buffer_timeout: 30.0,
            candidate_cap: 4096,
            legality_threshold: 0.5,
        }
    }
}

/// Scores candidate slot sequences for one page.
pub trait SequenceScorer {
    fn score(&mut self, profile_index: usize, profile: &PageProfile, sequences: &[Vec<usize>]) -> Vec<f64>;
}

impl<F: FnMut(usize, &PageProfile, &[Vec<usize>]) -> Vec<f64>> SequenceScorer for F {
    fn score(&mut self, profile_index: usize, profile: &PageProfile, sequences: &[Vec<usize>]) -> Vec<f64> {
        self(profile_index, profile, sequences)
    }
}

/// Stage 1: keeps entries that lie within `t` of at least one other entry.
pub fn interval_stage1(times: &[f64], t: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut keep = vec![false; times.len()];
    for w in order.windows(2) {
        if times[w[1]] - times[w[0]] <= t {
            keep[w[0]] = true;
            keep[w[1]] = true;
        }
    }
    keep
}

/// Stage 2: a sequence is legal when every pair lies within `t`.
pub fn interval_stage2(times: &[f64], t: f64) -> bool {
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    times.is_empty() || hi - lo <= t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub entries: Vec<BufferEntry>,
    pub candidates_scored: usize,
    pub cap_hit: bool,
}

/// k-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Picks which buffered entries belong to the detected page: enumerate one
/// choice of instances per slot, drop candidates spanning more than `t`,
/// and keep entries of every candidate the classifier calls legal.
pub fn recognize_packets(
    entries: &[BufferEntry],
    profile_index: usize,
    profile: &PageProfile,
    scorer: &mut dyn SequenceScorer,
    config: &RecognitionConfig,
) -> Attribution {
    let t = profile.interval_threshold_t;
    let times: Vec<f64> = entries.iter().map(|e| e.arrival_time).collect();
    let keep = interval_stage1(&times, t);
    let mut by_slot: Vec<Vec<usize>> = vec![Vec::new(); profile.packets.len()];
    let mut survivors: Vec<usize> = (0..entries.len()).filter(|&i| keep[i]).collect();
    survivors.sort_by_key(|&i| entries[i].arrival_seq);
    for i in survivors {
        by_slot[entries[i].slot].push(i);
    }
    let empty = Attribution {
        entries: Vec::new(),
        candidates_scored: 0,
        cap_hit: false,
    };
    if by_slot.iter().any(|s| s.is_empty()) {
        return empty;
    }
    let choices: Vec<Vec<Vec<usize>>> = by_slot
        .iter()
        .zip(&profile.packets)
        .map(|(inst, p)| {
            let k = (p.per_visit_count as usize).min(inst.len());
            combinations(inst.len(), k)
                .into_iter()
                .map(|c| c.into_iter().map(|j| inst[j]).collect())
                .collect()
        })
        .collect();

    let mut candidates: Vec<Vec<usize>> = Vec::new();
    let mut cap_hit = false;
    let mut odometer = vec![0usize; choices.len()];
    'enumerate: loop {
        if candidates.len() == config.candidate_cap {
            cap_hit = true;
            log::info!(
                "page {}: candidate cap {} reached",
                profile.page_id,
                config.candidate_cap
            );
            break;
        }
        let mut members: Vec<usize> = odometer
            .iter()
            .zip(&choices)
            .flat_map(|(&o, c)| c[o].iter().copied())
            .collect();
        members.sort_by_key(|&i| entries[i].arrival_seq);
        candidates.push(members);
        let mut d = choices.len();
        loop {
            if d == 0 {
                break 'enumerate;
            }
            d -= 1;
            odometer[d] += 1;
            if odometer[d] < choices[d].len() {
                break;
            }
            odometer[d] = 0;
        }
    }

    let legal: Vec<Vec<usize>> = candidates
        .into_iter()
        .filter(|c| {
            let ts: Vec<f64> = c.iter().map(|&i| entries[i].arrival_time).collect();
            interval_stage2(&ts, t)
        })
        .collect();
    if legal.is_empty() {
        return Attribution { cap_hit, ..empty };
    }
    let sequences: Vec<Vec<usize>> = legal
        .iter()
        .map(|c| c.iter().map(|&i| entries[i].slot).collect())
        .collect();
    let scores = scorer.score(profile_index, profile, &sequences);
    let mut chosen = vec![false; entries.len()];
    for (c, &s) in legal.iter().zip(&scores) {
        if s >= config.legality_threshold {
            for &i in c {
                chosen[i] = true;
            }
        }
    }
    Attribution {
        entries: (0..entries.len())
            .filter(|&i| chosen[i])
            .map(|i| entries[i].clone())
            .collect(),
        candidates_scored: legal.len(),
        cap_hit,
    }
}

/// The online engine. One per observed stream.
pub struct Recognizer {
    profiles: Vec<PageProfile>,
    index: HashMap<DiscreteFeatures, Vec<(usize, usize)>>,
    indicators: Vec<MatchingIndicator>,
    buffers: Vec<VecDeque<BufferEntry>>,
    config: RecognitionConfig,
    next_seq: u64,
}

impl Recognizer {
    pub fn new(profiles: Vec<PageProfile>, config: RecognitionConfig) -> Self {
        let mut index: HashMap<DiscreteFeatures, Vec<(usize, usize)>> = HashMap::new();
        for (p, prof) in profiles.iter().enumerate() {
            for pkt in &prof.packets {
                index.entry(pkt.discrete.clone()).or_default().push((p, pkt.index));
            }
        }
        let indicators = profiles
            .iter()
            .map(|p| MatchingIndicator::new(p.page_id, p.packets.len()))
            .collect();
        let buffers = profiles.iter().map(|_| VecDeque::new()).collect();
        Recognizer {
            profiles,
            index,
            indicators,
            buffers,
            config,
            next_seq: 0,
        }
    }

    pub fn profiles(&self) -> &[PageProfile] {
        &self.profiles
    }

    pub fn indicator(&self, profile: usize) -> &MatchingIndicator {
        &self.indicators[profile]
    }

    pub fn buffer(&self, profile: usize) -> impl Iterator<Item = &BufferEntry> {
        self.buffers[profile].iter()
    }

    pub fn buffered(&self) -> usize {
        self.buffers.iter().map(|b| b.len()).sum()
    }

    /// Drops entries whose timer ran out before `now`, decrementing the
    /// counter each one contributed.
    pub fn expire_buffer(&mut self, now: f64) {
        for (p, buf) in self.buffers.iter_mut().enumerate() {
            let counts = &mut self.indicators[p].counts;
            buf.retain(|e| {
                if e.expiry < now {
                    counts[e.slot] = counts[e.slot].saturating_sub(1);
                    false
                } else {
                    true
                }
            });
        }
    }

    /// Feeds one observed packet. Returns a detection for every profile that
    /// this packet completed.
    pub fn ingest(
        &mut self,
        fv: &PacketFeatureVector,
        time: f64,
        truth_uid: Option<u64>,
        scorer: &mut dyn SequenceScorer,
    ) -> Vec<RecognitionEvent> {
        self.expire_buffer(time);
        let seq = self.next_seq;
        self.next_seq += 1;
        let Some(hits) = self.index.get(&fv.discrete()) else {
            return Vec::new();
        };
        let mut matched: Vec<(usize, usize)> = Vec::new();
        for &(p, slot) in hits {
            if matched.iter().any(|&(q, _)| q == p) {
                continue;
            }
            let ok = features_match(fv, &self.profiles[p].packets[slot]).unwrap_or_else(|e| {
                log::error!("profile {}: {e}", self.profiles[p].page_id);
                false
            });
            if ok {
                matched.push((p, slot));
            }
        }
        let mut events = Vec::new();
        for (p, slot) in matched {
            let r_before = r_appeared(&self.indicators[p]);
            self.indicators[p].counts[slot] += 1;
            self.buffers[p].push_back(BufferEntry {
                features: fv.clone(),
                arrival_time: time,
                arrival_seq: seq,
                profile: p,
                slot,
                expiry: time + self.config.buffer_timeout,
                truth_uid,
            });
            if r_appeared(&self.indicators[p]) >= 1.0 {
                events.push(self.detect(p, time, r_before, scorer));
            }
        }
        events
    }

    fn detect(&mut self, p: usize, time: f64, r_before: f64, scorer: &mut dyn SequenceScorer) -> RecognitionEvent {
        let contributing: Vec<BufferEntry> = self.buffers[p].iter().cloned().collect();
        let attribution = recognize_packets(&contributing, p, &self.profiles[p], scorer, &self.config);
        clear_indicator(&mut self.indicators[p], &self.profiles[p]);
        // Keep the buffer consistent with the cleared counters: drop one
        // visit's worth of entries per slot, attributed ones first.
        let mut to_drop: Vec<u32> = self.profiles[p].packets.iter().map(|x| x.per_visit_count).collect();
        let attributed_seqs: Vec<u64> = attribution.entries.iter().map(|e| e.arrival_seq).collect();
        let buf = &mut self.buffers[p];
        let mut drop = vec![false; buf.len()];
        for pass in 0..2 {
            for (i, e) in buf.iter().enumerate() {
                let first_pass = attributed_seqs.contains(&e.arrival_seq);
                if drop[i] || to_drop[e.slot] == 0 || (pass == 0 && !first_pass) {
                    continue;
                }
                drop[i] = true;
                to_drop[e.slot] -= 1;
            }
        }
        let mut i = 0;
        buf.retain(|_| {
            i += 1;
            !drop[i - 1]
        });
        RecognitionEvent {
            page_id: self.profiles[p].page_id,
            detection_time: time,
            r_before,
            contributing,
            attributed: attribution.entries,
            candidates_scored: attribution.candidates_scored,
            cap_hit: attribution.cap_hit,
        }
    }
}

/// Detection log: `detection_time,page_id,r_before,entries_attributed`.
pub fn write_detection_log<W: Write>(events: &[RecognitionEvent], sink: W) -> Result<(), csv::Error> {
    #[derive(Serialize)]
    struct Row {
        detection_time: f64,
        page_id: u32,
        r_before: f64,
        entries_attributed: usize,
    }
    let mut w = csv::Writer::from_writer(sink);
    for e in events {
        w.serialize(Row {
            detection_time: e.detection_time,
            page_id: e.page_id,
            r_before: e.r_before,
            entries_attributed: e.attributed.len(),
        })?;
    }
    w.flush()?;
    Ok(())
}

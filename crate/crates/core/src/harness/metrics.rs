//! Scoring against ground truth: page and packet accuracy/recall, padding
//! bandwidth overhead, and busy-cycle accounting from a trace.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::defense::{is_dummy_uid, pad_length, PaddingError, PaddingPolicy};
use crate::event::{Direction, EnclaveId, InterfaceEvent};
use crate::packet::{visit_of_uid, PacketGroundTruth};
use crate::recognition::RecognitionEvent;
use crate::traffic::{cipher_len, Corpus, PlannedVisit};

/// A fraction whose denominator may be zero. `value` is 0 in that case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub undefined: bool,
}

impl Ratio {
    pub fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Ratio {
                value: 0.0,
                undefined: true,
            }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                undefined: false,
            }
        }
    }
}

/// Page accuracy and recall. A detection is accurate when one of its
/// contributing packets belongs to a visit of the detected page; each
/// accurate detection claims at most one such visit (the one with the most
/// contributing packets), and recall counts claimed tracked visits.
pub fn page_metrics(events: &[RecognitionEvent], plan: &[PlannedVisit], tracked: &[u32]) -> (Ratio, Ratio) {
    let tracked: HashSet<u32> = tracked.iter().copied().collect();
    let tracked_visits = plan.iter().filter(|v| tracked.contains(&v.page_id)).count();
    let mut claimed: HashSet<u32> = HashSet::new();
    let mut accurate = 0;
    for ev in events {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for uid in ev.contributing.iter().filter_map(|e| e.truth_uid) {
            if is_dummy_uid(uid) {
                continue;
            }
            let visit = visit_of_uid(uid);
            if plan.get(visit as usize).is_some_and(|v| v.page_id == ev.page_id) {
                *votes.entry(visit).or_default() += 1;
            }
        }
        if votes.is_empty() {
            continue;
        }
        accurate += 1;
        let best = votes
            .iter()
            .filter(|(v, _)| !claimed.contains(v))
            .max_by_key(|&(v, n)| (*n, std::cmp::Reverse(*v)));
        if let Some((&v, _)) = best {
            claimed.insert(v);
        }
    }
    let recalled = claimed
        .iter()
        .filter(|&&v| tracked.contains(&plan[v as usize].page_id))
        .count();
    (Ratio::of(accurate, events.len()), Ratio::of(recalled, tracked_visits))
}

/// Packet accuracy and recall over distinct (detected page, uid) pairs.
pub fn packet_metrics(events: &[RecognitionEvent], stream: &[PacketGroundTruth], tracked: &[u32]) -> (Ratio, Ratio) {
    let tracked: HashSet<u32> = tracked.iter().copied().collect();
    let page_of: HashMap<u64, u32> = stream.iter().map(|p| (p.packet_uid, p.page_id)).collect();
    let p_tracked = stream
        .iter()
        .filter(|p| !is_dummy_uid(p.packet_uid) && tracked.contains(&p.page_id))
        .count();
    let mut attributed: HashSet<(u32, u64)> = HashSet::new();
    for ev in events {
        for uid in ev.attributed.iter().filter_map(|e| e.truth_uid) {
            attributed.insert((ev.page_id, uid));
        }
    }
    let correct: HashSet<u64> = attributed
        .iter()
        .filter(|(page, uid)| page_of.get(uid) == Some(page))
        .map(|&(_, uid)| uid)
        .collect();
    let accurate = attributed
        .iter()
        .filter(|(page, uid)| page_of.get(uid) == Some(page))
        .count();
    (Ratio::of(accurate, attributed.len()), Ratio::of(correct.len(), p_tracked))
}

/// Extra ciphertext bytes caused by padding, relative to unpadded
/// ciphertext, over every packet of every page.
pub fn bandwidth_overhead(corpus: &Corpus, policy: Option<PaddingPolicy>, record_overhead: u64) -> Result<f64, PaddingError> {
    let (mut base, mut padded) = (0u64, 0u64);
    for page in &corpus.pages {
        for obj in &page.objects {
            for &len in std::iter::once(&obj.request_bytes).chain(&obj.response_segments) {
                base += cipher_len(u64::from(len), record_overhead);
                let p = match policy {
                    Some(pol) => pad_length(len, pol)?,
                    None => len,
                };
                padded += cipher_len(u64::from(p), record_overhead);
            }
        }
    }
    if base == 0 {
        return Ok(0.0);
    }
    Ok((padded - base) as f64 / base as f64)
}

/// Cycles each enclave spent between an ECALL and its last OCALL.
pub fn busy_cycles(events: &[InterfaceEvent]) -> BTreeMap<EnclaveId, u64> {
    let mut busy = BTreeMap::new();
    let mut open: Option<(EnclaveId, u64, u64)> = None;
    let close = |o: Option<(EnclaveId, u64, u64)>, busy: &mut BTreeMap<EnclaveId, u64>| {
        if let Some((id, start, end)) = o {
            *busy.entry(id).or_insert(0) += end.saturating_sub(start);
        }
    };
    for e in events {
        match e.direction {
            Direction::Ecall => {
                close(open.take(), &mut busy);
                open = Some((e.enclave_id, e.cycle, e.cycle));
            }
            Direction::Ocall => {
                if let Some((_, _, end)) = open.as_mut() {
                    *end = (*end).max(e.cycle);
                }
            }
        }
    }
    close(open, &mut busy);
    busy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub page_accuracy: f64,
    pub page_recall: f64,
    pub packet_accuracy: f64,
    pub packet_recall: f64,
    /// Names of metrics whose denominator was zero.
    pub undefined: Vec<String>,
    pub detections: usize,
    pub tracked_visits: usize,
    pub profiled_pages: usize,
    pub untrackable_pages: Vec<u32>,
    pub stream_packets: usize,
    pub unattributable_units: usize,
    pub rejected_batches: u64,
    pub bandwidth_overhead: f64,
    pub cycles_per_packet: f64,
    /// Simulated packets per second of enclave busy time.
    pub packets_per_second: f64,
    pub classifiers_trained: usize,
    pub classifiers_unconverged: usize,
    pub candidate_cap_hits: usize,
}

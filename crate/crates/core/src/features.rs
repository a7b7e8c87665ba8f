//! Per-packet feature vectors recovered from the interface trace, and the
//! matching rule used against profiled packets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::vnf::Role;
use crate::enclave::ChainTopology;
use crate::event::{Direction, EnclaveId, InterfaceEvent, OCALL_DELIVER};

/// The discrete (delay-free) observation at one VNF.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HopKey {
    pub enclave_id: EnclaveId,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub ocall_indices: Vec<u32>,
}

/// Everything observable about one packet except delays. Used as the packet
/// identity during profiling and as the lookup key during recognition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiscreteFeatures {
    pub hops: Vec<HopKey>,
}

impl DiscreteFeatures {
    pub fn chain_path(&self) -> Vec<EnclaveId> {
        self.hops.iter().map(|h| h.enclave_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VnfFeatures {
    pub enclave_id: EnclaveId,
    pub param_bytes_in: u64,
    pub param_bytes_out: u64,
    pub delay_cycles: u64,
    pub ocall_indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketFeatureVector {
    pub vnfs: Vec<VnfFeatures>,
    pub chain_path: Vec<EnclaveId>,
    /// `(out - in) / in` at the WAN optimizer, when the packet crossed it.
    pub size_change_ratio: Option<f64>,
}

impl PacketFeatureVector {
    pub fn new(vnfs: Vec<VnfFeatures>, wanopt: Option<EnclaveId>) -> Self {
        let chain_path = vnfs.iter().map(|v| v.enclave_id).collect();
        let size_change_ratio = wanopt.and_then(|w| {
            vnfs.iter()
                .find(|v| v.enclave_id == w && v.param_bytes_in > 0)
                .map(|v| (v.param_bytes_out as f64 - v.param_bytes_in as f64) / v.param_bytes_in as f64)
        });
        PacketFeatureVector {
            vnfs,
            chain_path,
            size_change_ratio,
        }
    }

    pub fn discrete(&self) -> DiscreteFeatures {
        DiscreteFeatures {
            hops: self
                .vnfs
                .iter()
                .map(|v| HopKey {
                    enclave_id: v.enclave_id,
                    bytes_in: v.param_bytes_in,
                    bytes_out: v.param_bytes_out,
                    ocall_indices: v.ocall_indices.clone(),
                })
                .collect(),
        }
    }

    pub fn delays(&self) -> Vec<u64> {
        self.vnfs.iter().map(|v| v.delay_cycles).collect()
    }
}

/// Closed delay interval in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DelayRange {
    pub min: u64,
    pub max: u64,
}

impl DelayRange {
    pub fn point(v: u64) -> Self {
        DelayRange { min: v, max: v }
    }

    pub fn widen(&mut self, v: u64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn contains(&self, v: u64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn width(&self) -> u64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfiledPacket {
    pub index: usize,
    pub discrete: DiscreteFeatures,
    pub delay_ranges: Vec<DelayRange>,
    pub per_visit_count: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("profiled packet {index} has {hops} hops but {ranges} delay ranges")]
    TopologyMismatch {
        index: usize,
        hops: usize,
        ranges: usize,
    },
}

/// True when every discrete feature is equal and every per-VNF delay lies in
/// the profiled closed range.
pub fn features_match(
    candidate: &PacketFeatureVector,
    profiled: &ProfiledPacket,
) -> Result<bool, FeatureError> {
    let hops = &profiled.discrete.hops;
    if hops.len() != profiled.delay_ranges.len() {
        return Err(FeatureError::TopologyMismatch {
            index: profiled.index,
            hops: hops.len(),
            ranges: profiled.delay_ranges.len(),
        });
    }
    if candidate.vnfs.len() != hops.len() || candidate.chain_path.len() != hops.len() {
        return Ok(false);
    }
    let ok = candidate
        .vnfs
        .iter()
        .zip(&candidate.chain_path)
        .zip(hops.iter().zip(&profiled.delay_ranges))
        .all(|((v, &path_id), (h, range))| {
            v.enclave_id == h.enclave_id
                && path_id == h.enclave_id
                && v.param_bytes_in == h.bytes_in
                && v.param_bytes_out == h.bytes_out
                && v.ocall_indices == h.ocall_indices
                && range.contains(v.delay_cycles)
        });
    Ok(ok)
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("hop at event {at} is not an ECALL")]
    NotAnEcall { at: usize },
    #[error("hop at event {at} delivers {delivered} outputs; per-packet features need exactly one")]
    Unattributable { at: usize, delivered: usize },
    #[error("hop at event {at} never delivered")]
    Truncated { at: usize },
}

/// Builds a feature vector from the events of one packet unit: a run of hops,
/// each an ECALL followed by that enclave's OCALLs up to its delivery.
pub fn extract_features(
    events: &[InterfaceEvent],
    wanopt: Option<EnclaveId>,
) -> Result<PacketFeatureVector, ExtractError> {
    let mut vnfs = Vec::new();
    for (at, hop) in split_hops(events) {
        let entry = &hop[0];
        if entry.direction != Direction::Ecall {
            return Err(ExtractError::NotAnEcall { at });
        }
        let ocalls = &hop[1..];
        let delivered: Vec<&InterfaceEvent> = ocalls
            .iter()
            .filter(|e| e.call_id == OCALL_DELIVER)
            .collect();
        match delivered.len() {
            0 => return Err(ExtractError::Truncated { at }),
            1 => {}
            n => {
                return Err(ExtractError::Unattributable { at, delivered: n });
            }
        }
        let dlv = delivered[0];
        vnfs.push(VnfFeatures {
            enclave_id: entry.enclave_id,
            param_bytes_in: entry.param_bytes,
            param_bytes_out: dlv.param_bytes,
            delay_cycles: dlv.cycle.saturating_sub(entry.cycle),
            ocall_indices: ocalls.iter().map(|e| e.aux.unwrap_or(e.call_id)).collect(),
        });
    }
    Ok(PacketFeatureVector::new(vnfs, wanopt))
}

/// One packet unit as the observer sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Seconds, from the unit's first cycle stamp.
    pub time: f64,
    pub first_seq: u64,
    pub features: Result<PacketFeatureVector, ExtractError>,
}

/// Segments a trace into packet units and extracts each unit's features.
pub fn observe(events: &[InterfaceEvent], topology: &ChainTopology, cpu_hz: f64) -> Vec<Observation> {
    let wanopt = topology.vnfs.iter().find(|s| s.role == Role::Wanopt).map(|s| s.enclave_id);
    topology
        .segment(events)
        .into_iter()
        .map(|unit| {
            let slice = &events[unit];
            Observation {
                time: slice[0].cycle as f64 / cpu_hz,
                first_seq: slice[0].seq_no,
                features: extract_features(slice, wanopt),
            }
        })
        .collect()
}

/// Splits at every ECALL; yields (offset, slice) pairs.
fn split_hops(events: &[InterfaceEvent]) -> Vec<(usize, &[InterfaceEvent])> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=events.len() {
        if i == events.len() || events[i].direction == Direction::Ecall {
            if i > start {
                out.push((start, &events[start..i]));
            }
            start = i;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::OCALL_WRITE;
    use rand::{Rng as _, SeedableRng};

    fn fv(hops: &[(u32, u64, u64, u64, &[u32])]) -> PacketFeatureVector {
        PacketFeatureVector::new(
            hops.iter()
                .map(|&(id, i, o, d, oc)| VnfFeatures {
                    enclave_id: id,
                    param_bytes_in: i,
                    param_bytes_out: o,
                    delay_cycles: d,
                    ocall_indices: oc.to_vec(),
                })
                .collect(),
            Some(4),
        )
    }

    fn profile_of(samples: &[PacketFeatureVector]) -> ProfiledPacket {
        let mut ranges: Vec<DelayRange> =
            samples[0].delays().into_iter().map(DelayRange::point).collect();
        for s in &samples[1..] {
            for (r, d) in ranges.iter_mut().zip(s.delays()) {
                r.widen(d);
            }
        }
        ProfiledPacket {
            index: 0,
            discrete: samples[0].discrete(),
            delay_ranges: ranges,
            per_visit_count: 1,
        }
    }

    #[test]
    fn training_sample_matches_own_profile() {
        let a = fv(&[(1, 141, 141, 3000, &[0]), (2, 141, 141, 9000, &[0])]);
        let b = fv(&[(1, 141, 141, 3100, &[0]), (2, 141, 141, 8800, &[0])]);
        let p = profile_of(&[a.clone(), b.clone()]);
        assert!(features_match(&a, &p).unwrap());
        assert!(features_match(&b, &p).unwrap());
    }

    #[test]
    fn delay_just_outside_range_fails() {
        let a = fv(&[(1, 141, 141, 3000, &[0]), (2, 141, 141, 9000, &[0])]);
        let p = profile_of(&[a.clone()]);
        let mut over = a.clone();
        over.vnfs[1].delay_cycles += 1;
        assert!(!features_match(&over, &p).unwrap());
        let mut under = a;
        under.vnfs[0].delay_cycles -= 1;
        assert!(!features_match(&under, &p).unwrap());
    }

    #[test]
    fn single_discrete_perturbation_breaks_match() {
        let a = fv(&[(2, 141, 141, 3000, &[0]), (3, 141, 141, 9000, &[1, 0])]);
        let p = profile_of(&[a.clone()]);
        let mut perturbed = vec![a.clone(), a.clone(), a.clone(), a.clone()];
        perturbed[0].vnfs[0].param_bytes_in += 16;
        perturbed[1].vnfs[1].param_bytes_out += 16;
        perturbed[2].vnfs[1].ocall_indices = vec![0];
        perturbed[3].chain_path[1] = 1;
        for c in &perturbed {
            assert!(!features_match(c, &p).unwrap());
        }
    }

    #[test]
    fn malformed_profile_is_contract_error() {
        let a = fv(&[(1, 141, 141, 3000, &[0])]);
        let mut p = profile_of(&[a.clone()]);
        p.delay_ranges.clear();
        assert!(matches!(
            features_match(&a, &p),
            Err(FeatureError::TopologyMismatch { .. })
        ));
    }

    fn brute_force(c: &PacketFeatureVector, p: &ProfiledPacket) -> bool {
        if c.vnfs.len() != p.discrete.hops.len() {
            return false;
        }
        for i in 0..c.vnfs.len() {
            let (v, h, r) = (&c.vnfs[i], &p.discrete.hops[i], p.delay_ranges[i]);
            if c.chain_path[i] != h.enclave_id || v.enclave_id != h.enclave_id {
                return false;
            }
            if v.param_bytes_in != h.bytes_in || v.param_bytes_out != h.bytes_out {
                return false;
            }
            if v.ocall_indices != h.ocall_indices {
                return false;
            }
            if v.delay_cycles < r.min || v.delay_cycles > r.max {
                return false;
            }
        }
        true
    }

    #[test]
    fn agrees_with_field_by_field_comparator() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let base = fv(&[(2, 157, 157, 5000, &[0]), (1, 157, 157, 4000, &[0])]);
        let p = profile_of(&[base.clone(), {
            let mut b = base.clone();
            b.vnfs[0].delay_cycles = 5040;
            b.vnfs[1].delay_cycles = 3960;
            b
        }]);
        let mut matched = 0;
        for _ in 0..50 {
            let mut c = base.clone();
            for v in c.vnfs.iter_mut() {
                v.delay_cycles = (v.delay_cycles as i64 + rng.gen_range(-60..=60)) as u64;
                if rng.gen_bool(0.1) {
                    v.param_bytes_in += 16;
                }
                if rng.gen_bool(0.05) {
                    v.ocall_indices.push(OCALL_WRITE);
                }
            }
            if rng.gen_bool(0.1) {
                c.vnfs.pop();
                c.chain_path.pop();
            }
            let got = features_match(&c, &p).unwrap();
            assert_eq!(got, brute_force(&c, &p));
            matched += got as usize;
        }
        assert!(matched > 0);
    }

    fn ev(seq: u64, cycle: u64, enclave: u32, dir: Direction, call: u32, bytes: u64) -> InterfaceEvent {
        InterfaceEvent {
            seq_no: seq,
            cycle,
            enclave_id: enclave,
            direction: dir,
            call_id: call,
            param_bytes: bytes,
            aux: (dir == Direction::Ocall).then_some(call),
        }
    }

    #[test]
    fn extracts_hops_from_events() {
        use Direction::*;
        let events = vec![
            ev(0, 100, 2, Ecall, 0, 157),
            ev(1, 600, 2, Ocall, 0, 157),
            ev(2, 700, 3, Ecall, 0, 157),
            ev(3, 900, 3, Ocall, 1, 64),
            ev(4, 1500, 3, Ocall, 0, 157),
        ];
        let fv = extract_features(&events, Some(4)).unwrap();
        assert_eq!(fv.chain_path, vec![2, 3]);
        assert_eq!(fv.delays(), vec![500, 800]);
        assert_eq!(fv.vnfs[1].ocall_indices, vec![1, 0]);
        assert_eq!(fv.size_change_ratio, None);
    }

    #[test]
    fn multiple_deliveries_are_unattributable() {
        use Direction::*;
        let events = vec![
            ev(0, 100, 1, Ecall, 0, 900),
            ev(1, 600, 1, Ocall, 0, 157),
            ev(2, 610, 1, Ocall, 0, 157),
        ];
        assert_eq!(
            extract_features(&events, None),
            Err(ExtractError::Unattributable { at: 0, delivered: 2 })
        );
        assert_eq!(
            extract_features(&events[..1], None),
            Err(ExtractError::Truncated { at: 0 })
        );
    }

    #[test]
    fn ratio_is_computed_at_wanopt() {
        let v = fv(&[(4, 1000, 700, 10, &[0])]);
        assert!((v.size_change_ratio.unwrap() + 0.3).abs() < 1e-12);
    }
}

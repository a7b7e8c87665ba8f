//! Fixed-size padding and batch delivery with in-enclave verification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{ContentClass, PacketGroundTruth, PacketKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    MaxLen { max_bytes: u32 },
    MultipleOf { x_bytes: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PaddingError {
    #[error("payload of {len} bytes exceeds the MaxLen policy of {max} bytes")]
    TooLong { len: u32, max: u32 },
    #[error("padding unit must be at least one byte")]
    ZeroUnit,
}

/// Padded plaintext length. `MultipleOf(x)` picks the least `n·x` strictly
/// greater than `len`, so exact multiples grow by a full unit.
pub fn pad_length(len: u32, policy: PaddingPolicy) -> Result<u32, PaddingError> {
    match policy {
        PaddingPolicy::MaxLen { max_bytes } => {
            if len > max_bytes {
                Err(PaddingError::TooLong { len, max: max_bytes })
            } else {
                Ok(max_bytes)
            }
        }
        PaddingPolicy::MultipleOf { x_bytes: 0 } => Err(PaddingError::ZeroUnit),
        PaddingPolicy::MultipleOf { x_bytes } => Ok((len / x_bytes + 1) * x_bytes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchPolicy {
    pub threshold_n: u32,
    /// Flush a partial batch once its oldest packet has waited this long.
    pub flush_timeout: Option<f64>,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            threshold_n: 8,
            flush_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountermeasureConfig {
    pub padding: Option<PaddingPolicy>,
    pub batch: Option<BatchPolicy>,
}

impl CountermeasureConfig {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(PaddingPolicy::MultipleOf { x_bytes: 0 }) = self.padding {
            return Err("padding x_bytes must be at least 1".into());
        }
        if let Some(b) = self.batch {
            if b.threshold_n == 0 {
                return Err("batch threshold_n must be at least 1".into());
            }
            if matches!(b.flush_timeout, Some(t) if !(t > 0.0)) {
                return Err("flush_timeout must be positive".into());
            }
        }
        Ok(())
    }

    pub fn pad(&self, len: u32) -> Result<u32, PaddingError> {
        match self.padding {
            Some(p) => pad_length(len, p),
            None => Ok(len),
        }
    }
}

/// Simulation token the enclave checks before processing a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchTag {
    pub batch_seq: u64,
    pub index: u32,
    pub batch_len: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMember {
    pub packet: PacketGroundTruth,
    pub tag: BatchTag,
    pub dummy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_seq: u64,
    pub members: Vec<BatchMember>,
    /// Time the batch was released to the chain.
    pub release_time: f64,
}

/// High bit marks dummy uids so they can never collide with real packets.
pub const DUMMY_UID_FLAG: u64 = 1 << 63;
pub const DUMMY_PAGE: u32 = u32::MAX;
const DUMMY_BYTES: u32 = 101;

pub fn is_dummy_uid(uid: u64) -> bool {
    uid & DUMMY_UID_FLAG != 0
}

/// Groups packets into batches of exactly `n`. Single owner; one per chain.
#[derive(Debug)]
pub struct BatchGate {
    policy: BatchPolicy,
    pending: Vec<PacketGroundTruth>,
    next_seq: u64,
    dummies: u64,
}

impl BatchGate {
    pub fn new(policy: BatchPolicy) -> Self {
        BatchGate {
            policy,
            pending: Vec::new(),
            next_seq: 1,
            dummies: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Adds a packet; returns every batch that became ready.
    pub fn push(&mut self, pkt: PacketGroundTruth) -> Vec<Batch> {
        let mut ready = Vec::new();
        if let (Some(timeout), Some(first)) = (self.policy.flush_timeout, self.pending.first()) {
            if pkt.arrival_time - first.arrival_time > timeout {
                let at = first.arrival_time + timeout;
                ready.extend(self.flush(at));
            }
        }
        self.pending.push(pkt);
        if self.pending.len() == self.policy.threshold_n as usize {
            let release = self.pending.last().map_or(0.0, |p| p.arrival_time);
            ready.push(self.seal(release));
        }
        ready
    }

    /// Releases a partial batch, topped up to `n` with flagged dummies.
    pub fn flush(&mut self, now: f64) -> Option<Batch> {
        if self.pending.is_empty() {
            return None;
        }
        while self.pending.len() < self.policy.threshold_n as usize {
            self.pending.push(PacketGroundTruth {
                packet_uid: DUMMY_UID_FLAG | self.dummies,
                page_id: DUMMY_PAGE,
                object_id: 0,
                kind: PacketKind::Request,
                payload_bytes: DUMMY_BYTES,
                content_class: ContentClass::Image,
                suspicious: false,
                loggable: false,
                constant: false,
                arrival_time: now,
            });
            self.dummies += 1;
        }
        Some(self.seal(now))
    }

    fn seal(&mut self, release_time: f64) -> Batch {
        let batch_seq = self.next_seq;
        self.next_seq += 1;
        let n = self.pending.len() as u32;
        let members = self
            .pending
            .drain(..)
            .enumerate()
            .map(|(i, packet)| BatchMember {
                dummy: is_dummy_uid(packet.packet_uid),
                tag: BatchTag {
                    batch_seq,
                    index: i as u32,
                    batch_len: n,
                },
                packet,
            })
            .collect();
        Batch {
            batch_seq,
            members,
            release_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    WrongSize,
    BadTag,
    Replay,
}

/// In-enclave check: exactly `n` members, tags consistent with the batch,
/// and a sequence number newer than any batch accepted before.
pub fn enclave_batch_verify(batch: &Batch, n: u32, last_accepted: Option<u64>) -> Verdict {
    if batch.members.len() != n as usize {
        return Verdict::Reject(RejectReason::WrongSize);
    }
    let mut seen = vec![false; n as usize];
    for m in &batch.members {
        let t = m.tag;
        if t.batch_seq != batch.batch_seq || t.batch_len != n || t.index >= n || seen[t.index as usize] {
            return Verdict::Reject(RejectReason::BadTag);
        }
        seen[t.index as usize] = true;
    }
    if last_accepted.is_some_and(|last| batch.batch_seq <= last) {
        return Verdict::Reject(RejectReason::Replay);
    }
    Verdict::Accept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiple_of_is_strict() {
        let p = |x| PaddingPolicy::MultipleOf { x_bytes: x };
        assert_eq!(pad_length(600, p(200)), Ok(800));
        assert_eq!(pad_length(1, p(200)), Ok(200));
        assert_eq!(pad_length(200, p(200)), Ok(400));
        assert_eq!(pad_length(5, p(0)), Err(PaddingError::ZeroUnit));
    }

    #[test]
    fn multiple_of_matches_loop_oracle() {
        for x in [100u32, 200, 500] {
            for l in 1..=5000u32 {
                let mut n = 1;
                while n * x <= l {
                    n += 1;
                }
                let got = pad_length(l, PaddingPolicy::MultipleOf { x_bytes: x }).unwrap();
                assert_eq!(got, n * x);
                assert!(got > l && got <= l + x && got % x == 0);
            }
        }
    }

    #[test]
    fn max_len() {
        let p = PaddingPolicy::MaxLen { max_bytes: 1500 };
        assert_eq!(pad_length(1, p), Ok(1500));
        assert_eq!(pad_length(1500, p), Ok(1500));
        assert_eq!(pad_length(1501, p), Err(PaddingError::TooLong { len: 1501, max: 1500 }));
    }

    fn pkt(i: u64) -> PacketGroundTruth {
        PacketGroundTruth {
            packet_uid: i,
            page_id: 0,
            object_id: 0,
            kind: PacketKind::Response,
            payload_bytes: 200,
            content_class: ContentClass::Text,
            suspicious: false,
            loggable: false,
            constant: true,
            arrival_time: i as f64,
        }
    }

    #[test]
    fn threshold_one_is_identity() {
        let mut g = BatchGate::new(BatchPolicy {
            threshold_n: 1,
            flush_timeout: None,
        });
        for i in 0..5 {
            let out = g.push(pkt(i));
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].members.len(), 1);
            assert_eq!(out[0].members[0].packet.packet_uid, i);
        }
        assert!(g.flush(10.0).is_none());
    }

    #[test]
    fn ten_packets_in_fours() {
        let mut g = BatchGate::new(BatchPolicy {
            threshold_n: 4,
            flush_timeout: None,
        });
        let mut batches: Vec<Batch> = (0..10).flat_map(|i| g.push(pkt(i))).collect();
        assert_eq!(g.pending(), 2);
        batches.extend(g.flush(20.0));
        let sizes: Vec<usize> = batches.iter().map(|b| b.members.len()).collect();
        assert_eq!(sizes, vec![4, 4, 4]);
        let dummies: Vec<bool> = batches[2].members.iter().map(|m| m.dummy).collect();
        assert_eq!(dummies, vec![false, false, true, true]);
        for b in &batches {
            assert_eq!(enclave_batch_verify(b, 4, None), Verdict::Accept);
        }
    }

    #[test]
    fn timeout_flushes_stalled_batch() {
        let mut g = BatchGate::new(BatchPolicy {
            threshold_n: 4,
            flush_timeout: Some(0.5),
        });
        assert!(g.push(pkt(0)).is_empty());
        let out = g.push(pkt(3));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].members.iter().filter(|m| m.dummy).count(), 3);
        assert_eq!(g.pending(), 1);
    }

    #[test]
    fn verifier_rejects_short_forged_and_replayed() {
        let mut g = BatchGate::new(BatchPolicy {
            threshold_n: 3,
            flush_timeout: None,
        });
        let b: Vec<Batch> = (0..3).flat_map(|i| g.push(pkt(i))).collect();
        let b = &b[0];
        assert_eq!(enclave_batch_verify(b, 3, None), Verdict::Accept);

        let mut short = b.clone();
        short.members.pop();
        assert_eq!(enclave_batch_verify(&short, 3, None), Verdict::Reject(RejectReason::WrongSize));

        let mut forged = b.clone();
        forged.members[1].tag.index = 0;
        assert_eq!(enclave_batch_verify(&forged, 3, None), Verdict::Reject(RejectReason::BadTag));

        assert_eq!(
            enclave_batch_verify(b, 3, Some(b.batch_seq)),
            Verdict::Reject(RejectReason::Replay)
        );
    }
}

//! Per-VNF computations. Each function is pure: it returns the processing
//! delay and the OCALLs the enclave body will issue, and leaves event
//! emission to the enclave runtime.

use serde::{Deserialize, Serialize};

use super::rules::{server_address, RuleMatcher};
use super::trie::BinaryTrie;
use super::ChainError;
use crate::event::OCALL_WRITE;
use crate::packet::ContentClass;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Nat,
    Waf,
    Ids,
    Wanopt,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Nat, Role::Waf, Role::Ids, Role::Wanopt];

    pub fn name(self) -> &'static str {
        match self {
            Role::Nat => "NAT",
            Role::Waf => "WAF",
            Role::Ids => "IDS",
            Role::Wanopt => "WANOPT",
        }
    }
}

/// Cycle costs. Every default is a multiple of 8 so packets that differ in
/// any input differ by at least 8 cycles when noise is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    pub nat_base: u64,
    pub waf_base: u64,
    pub ids_base: u64,
    pub wanopt_base: u64,
    pub per_rule: u64,
    pub per_bit: u64,
    pub per_byte: u64,
    /// Cost of moving one ciphertext byte through an enclave that does not
    /// otherwise process it (batch pass-through).
    pub copy_per_byte: u64,
    /// Cycles between one VNF's delivery and the next VNF's entry.
    pub transfer: u64,
    /// Half-width of the uniform processing-time noise.
    pub noise_amplitude: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            nat_base: 2400,
            waf_base: 3200,
            ids_base: 4000,
            wanopt_base: 2800,
            per_rule: 16,
            per_bit: 24,
            per_byte: 8,
            copy_per_byte: 8,
            transfer: 400,
            noise_amplitude: 0,
        }
    }
}

impl DelayModel {
    pub fn base(&self, role: Role) -> u64 {
        match role {
            Role::Nat => self.nat_base,
            Role::Waf => self.waf_base,
            Role::Ids => self.ids_base,
            Role::Wanopt => self.wanopt_base,
        }
    }

    /// Noise for a draw `v` in `[0, 1)`: `floor(2A·v) - A`, uniform over the
    /// integers `-A..A`. Reusing the same draws across amplitudes nests the
    /// buckets, so a larger amplitude never separates fewer pairs.
    pub fn noise(&self, v: f64) -> i64 {
        let a = self.noise_amplitude as i64;
        if a == 0 {
            return 0;
        }
        ((2 * a) as f64 * v).floor() as i64 - a
    }

    fn finish(&self, cycles: u64, v: f64) -> u64 {
        (cycles as i64 + self.noise(v)).max(0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WafRoute {
    Ids,
    Onward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VnfOutcome {
    pub delay: u64,
    pub out_bytes: u32,
    /// OCALLs issued before delivery.
    pub ocalls: Vec<u32>,
    pub route: Option<WafRoute>,
}

pub fn nat_process(
    page_id: u32,
    payload_bytes: u32,
    trie: &BinaryTrie,
    model: &DelayModel,
    v: f64,
) -> Result<VnfOutcome, ChainError> {
    let hit = trie
        .lookup(server_address(page_id))
        .ok_or_else(|| ChainError::Config("NAT lookup fell through: no default route".into()))?;
    let cycles = model.nat_base
        + model.per_bit * u64::from(hit.depth)
        + model.per_byte * u64::from(payload_bytes);
    Ok(VnfOutcome {
        delay: model.finish(cycles, v),
        out_bytes: payload_bytes,
        ocalls: Vec::new(),
        route: None,
    })
}

pub fn waf_process(content: &[u8], rules: &RuleMatcher, model: &DelayModel, v: f64) -> VnfOutcome {
    let hit = rules.first_match(content);
    let checked = hit.map_or(rules.len(), |i| i + 1) as u64;
    let cycles = model.waf_base + model.per_rule * checked + model.per_byte * content.len() as u64;
    VnfOutcome {
        delay: model.finish(cycles, v),
        out_bytes: content.len() as u32,
        ocalls: Vec::new(),
        route: Some(if hit.is_some() {
            WafRoute::Ids
        } else {
            WafRoute::Onward
        }),
    }
}

pub fn ids_process(content: &[u8], rules: &RuleMatcher, model: &DelayModel, v: f64) -> VnfOutcome {
    let hit = rules.first_match(content);
    let checked = hit.map_or(rules.len(), |i| i + 1) as u64;
    let cycles = model.ids_base + model.per_rule * checked + model.per_byte * content.len() as u64;
    VnfOutcome {
        delay: model.finish(cycles, v),
        out_bytes: content.len() as u32,
        ocalls: if hit.is_some() { vec![OCALL_WRITE] } else { Vec::new() },
        route: None,
    }
}

/// Fraction removed by compression for an object: text in [0.31, 0.60],
/// images in [0, 0.05]. The text floor sits above 0.30 so the ceiling in
/// the output size cannot pull a 101-byte payload under 30%.
pub fn compression_ratio(page_id: u32, object_id: u32, class: ContentClass) -> f64 {
    let u = seed::unit_hash(&[u64::from(page_id), u64::from(object_id), 0xC0DE]);
    match class {
        ContentClass::Text => 0.31 + 0.29 * u,
        ContentClass::Image => 0.05 * u,
    }
}

pub fn compressed_size(payload_bytes: u32, ratio: f64) -> u32 {
    ((f64::from(payload_bytes) * (1.0 - ratio)).ceil() as u32).max(1)
}

pub fn wanopt_process(
    page_id: u32,
    object_id: u32,
    class: ContentClass,
    payload_bytes: u32,
    model: &DelayModel,
    v: f64,
) -> VnfOutcome {
    let out = compressed_size(payload_bytes, compression_ratio(page_id, object_id, class));
    let cycles = model.wanopt_base + model.per_byte * u64::from(payload_bytes);
    VnfOutcome {
        delay: model.finish(cycles, v),
        out_bytes: out,
        ocalls: Vec::new(),
        route: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::rules::{RuleConfig, RuleSet};

    #[test]
    fn compression_classes_are_separated() {
        for page in 0..50 {
            for obj in 0..20 {
                let t = compression_ratio(page, obj, ContentClass::Text);
                let i = compression_ratio(page, obj, ContentClass::Image);
                assert!((0.30..=0.60).contains(&t));
                assert!((0.0..=0.05).contains(&i));
            }
        }
        let text_out = compressed_size(1000, compression_ratio(1, 1, ContentClass::Text));
        assert!(text_out <= 700);
        let image_out = compressed_size(1000, compression_ratio(1, 1, ContentClass::Image));
        assert!(image_out >= 950);
    }

    #[test]
    fn measured_text_ratio_holds_at_smallest_payload() {
        for obj in 0..500 {
            let r = compression_ratio(9, obj, ContentClass::Text);
            for l in [101u32, 150, 777, 1500] {
                let out = compressed_size(l, r);
                assert!(f64::from(l - out) / f64::from(l) >= 0.30);
            }
        }
    }

    #[test]
    fn noise_is_bounded_and_nested() {
        let m = |a| DelayModel {
            noise_amplitude: a,
            ..DelayModel::default()
        };
        for k in 0..1000 {
            let v = k as f64 / 1000.0;
            let n = m(4).noise(v);
            assert!((-4..4).contains(&n));
            assert_eq!(m(0).noise(v), 0);
        }
    }

    #[test]
    fn delay_is_deterministic_and_monotone() {
        let rules = RuleSet::generate(&RuleConfig::default(), 2).unwrap();
        let model = DelayModel::default();
        let a = nat_process(4, 500, rules.trie(), &model, 0.3).unwrap();
        assert_eq!(a, nat_process(4, 500, rules.trie(), &model, 0.9).unwrap());
        let b = nat_process(4, 501, rules.trie(), &model, 0.3).unwrap();
        assert!(b.delay > a.delay);

        let content = vec![b'q'; 300];
        let few = RuleSet::generate(
            &RuleConfig {
                ids_rules: 1000,
                ..RuleConfig::default()
            },
            2,
        )
        .unwrap();
        let many = RuleSet::generate(
            &RuleConfig {
                ids_rules: 5000,
                ..RuleConfig::default()
            },
            2,
        )
        .unwrap();
        let d1 = ids_process(&content, &few.ids, &model, 0.0).delay;
        let d5 = ids_process(&content, &many.ids, &model, 0.0).delay;
        assert!(d5 > d1);
        assert!(ids_process(&content, &few.ids, &model, 0.0).ocalls.is_empty());
        let longer = ids_process(&vec![b'q'; 301], &few.ids, &model, 0.0).delay;
        assert!(longer >= d1);
    }
}

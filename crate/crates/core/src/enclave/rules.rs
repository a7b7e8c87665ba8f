//! Rule tables for the WAF, IDS, and NAT, plus the synthetic payload bytes
//! the pattern matchers scan.

use aho_corasick::AhoCorasick;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::trie::{BinaryTrie, NatEntry};
use super::ChainError;
use crate::packet::PacketGroundTruth;
use crate::seed;

/// The WAF's routing pattern.
pub const SUSPICIOUS_PATTERN: &[u8] = b"1=1";

/// Byte strings that make the IDS write a log entry. Each loggable object
/// carries one of them, chosen by hashing its identity.
pub const IDS_TRIGGERS: [&str; 20] = [
    "/etc/passwd",
    "<script>",
    "cmd.exe",
    "union select",
    "../../",
    "wget http",
    "/bin/sh",
    "eval(",
    "drop table",
    "xp_cmdshell",
    "<iframe",
    "base64_decode(",
    "onerror=",
    "/proc/self",
    "nc -e",
    "%00",
    "document.cookie",
    "select * from",
    "powershell -enc",
    "chmod 777",
];

/// Filler rules draw from an alphabet that synthetic payloads never contain,
/// so only the planted patterns can match.
const FILLER_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ!#&*+?@^~";

/// Ordered pattern list; the first rule that occurs in the payload wins.
#[derive(Debug, Clone)]
pub struct RuleMatcher {
    patterns: Vec<Vec<u8>>,
    automaton: AhoCorasick,
}

impl RuleMatcher {
    pub fn new(patterns: Vec<Vec<u8>>) -> Result<Self, ChainError> {
        if patterns.is_empty() {
            return Err(ChainError::Config("rule list must not be empty".into()));
        }
        if patterns.iter().any(|p| p.is_empty()) {
            return Err(ChainError::Config("rules must be non-empty byte strings".into()));
        }
        let automaton = AhoCorasick::new(&patterns)
            .map_err(|e| ChainError::Config(format!("rule automaton: {e}")))?;
        Ok(RuleMatcher {
            patterns,
            automaton,
        })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[Vec<u8>] {
        &self.patterns
    }

    /// Lowest-index rule present anywhere in `content`.
    pub fn first_match(&self, content: &[u8]) -> Option<usize> {
        self.automaton
            .find_overlapping_iter(content)
            .map(|m| m.pattern().as_usize())
            .min()
    }

    /// Rules a sequential scanner would test before stopping.
    pub fn rules_checked(&self, content: &[u8]) -> usize {
        self.first_match(content).map_or(self.patterns.len(), |i| i + 1)
    }
}

/// Sequential reference scan.
pub fn naive_first_match(patterns: &[Vec<u8>], content: &[u8]) -> Option<usize> {
    patterns
        .iter()
        .position(|p| content.windows(p.len()).any(|w| w == p.as_slice()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub waf_rules: usize,
    pub ids_rules: usize,
    pub nat_prefixes: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            waf_rules: 1000,
            ids_rules: 3000,
            nat_prefixes: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuleSet {
    pub waf: RuleMatcher,
    pub ids: RuleMatcher,
    pub nat_table: Vec<NatEntry>,
    trie: BinaryTrie,
}

impl RuleSet {
    pub fn new(
        waf_rules: Vec<Vec<u8>>,
        ids_rules: Vec<Vec<u8>>,
        nat_table: Vec<NatEntry>,
    ) -> Result<Self, ChainError> {
        if let Some(bad) = nat_table.iter().find(|e| !e.is_well_formed()) {
            return Err(ChainError::Config(format!("malformed NAT prefix {bad:?}")));
        }
        if !nat_table.iter().any(|e| e.len == 0) {
            return Err(ChainError::Config("NAT table needs a default route (0/0)".into()));
        }
        let trie = nat_table.iter().copied().collect();
        Ok(RuleSet {
            waf: RuleMatcher::new(waf_rules)?,
            ids: RuleMatcher::new(ids_rules)?,
            nat_table,
            trie,
        })
    }

    /// Seeded rule tables: filler rules plus the routing pattern in the WAF
    /// and every trigger in the IDS, at random positions.
    pub fn generate(config: &RuleConfig, seed_value: u64) -> Result<Self, ChainError> {
        if config.waf_rules < 1 || config.ids_rules < IDS_TRIGGERS.len() {
            return Err(ChainError::Config(format!(
                "need at least 1 WAF rule and {} IDS rules",
                IDS_TRIGGERS.len()
            )));
        }
        let mut rng = seed::rng(seed::derive(seed_value, "waf"));
        let mut waf: Vec<Vec<u8>> = (0..config.waf_rules - 1).map(|_| filler(&mut rng)).collect();
        waf.insert(rng.gen_range(0..=waf.len()), SUSPICIOUS_PATTERN.to_vec());

        let mut rng = seed::rng(seed::derive(seed_value, "ids"));
        let mut ids: Vec<Vec<u8>> = (0..config.ids_rules - IDS_TRIGGERS.len())
            .map(|_| filler(&mut rng))
            .collect();
        for t in IDS_TRIGGERS {
            ids.insert(rng.gen_range(0..=ids.len()), t.as_bytes().to_vec());
        }

        let mut rng = seed::rng(seed::derive(seed_value, "nat"));
        let mut nat = vec![NatEntry {
            prefix: 0,
            len: 0,
            translation: rng.gen(),
        }];
        for _ in 0..config.nat_prefixes {
            let len = rng.gen_range(4..=28u8);
            nat.push(NatEntry {
                prefix: rng.gen::<u32>() & NatEntry::mask(len),
                len,
                translation: rng.gen(),
            });
        }
        RuleSet::new(waf, ids, nat)
    }

    pub fn trie(&self) -> &BinaryTrie {
        &self.trie
    }
}

fn filler(rng: &mut seed::Rng) -> Vec<u8> {
    let n = rng.gen_range(4..=12);
    (0..n)
        .map(|_| FILLER_ALPHABET[rng.gen_range(0..FILLER_ALPHABET.len())])
        .collect()
}

/// Server address a page's traffic is translated against.
pub fn server_address(page_id: u32) -> u32 {
    (seed::mix64(u64::from(page_id) ^ 0x5E4E_A11D) >> 32) as u32
}

pub fn trigger_for(page_id: u32, object_id: u32) -> &'static str {
    let h = seed::mix64((u64::from(page_id) << 32) | u64::from(object_id));
    IDS_TRIGGERS[(h % IDS_TRIGGERS.len() as u64) as usize]
}

/// Deterministic plaintext for a packet: lowercase filler with the routing
/// pattern and IDS trigger spliced in when the packet carries them.
pub fn synth_content(pkt: &PacketGroundTruth) -> Vec<u8> {
    let len = pkt.payload_bytes as usize;
    let mut state = seed::mix64((u64::from(pkt.page_id) << 32) ^ u64::from(pkt.object_id) ^ (len as u64) << 48);
    let mut body: Vec<u8> = (0..len)
        .map(|_| {
            state = seed::mix64(state);
            b'a' + (state % 26) as u8
        })
        .collect();
    let mut at = 0usize;
    let mut splice = |token: &[u8]| {
        let end = (at + token.len()).min(body.len());
        body[at..end].copy_from_slice(&token[..end - at]);
        at = end + 1;
    };
    if pkt.suspicious {
        splice(b"?id=1=1");
    }
    if pkt.loggable {
        splice(trigger_for(pkt.page_id, pkt.object_id).as_bytes());
    }
    body
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{ContentClass, PacketKind};
    use rand::SeedableRng;

    fn pkt(suspicious: bool, loggable: bool, bytes: u32) -> PacketGroundTruth {
        PacketGroundTruth {
            packet_uid: 0,
            page_id: 3,
            object_id: 5,
            kind: PacketKind::Response,
            payload_bytes: bytes,
            content_class: ContentClass::Text,
            suspicious,
            loggable,
            constant: true,
            arrival_time: 0.0,
        }
    }

    #[test]
    fn automaton_agrees_with_sequential_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut patterns: Vec<Vec<u8>> = (0..200)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| b'a' + rng.gen_range(0..4)).collect())
            .collect();
        patterns.push(b"zz".to_vec());
        let m = RuleMatcher::new(patterns.clone()).unwrap();
        for _ in 0..300 {
            let content: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| b'a' + rng.gen_range(0..6)).collect();
            assert_eq!(m.first_match(&content), naive_first_match(&patterns, &content));
        }
    }

    #[test]
    fn generated_rules_match_only_planted_content() {
        let rules = RuleSet::generate(&RuleConfig::default(), 17).unwrap();
        assert_eq!(rules.waf.len(), 1000);
        assert_eq!(rules.ids.len(), 3000);
        let benign = synth_content(&pkt(false, true, 600));
        assert_eq!(rules.waf.first_match(&benign), None);
        assert_eq!(rules.waf.rules_checked(&benign), 1000);
        let sus = synth_content(&pkt(true, false, 600));
        let idx = rules.waf.first_match(&sus).unwrap();
        assert_eq!(rules.waf.patterns()[idx], SUSPICIOUS_PATTERN);
        assert_eq!(rules.ids.first_match(&sus), None);
        let logged = synth_content(&pkt(true, true, 600));
        let hit = rules.ids.first_match(&logged).unwrap();
        assert_eq!(rules.ids.patterns()[hit], trigger_for(3, 5).as_bytes());
        assert_eq!(naive_first_match(rules.ids.patterns(), &logged), Some(hit));
    }

    #[test]
    fn content_is_deterministic_and_sized() {
        let a = synth_content(&pkt(true, true, 101));
        assert_eq!(a.len(), 101);
        assert_eq!(a, synth_content(&pkt(true, true, 101)));
    }

    #[test]
    fn nat_table_requires_default_route() {
        let r = RuleSet::new(
            vec![b"x".to_vec()],
            vec![b"y".to_vec()],
            vec![NatEntry {
                prefix: 0x0A00_0000,
                len: 8,
                translation: 1,
            }],
        );
        assert!(matches!(r, Err(ChainError::Config(_))));
        assert!(RuleSet::new(vec![], vec![b"y".to_vec()], vec![]).is_err());
    }
}

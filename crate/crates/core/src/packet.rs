//! Ground-truth packet records. The attack never reads these; they exist for
//! driving the simulator and for scoring.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacketKind {
    Request,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentClass {
    Text,
    Image,
}

impl PacketKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketKind::Request => "request",
            PacketKind::Response => "response",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "request" => Some(PacketKind::Request),
            "response" => Some(PacketKind::Response),
            _ => None,
        }
    }
}

impl ContentClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentClass::Text => "text",
            ContentClass::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(ContentClass::Text),
            "image" => Some(ContentClass::Image),
            _ => None,
        }
    }
}

/// A packet as the gateway sees it before encryption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketGroundTruth {
    pub packet_uid: u64,
    pub page_id: u32,
    pub object_id: u32,
    pub kind: PacketKind,
    pub payload_bytes: u32,
    pub content_class: ContentClass,
    /// Carries a `1=1`-style pattern the WAF forwards to the IDS.
    pub suspicious: bool,
    /// Triggers an IDS log write when inspected.
    pub loggable: bool,
    /// Recurs with identical size in every visit of its page.
    pub constant: bool,
    pub arrival_time: f64,
}

/// Packet uids pack the visit index in the high half so scoring can recover
/// which visit a packet came from.
pub fn make_uid(visit: u32, local: u32) -> u64 {
    (u64::from(visit) << 32) | u64::from(local)
}

pub fn visit_of_uid(uid: u64) -> u32 {
    (uid >> 32) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uid_packs_visit() {
        let uid = make_uid(17, 42);
        assert_eq!(visit_of_uid(uid), 17);
        assert_eq!(uid & 0xFFFF_FFFF, 42);
        assert_eq!(make_uid(0, 5), 5);
    }

    #[test]
    fn enum_text_round_trips() {
        for k in [PacketKind::Request, PacketKind::Response] {
            assert_eq!(PacketKind::parse(k.as_str()), Some(k));
        }
        for c in [ContentClass::Text, ContentClass::Image] {
            assert_eq!(ContentClass::parse(c.as_str()), Some(c));
        }
        assert_eq!(PacketKind::parse("ack"), None);
    }
}

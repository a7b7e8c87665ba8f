//! Synthetic web-page corpora, visit rendering, session interleaving, and the
//! gateway's ciphertext-length model.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{make_uid, ContentClass, PacketGroundTruth, PacketKind};
use crate::seed;

/// Per-record overhead added by the gateway's encryption.
pub const DEFAULT_RECORD_OVERHEAD: u64 = 29;

/// Ciphertext length for `plaintext` bytes: 16-byte block rounding plus a
/// constant record overhead.
pub fn cipher_len(plaintext: u64, overhead: u64) -> u64 {
    16 * plaintext.div_ceil(16) + overhead
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object_id: u32,
    pub request_bytes: u32,
    pub response_segments: Vec<u32>,
    pub content_class: ContentClass,
    pub suspicious: bool,
    pub loggable: bool,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebPageSpec {
    pub page_id: u32,
    pub objects: Vec<ObjectSpec>,
    pub dynamic_fraction: f64,
}

impl WebPageSpec {
    pub fn packet_count(&self) -> usize {
        self.objects
            .iter()
            .map(|o| 1 + o.response_segments.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub pages: Vec<WebPageSpec>,
    pub tracked_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub objects_min: u32,
    pub objects_max: u32,
    pub segments_min: u32,
    pub segments_max: u32,
    pub segment_min_bytes: u32,
    pub segment_max_bytes: u32,
    pub request_min_bytes: u32,
    pub request_max_bytes: u32,
    pub image_fraction: f64,
    pub dynamic_fraction: f64,
    pub suspicious_prob: f64,
    pub loggable_prob: f64,
    pub tracked_fraction: f64,
    /// Every packet of a visit arrives within this many seconds of its start.
    pub render_window: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            objects_min: 4,
            objects_max: 10,
            segments_min: 1,
            segments_max: 4,
            segment_min_bytes: 101,
            segment_max_bytes: 1500,
            request_min_bytes: 101,
            request_max_bytes: 800,
            image_fraction: 0.4,
            dynamic_fraction: 0.3,
            suspicious_prob: 0.05,
            loggable_prob: 0.10,
            tracked_fraction: 0.5,
            render_window: 2.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("corpus config: {0}")]
    Config(String),
    #[error("unknown page id {0}")]
    UnknownPage(u32),
    #[error("corpus file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("session file: {0}")]
    Csv(#[from] csv::Error),
    #[error("session file row {row}: {message}")]
    Row { row: usize, message: String },
}

impl CorpusParams {
    pub fn validate(&self) -> Result<(), TrafficError> {
        let bad = |m: &str| Err(TrafficError::Config(m.to_string()));
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("objects_min must be in 1..=objects_max");
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return bad("segments_min must be in 1..=segments_max");
        }
        if self.segment_max_bytes <= 100 || self.request_max_bytes <= 100 {
            return bad("maximum segment and request sizes must exceed 100 bytes");
        }
        if self.segment_min_bytes > self.segment_max_bytes
            || self.request_min_bytes > self.request_max_bytes
        {
            return bad("size ranges are empty");
        }
        for (name, p) in [
            ("image_fraction", self.image_fraction),
            ("dynamic_fraction", self.dynamic_fraction),
            ("suspicious_prob", self.suspicious_prob),
            ("loggable_prob", self.loggable_prob),
            ("tracked_fraction", self.tracked_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrafficError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.render_window > 0.0 && self.render_window.is_finite()) {
            return bad("render_window must be positive");
        }
        Ok(())
    }

    fn segment_range(&self) -> std::ops::RangeInclusive<u32> {
        self.segment_min_bytes.max(101)..=self.segment_max_bytes
    }

    fn request_range(&self) -> std::ops::RangeInclusive<u32> {
        self.request_min_bytes.max(101)..=self.request_max_bytes
    }
}

pub fn generate_corpus(
    seed_value: u64,
    n_pages: usize,
    params: &CorpusParams,
) -> Result<Corpus, TrafficError> {
    params.validate()?;
    if n_pages == 0 {
        return Err(TrafficError::Config("n_pages must be at least 1".into()));
    }
    let mut pages = Vec::with_capacity(n_pages);
    for page_id in 0..n_pages as u32 {
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "page", page_id.into()));
        pages.push(generate_page(page_id, params, &mut rng));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "tracked"));
    let n_tracked = (params.tracked_fraction * n_pages as f64).round() as usize;
    let mut ids: Vec<u32> = (0..n_pages as u32).collect();
    ids.shuffle(&mut rng);
    let mut tracked_ids = ids[..n_tracked].to_vec();
    tracked_ids.sort_unstable();
    Ok(Corpus {
        seed: seed_value,
        pages,
        tracked_ids,
    })
}

fn generate_page(page_id: u32, params: &CorpusParams, rng: &mut seed::Rng) -> WebPageSpec {
    let n = rng.gen_range(params.objects_min..=params.objects_max) as usize;
    // At least one object must stay constant or the page cannot be profiled.
    let n_dynamic = ((params.dynamic_fraction * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let dynamic: HashSet<usize> = order[..n_dynamic].iter().copied().collect();
    let objects = (0..n)
        .map(|i| {
            let segs = rng.gen_range(params.segments_min..=params.segments_max);
            ObjectSpec {
                object_id: i as u32,
                request_bytes: rng.gen_range(params.request_range()),
                response_segments: (0..segs)
                    .map(|_| rng.gen_range(params.segment_range()))
                    .collect(),
                content_class: if rng.gen_bool(params.image_fraction) {
                    ContentClass::Image
                } else {
                    ContentClass::Text
                },
                suspicious: rng.gen_bool(params.suspicious_prob),
                loggable: rng.gen_bool(params.loggable_prob),
                constant: !dynamic.contains(&i),
            }
        })
        .collect();
    WebPageSpec {
        page_id,
        objects,
        dynamic_fraction: params.dynamic_fraction,
    }
}

/// Renders one visit. Uids carry visit index 0; [`interleave_sessions`]
/// restamps them.
pub fn render_visit(
    page: &WebPageSpec,
    visit_seed: u64,
    start_time: f64,
    params: &CorpusParams,
) -> Vec<PacketGroundTruth> {
    let mut rng = seed::rng(visit_seed);
    let mut packets = Vec::with_capacity(page.packet_count());
    for obj in &page.objects {
        let mut push = |kind, bytes, constant| {
            let response = kind == PacketKind::Response;
            packets.push(PacketGroundTruth {
                packet_uid: 0,
                page_id: page.page_id,
                object_id: obj.object_id,
                kind,
                payload_bytes: bytes,
                content_class: obj.content_class,
                suspicious: response && obj.suspicious,
                loggable: response && obj.loggable,
                constant,
                arrival_time: 0.0,
            });
        };
        push(PacketKind::Request, obj.request_bytes, true);
        for &seg in &obj.response_segments {
            let bytes = if obj.constant {
                seg
            } else {
                rng.gen_range(params.segment_range())
            };
            push(PacketKind::Response, bytes, obj.constant);
        }
    }
    // Nominal slots spread over 70% of the window; jitter of up to three
    // slots lets neighbouring packets swap order between visits.
    let w = params.render_window;
    let step = 0.7 * w / packets.len() as f64;
    let jitter = (3.0 * step).min(0.3 * w);
    let mut offsets: Vec<(f64, usize)> = (0..packets.len())
        .map(|p| (p as f64 * step + rng.gen::<f64>() * jitter, p))
        .collect();
    offsets.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    offsets
        .into_iter()
        .enumerate()
        .map(|(local, (offset, p))| {
            let mut pkt = packets[p].clone();
            pkt.packet_uid = make_uid(0, local as u32);
            pkt.arrival_time = start_time + offset;
            pkt
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedVisit {
    pub page_id: u32,
    pub start_time: f64,
}

/// `visits_per_page` visits of every page, start times uniform over `span`
/// seconds, sorted by start.
pub fn standard_visit_plan(
    corpus: &Corpus,
    visits_per_page: u32,
    span: f64,
    seed_value: u64,
) -> Vec<PlannedVisit> {
    let mut rng = seed::rng(seed_value);
    let mut plan: Vec<PlannedVisit> = corpus
        .pages
        .iter()
        .flat_map(|p| (0..visits_per_page).map(move |_| p.page_id))
        .map(|page_id| PlannedVisit {
            page_id,
            start_time: rng.gen::<f64>() * span,
        })
        .collect();
    plan.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
    plan
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub packets: Vec<PacketGroundTruth>,
}

pub fn interleave_sessions(
    corpus: &Corpus,
    plan: &[PlannedVisit],
    seed_value: u64,
    params: &CorpusParams,
) -> Result<SessionStream, TrafficError> {
    let mut packets = Vec::new();
    for (v, visit) in plan.iter().enumerate() {
        let page = corpus
            .pages
            .iter()
            .find(|p| p.page_id == visit.page_id)
            .ok_or(TrafficError::UnknownPage(visit.page_id))?;
        let visit_seed = seed::derive_indexed(seed_value, "visit", v as u64);
        for mut pkt in render_visit(page, visit_seed, visit.start_time, params) {
            pkt.packet_uid = make_uid(v as u32, pkt.packet_uid as u32);
            packets.push(pkt);
        }
    }
    // Stable sort keeps (visit, local) order among equal timestamps.
    packets.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(SessionStream { packets })
}

pub fn write_corpus<W: Write>(corpus: &Corpus, sink: W) -> Result<(), TrafficError> {
    serde_json::to_writer_pretty(sink, corpus)?;
    Ok(())
}

pub fn read_corpus<R: Read>(source: R) -> Result<Corpus, TrafficError> {
    let corpus: Corpus = serde_json::from_reader(source)?;
    let mut seen = HashSet::new();
    for p in &corpus.pages {
        if !seen.insert(p.page_id) {
            return Err(TrafficError::Config(format!("duplicate page id {}", p.page_id)));
        }
        if !p.objects.iter().any(|o| o.constant) {
            return Err(TrafficError::Config(format!(
                "page {} has no constant object",
                p.page_id
            )));
        }
    }
    if let Some(t) = corpus.tracked_ids.iter().find(|t| !seen.contains(t)) {
        return Err(TrafficError::UnknownPage(*t));
    }
    Ok(corpus)
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionRow {
    packet_uid: u64,
    page_id: u32,
    object_id: u32,
    kind: String,
    bytes: u32,
    class: String,
    suspicious: bool,
    loggable: bool,
    constant: bool,
    arrival_time: f64,
}

pub fn write_session<W: Write>(stream: &SessionStream, sink: W) -> Result<(), TrafficError> {
    let mut w = csv::Writer::from_writer(sink);
    for p in &stream.packets {
        w.serialize(SessionRow {
            packet_uid: p.packet_uid,
            page_id: p.page_id,
            object_id: p.object_id,
            kind: p.kind.as_str().into(),
            bytes: p.payload_bytes,
            class: p.content_class.as_str().into(),
            suspicious: p.suspicious,
            loggable: p.loggable,
            constant: p.constant,
            arrival_time: p.arrival_time,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_session<R: Read>(source: R) -> Result<SessionStream, TrafficError> {
    let mut packets = Vec::new();
    for (i, row) in csv::Reader::from_reader(source).deserialize().enumerate() {
        let row: SessionRow = row?;
        let bad = |message: String| TrafficError::Row { row: i + 1, message };
        let kind = PacketKind::parse(&row.kind).ok_or_else(|| bad(format!("kind `{}`", row.kind)))?;
        let class =
            ContentClass::parse(&row.class).ok_or_else(|| bad(format!("class `{}`", row.class)))?;
        if row.bytes == 0 {
            return Err(bad("bytes must be positive".into()));
        }
        if let Some(prev) = packets.last().map(|p: &PacketGroundTruth| p.arrival_time) {
            if row.arrival_time < prev {
                return Err(bad("arrival_time decreases".into()));
            }
        }
        packets.push(PacketGroundTruth {
            packet_uid: row.packet_uid,
            page_id: row.page_id,
            object_id: row.object_id,
            kind,
            payload_bytes: row.bytes,
            content_class: class,
            suspicious: row.suspicious,
            loggable: row.loggable,
            constant: row.constant,
            arrival_time: row.arrival_time,
        });
    }
    Ok(SessionStream { packets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn defaults() -> CorpusParams {
        CorpusParams::default()
    }

    #[test]
    fn cipher_len_formula() {
        assert_eq!(cipher_len(0, 29), 29);
        assert_eq!(cipher_len(100, 29), 112 + 29);
        assert_eq!(cipher_len(16, 29), 16 + 29);
        for l in 1..=4096u64 {
            let blocks = (l + 15) / 16;
            assert_eq!(cipher_len(l, 29), blocks * 16 + 29);
            assert!(cipher_len(l + 1, 29) >= cipher_len(l, 29));
            let extra = cipher_len(l, 29) - l;
            assert!((29..=29 + 15).contains(&extra));
        }
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let a = generate_corpus(7, 1, &defaults()).unwrap();
        assert_eq!(a, generate_corpus(7, 1, &defaults()).unwrap());
        let c = generate_corpus(7, 100, &defaults()).unwrap();
        let ids: HashSet<u32> = c.pages.iter().map(|p| p.page_id).collect();
        assert_eq!(ids.len(), 100);
        assert_eq!(c.tracked_ids.len(), 50);
        for p in &c.pages {
            assert!(p.objects.iter().any(|o| o.constant));
            for o in &p.objects {
                assert!(o.request_bytes > 100);
                assert!(o.response_segments.iter().all(|&s| s > 100));
            }
        }
    }

    #[test]
    fn degenerate_params_rejected() {
        let p = CorpusParams {
            segment_max_bytes: 100,
            ..defaults()
        };
        assert!(matches!(generate_corpus(1, 3, &p), Err(TrafficError::Config(_))));
        assert!(generate_corpus(1, 0, &defaults()).is_err());
    }

    #[test]
    fn segment_sizes_follow_uniform_distribution() {
        let params = CorpusParams {
            dynamic_fraction: 0.0,
            ..defaults()
        };
        let c = generate_corpus(3, 5000, &params).unwrap();
        let (lo, hi) = (params.segment_min_bytes, params.segment_max_bytes);
        let buckets = 20usize;
        let width = f64::from(hi - lo + 1) / buckets as f64;
        let mut counts = vec![0f64; buckets];
        let mut n = 0f64;
        for s in c.pages.iter().flat_map(|p| &p.objects).flat_map(|o| &o.response_segments) {
            let b = ((f64::from(s - lo)) / width) as usize;
            counts[b.min(buckets - 1)] += 1.0;
            n += 1.0;
        }
        for (b, &obs) in counts.iter().enumerate() {
            let first = lo as f64 + b as f64 * width;
            let values = ((first + width).ceil() - first.ceil()).max(0.0);
            let p = values / f64::from(hi - lo + 1);
            let mean = n * p;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!(
                (obs - mean).abs() <= 3.0 * sd,
                "bucket {b}: observed {obs}, expected {mean:.1} ± {:.1}",
                3.0 * sd
            );
        }
    }

    fn size_multiset(v: &[PacketGroundTruth]) -> BTreeMap<(u32, u32, bool), usize> {
        let mut m = BTreeMap::new();
        for p in v {
            *m.entry((p.object_id, p.payload_bytes, p.kind == PacketKind::Request))
                .or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn static_page_visits_are_identical() {
        let params = CorpusParams {
            dynamic_fraction: 0.0,
            ..defaults()
        };
        let c = generate_corpus(9, 5, &params).unwrap();
        for page in &c.pages {
            let a = render_visit(page, 1, 0.0, &params);
            let b = render_visit(page, 2, 50.0, &params);
            assert_eq!(size_multiset(&a), size_multiset(&b));
            for p in &b {
                assert!(p.arrival_time >= 50.0 && p.arrival_time < 50.0 + params.render_window);
            }
        }
    }

    #[test]
    fn dynamic_objects_vary_between_visits() {
        let params = CorpusParams {
            dynamic_fraction: 1.0,
            ..defaults()
        };
        let c = generate_corpus(21, 100, &params).unwrap();
        let mut differing = 0;
        for (i, page) in c.pages.iter().enumerate() {
            let a = render_visit(page, 2 * i as u64, 0.0, &params);
            let b = render_visit(page, 2 * i as u64 + 1, 0.0, &params);
            let sizes = |v: &[PacketGroundTruth], constant: bool| {
                let mut s: Vec<(u32, u32)> = v
                    .iter()
                    .filter(|p| p.kind == PacketKind::Response && p.constant == constant)
                    .map(|p| (p.object_id, p.payload_bytes))
                    .collect();
                s.sort_unstable();
                s
            };
            assert_eq!(sizes(&a, true), sizes(&b, true));
            if sizes(&a, false) != sizes(&b, false) {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing} of 100 pairs differed");
    }

    #[test]
    fn constant_packets_survive_every_visit() {
        let params = defaults();
        let c = generate_corpus(5, 10, &params).unwrap();
        for page in &c.pages {
            let visits: Vec<_> = (0..20).map(|v| render_visit(page, v, 0.0, &params)).collect();
            for obj in page.objects.iter().filter(|o| o.constant) {
                for v in &visits {
                    let mut seen: Vec<u32> = v
                        .iter()
                        .filter(|p| p.object_id == obj.object_id && p.kind == PacketKind::Response)
                        .map(|p| p.payload_bytes)
                        .collect();
                    seen.sort_unstable();
                    let mut want = obj.response_segments.clone();
                    want.sort_unstable();
                    assert_eq!(seen, want);
                }
            }
        }
    }

    #[test]
    fn single_visit_stream_equals_render() {
        let params = defaults();
        let c = generate_corpus(4, 3, &params).unwrap();
        let plan = [PlannedVisit {
            page_id: 1,
            start_time: 3.0,
        }];
        let s = interleave_sessions(&c, &plan, 77, &params).unwrap();
        let direct = render_visit(&c.pages[1], seed::derive_indexed(77, "visit", 0), 3.0, &params);
        assert_eq!(s.packets, direct);
    }

    #[test]
    fn disjoint_windows_concatenate() {
        let params = defaults();
        let c = generate_corpus(4, 3, &params).unwrap();
        let plan = [
            PlannedVisit {
                page_id: 0,
                start_time: 0.0,
            },
            PlannedVisit {
                page_id: 2,
                start_time: 10.0,
            },
        ];
        let s = interleave_sessions(&c, &plan, 1, &params).unwrap();
        let n0 = c.pages[0].packet_count();
        assert!(s.packets[..n0].iter().all(|p| p.page_id == 0));
        assert!(s.packets[n0..].iter().all(|p| p.page_id == 2));
    }

    #[test]
    fn overlapping_visits_form_sorted_permutation() {
        let params = defaults();
        let c = generate_corpus(8, 20, &params).unwrap();
        let plan: Vec<PlannedVisit> = (0..50)
            .map(|i| PlannedVisit {
                page_id: i % 20,
                start_time: f64::from(i) * 0.3,
            })
            .collect();
        let s = interleave_sessions(&c, &plan, 2, &params).unwrap();
        assert!(s.packets.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        let mut union: Vec<u64> = Vec::new();
        for (v, visit) in plan.iter().enumerate() {
            let seed_v = seed::derive_indexed(2, "visit", v as u64);
            let page = &c.pages[visit.page_id as usize];
            union.extend(
                render_visit(page, seed_v, visit.start_time, &params)
                    .iter()
                    .map(|p| make_uid(v as u32, p.packet_uid as u32)),
            );
        }
        let mut got: Vec<u64> = s.packets.iter().map(|p| p.packet_uid).collect();
        union.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, union);
    }

    #[test]
    fn unknown_page_in_plan() {
        let params = defaults();
        let c = generate_corpus(4, 2, &params).unwrap();
        let plan = [PlannedVisit {
            page_id: 9,
            start_time: 0.0,
        }];
        assert!(matches!(
            interleave_sessions(&c, &plan, 0, &params),
            Err(TrafficError::UnknownPage(9))
        ));
    }

    #[test]
    fn corpus_and_session_files_round_trip() {
        let params = defaults();
        let c = generate_corpus(12, 6, &params).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        assert_eq!(read_corpus(buf.as_slice()).unwrap(), c);

        let plan = standard_visit_plan(&c, 2, 20.0, 3);
        let s = interleave_sessions(&c, &plan, 3, &params).unwrap();
        let mut buf = Vec::new();
        write_session(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "packet_uid,page_id,object_id,kind,bytes,class,suspicious,loggable,constant,arrival_time\n"
        ));
        assert_eq!(read_session(buf.as_slice()).unwrap(), s);
    }
}

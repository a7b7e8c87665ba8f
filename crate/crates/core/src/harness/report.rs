//! CSV tables and the plain-text summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::{io_err, write_json, HarnessError, MetricsReport};

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(io_err("report"))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Stage {
            stage: "report",
            cause: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err("report"))
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    value: f64,
}

fn rows(r: &MetricsReport) -> Vec<MetricRow<'static>> {
    [
        ("page_accuracy", r.page_accuracy),
        ("page_recall", r.page_recall),
        ("packet_accuracy", r.packet_accuracy),
        ("packet_recall", r.packet_recall),
        ("bandwidth_overhead", r.bandwidth_overhead),
        ("cycles_per_packet", r.cycles_per_packet),
        ("packets_per_second", r.packets_per_second),
        ("detections", r.detections as f64),
        ("tracked_visits", r.tracked_visits as f64),
        ("profiled_pages", r.profiled_pages as f64),
        ("stream_packets", r.stream_packets as f64),
        ("unattributable_units", r.unattributable_units as f64),
        ("rejected_batches", r.rejected_batches as f64),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow { metric, value })
    .collect()
}

pub fn summary_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let flag = |name: &str| if r.undefined.iter().any(|u| u == name) { " (no denominator)" } else { "" };
    let _ = writeln!(s, "page accuracy     {:.4}{}", r.page_accuracy, flag("page_accuracy"));
    let _ = writeln!(s, "page recall       {:.4}{}", r.page_recall, flag("page_recall"));
    let _ = writeln!(s, "packet accuracy   {:.4}{}", r.packet_accuracy, flag("packet_accuracy"));
    let _ = writeln!(s, "packet recall     {:.4}{}", r.packet_recall, flag("packet_recall"));
    let _ = writeln!(s, "bandwidth overhead {:.4}", r.bandwidth_overhead);
    let _ = writeln!(
        s,
        "throughput        {:.1} cycles/packet, {:.0} packets/s simulated",
        r.cycles_per_packet, r.packets_per_second
    );
    let _ = writeln!(
        s,
        "detections {} over {} tracked visits; {} pages profiled, {} untrackable",
        r.detections,
        r.tracked_visits,
        r.profiled_pages,
        r.untrackable_pages.len()
    );
    let _ = writeln!(
        s,
        "stream {} packets, {} unattributable units, {} rejected batches",
        r.stream_packets, r.unattributable_units, r.rejected_batches
    );
    if r.classifiers_unconverged > 0 {
        let _ = writeln!(
            s,
            "{} of {} classifiers did not converge",
            r.classifiers_unconverged, r.classifiers_trained
        );
    }
    if r.candidate_cap_hits > 0 {
        let _ = writeln!(s, "candidate cap reached in {} detections", r.candidate_cap_hits);
    }
    s
}

/// `metrics.json`, `metrics.csv` and `summary.txt` under `out`.
pub fn write_report(r: &MetricsReport, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(io_err("report"))?;
    write_json(r, &out.join("metrics.json"), "report")?;
    write_csv(&rows(r), &out.join("metrics.csv"))?;
    fs::write(out.join("summary.txt"), summary_text(r)).map_err(io_err("report"))
}

//! Timing deviation between an original trace and a replay capture.
//!
//! A packet's deviation is `expected − recorded`, where the expected time
//! is the sync epoch plus the connection offset plus the packet's original
//! distance from the connection's first packet. Negative means late.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{capture_path, RunRecord, SPLIT_DIR};
use crate::packet::{PacketRecord, TcpFlags};
use crate::pcap::{self, Trace};
use crate::replay::apply_policy;
use crate::splitter::{load_connection, ConnectionTrace};

pub const DEVIATIONS_CSV: &str = "deviations.csv";
pub const CONNECTIONS_CSV: &str = "connections.csv";
pub const BUCKETS_CSV: &str = "buckets.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("no deviations to summarize")]
    Empty,
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("bad run directory: {0}")]
    BadRun(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PacketDirection {
    /// Initiator to responder.
    #[serde(rename = "i2r")]
    Forward,
    /// Responder to initiator.
    #[serde(rename = "r2i")]
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketDeviation {
    pub connection_id: u32,
    /// Index of the packet in the original connection.
    pub packet_index: usize,
    pub direction: PacketDirection,
    pub expected_us: u64,
    pub recorded_us: u64,
    pub deviation_us: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissingPacket {
    pub connection_id: u32,
    pub packet_index: usize,
    pub direction: PacketDirection,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Alignment {
    pub deviations: Vec<PacketDeviation>,
    pub missing: Vec<MissingPacket>,
    /// Captured packets beyond the original count of their direction.
    pub extra: usize,
}

/// Direction of each captured packet. Endpoints are told apart by
/// address; when both ends share one address, by which side's sequence
/// space the packet's sequence number lies closer to.
fn captured_directions(packets: &[&PacketRecord]) -> Vec<PacketDirection> {
    let Some(syn) = packets.iter().find(|p| p.flags.is_initial_syn()).or(packets.first()) else {
        return Vec::new();
    };
    let initiator_ip: Ipv4Addr = syn.src_ip;
    if packets.iter().any(|p| p.src_ip != p.dst_ip) {
        return packets
            .iter()
            .map(|p| {
                if p.src_ip == initiator_ip {
                    PacketDirection::Forward
                } else {
                    PacketDirection::Reverse
                }
            })
            .collect();
    }
    let init_isn = syn.seq;
    let resp_isn = packets
        .iter()
        .find(|p| p.flags.contains(TcpFlags::SYN) && p.flags.contains(TcpFlags::ACK))
        .map(|p| p.seq);
    packets
        .iter()
        .map(|p| match resp_isn {
            Some(r) if p.seq.wrapping_sub(r) < p.seq.wrapping_sub(init_isn) => PacketDirection::Reverse,
            _ => PacketDirection::Forward,
        })
        .collect()
}

/// Match captured packets to the original connection by direction and
/// per-direction index, and compute deviations.
pub fn align(original: &ConnectionTrace, captured: &Trace, sync_epoch_us: u64) -> Alignment {
    let id = original.stream_index;
    let t0 = original.first_ts();
    let base = sync_epoch_us + original.offset_us;
    let port = original.replay_port;

    let mut orig: BTreeMap<PacketDirection, Vec<(usize, u64)>> = BTreeMap::new();
    for (i, p) in original.packets.iter().enumerate() {
        let dir = if original.is_from_initiator(p) {
            PacketDirection::Forward
        } else {
            PacketDirection::Reverse
        };
        orig.entry(dir).or_default().push((i, base + p.ts_us.saturating_sub(t0)));
    }

    let mine: Vec<&PacketRecord> = captured
        .packets
        .iter()
        .filter(|p| p.src_port == port || p.dst_port == port)
        .collect();
    let mut seen: BTreeMap<PacketDirection, Vec<u64>> = BTreeMap::new();
    for (p, dir) in mine.iter().zip(captured_directions(&mine)) {
        seen.entry(dir).or_default().push(p.ts_us);
    }

    let mut out = Alignment::default();
    for dir in [PacketDirection::Forward, PacketDirection::Reverse] {
        let expected = orig.remove(&dir).unwrap_or_default();
        let recorded = seen.remove(&dir).unwrap_or_default();
        out.extra += recorded.len().saturating_sub(expected.len());
        for (k, (packet_index, expected_us)) in expected.into_iter().enumerate() {
            match recorded.get(k) {
                Some(&recorded_us) => out.deviations.push(PacketDeviation {
                    connection_id: id,
                    packet_index,
                    direction: dir,
                    expected_us,
                    recorded_us,
                    deviation_us: expected_us as i64 - recorded_us as i64,
                }),
                None => out.missing.push(MissingPacket {
                    connection_id: id,
                    packet_index,
                    direction: dir,
                }),
            }
        }
    }
    out.deviations.sort_by_key(|d| d.packet_index);
    out.missing.sort_by_key(|m| m.packet_index);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionStats {
    pub packet_count: usize,
    /// Latest packet (most negative deviation).
    pub min_us: i64,
    /// Earliest packet.
    pub max_us: i64,
    pub mean_us: f64,
    /// Lower middle element for even counts.
    pub median_us: i64,
    /// Population standard deviation.
    pub stddev_us: f64,
}

pub fn connection_stats(devs: &[i64]) -> Result<ConnectionStats, AnalyzerError> {
    if devs.is_empty() {
        return Err(AnalyzerError::Empty);
    }
    let mut sorted = devs.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mean = sorted.iter().map(|&v| v as i128).sum::<i128>() as f64 / n as f64;
    let var = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(ConnectionStats {
        packet_count: n,
        min_us: sorted[0],
        max_us: sorted[n - 1],
        mean_us: mean,
        median_us: sorted[(n - 1) / 2],
        stddev_us: var.sqrt(),
    })
}

pub const METRICS: [&str; 5] = ["min", "max", "mean", "median", "stddev"];

/// One value per metric, in [`METRICS`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSet(pub [f64; 5]);

impl MetricSet {
    pub fn of(s: &ConnectionStats) -> Self {
        MetricSet([
            s.min_us as f64,
            s.max_us as f64,
            s.mean_us,
            s.median_us as f64,
            s.stddev_us,
        ])
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        METRICS.iter().position(|m| *m == metric).map(|i| self.0[i])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Lower-middle median of values already sorted.
fn median_sorted(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn column(stats: &[&ConnectionStats], i: usize) -> Vec<f64> {
    sorted(stats.iter().map(|s| MetricSet::of(s).0[i]).collect())
}

fn aggregate_sets(stats: &[&ConnectionStats]) -> (MetricSet, MetricSet) {
    let mut by_mean = MetricSet::default();
    let mut by_median = MetricSet::default();
    for i in 0..METRICS.len() {
        let col = column(stats, i);
        by_mean.0[i] = mean(&col);
        by_median.0[i] = median_sorted(&col);
    }
    (by_mean, by_median)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outlier {
    pub metric: &'static str,
    pub connection_id: u32,
    pub value_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Per metric, every connection's value in ascending order.
    pub series: BTreeMap<&'static str, Vec<f64>>,
    pub overall_mean: MetricSet,
    pub overall_median: MetricSet,
    /// Values beyond three interquartile ranges outside the quartiles.
    pub outliers: Vec<Outlier>,
}

pub fn aggregate(all: &[(u32, ConnectionStats)]) -> Result<Aggregate, AnalyzerError> {
    if all.is_empty() {
        return Err(AnalyzerError::Empty);
    }
    let refs: Vec<&ConnectionStats> = all.iter().map(|(_, s)| s).collect();
    let (overall_mean, overall_median) = aggregate_sets(&refs);
    let mut series = BTreeMap::new();
    let mut outliers = Vec::new();
    for (i, metric) in METRICS.iter().enumerate() {
        let col = column(&refs, i);
        let q = |f: f64| col[((col.len() - 1) as f64 * f).round() as usize];
        let (q1, q3) = (q(0.25), q(0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 3.0 * iqr, q3 + 3.0 * iqr);
        for (id, s) in all {
            let v = MetricSet::of(s).0[i];
            if v < lo || v > hi {
                outliers.push(Outlier {
                    metric,
                    connection_id: *id,
                    value_us: v,
                });
            }
        }
        series.insert(*metric, col);
    }
    Ok(Aggregate {
        series,
        overall_mean,
        overall_median,
        outliers,
    })
}

pub const BUCKETS: [&str; 4] = ["3-10", "11-50", "51-100", ">100"];

/// Bucket label for a connection of `packets` packets.
pub fn bucket_of(packets: usize) -> &'static str {
    match packets {
        0..=10 => BUCKETS[0],
        11..=50 => BUCKETS[1],
        51..=100 => BUCKETS[2],
        _ => BUCKETS[3],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStats {
    pub label: &'static str,
    pub count: usize,
    pub by_mean: MetricSet,
    pub by_median: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BucketReport {
    pub buckets: Vec<BucketStats>,
    /// Labels of buckets that had no connections.
    pub empty: Vec<&'static str>,
}

/// Group connections by original packet count; `all` holds
/// (packet count, stats) pairs.
pub fn bucket_by_length(all: &[(usize, ConnectionStats)]) -> BucketReport {
    let mut report = BucketReport::default();
    for label in BUCKETS {
        let members: Vec<&ConnectionStats> = all.iter().filter(|(n, _)| bucket_of(*n) == label).map(|(_, s)| s).collect();
        if members.is_empty() {
            report.empty.push(label);
            continue;
        }
        let (by_mean, by_median) = aggregate_sets(&members);
        report.buckets.push(BucketStats {
            label,
            count: members.len(),
            by_mean,
            by_median,
        });
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionReport {
    pub connection_id: u32,
    /// Packets in the original connection.
    pub packets: usize,
    pub alignment: Alignment,
    pub stats: Option<ConnectionStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub connections: Vec<ConnectionReport>,
    pub aggregate: Option<Aggregate>,
    pub buckets: BucketReport,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn missing_count(&self) -> usize {
        self.connections.iter().map(|c| c.alignment.missing.len()).sum()
    }

    pub fn deviations(&self) -> impl Iterator<Item = &PacketDeviation> {
        self.connections.iter().flat_map(|c| c.alignment.deviations.iter())
    }
}

/// Analyze (original connection, capture holding it) pairs.
pub fn analyze(pairs: &[(ConnectionTrace, &Trace)], sync_epoch_us: u64) -> Report {
    let mut connections = Vec::new();
    let mut warnings = Vec::new();
    for (original, captured) in pairs {
        let alignment = align(original, captured, sync_epoch_us);
        let id = original.stream_index;
        if !alignment.missing.is_empty() {
            warnings.push(format!("connection {id}: {} packets missing from capture", alignment.missing.len()));
        }
        if alignment.extra > 0 {
            warnings.push(format!("connection {id}: {} unmatched extra packets in capture", alignment.extra));
        }
        let devs: Vec<i64> = alignment.deviations.iter().map(|d| d.deviation_us).collect();
        connections.push(ConnectionReport {
            connection_id: id,
            packets: original.packets.len(),
            stats: connection_stats(&devs).ok(),
            alignment,
        });
    }
    connections.sort_by_key(|c| c.connection_id);
    let with_stats: Vec<(u32, ConnectionStats)> = connections
        .iter()
        .filter_map(|c| c.stats.map(|s| (c.connection_id, s)))
        .collect();
    let sized: Vec<(usize, ConnectionStats)> = connections
        .iter()
        .filter_map(|c| c.stats.map(|s| (c.packets, s)))
        .collect();
    Report {
        aggregate: aggregate(&with_stats).ok(),
        buckets: bucket_by_length(&sized),
        connections,
        warnings,
    }
}

/// Analyze a run directory: each connection is compared against the
/// capture of the node that initiated it.
pub fn analyze_run_dir(run_dir: &Path) -> Result<Report, AnalyzerError> {
    if !run_dir.join(crate::orchestrator::RUN_FILE).is_file() {
        return Err(AnalyzerError::MissingInput(format!("{} has no run record", run_dir.display())));
    }
    let record = RunRecord::load(run_dir).map_err(|e| AnalyzerError::BadRun(e.to_string()))?;
    let mut captures: BTreeMap<String, Trace> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    for c in &record.connections {
        let node = &c.initiator_node;
        if !captures.contains_key(node) {
            let path = capture_path(run_dir, node);
            if !path.is_file() {
                return Err(AnalyzerError::MissingInput(format!("capture {}", path.display())));
            }
            let trace = pcap::read_pcap(&path).unwrap_or_else(|e| {
                warnings.push(format!("capture of {node} unreadable ({e}); treated as empty"));
                Trace::empty(crate::packet::LinkType::Ethernet)
            });
            captures.insert(node.clone(), trace);
        }
        let file = run_dir.join(SPLIT_DIR).join(node).join(&c.name);
        let original =
            load_connection(&file).map_err(|e| AnalyzerError::MissingInput(format!("{}: {e}", file.display())))?;
        pairs.push((apply_policy(&original, record.manifest.duplicate_policy), node.clone()));
    }
    let pairs: Vec<(ConnectionTrace, &Trace)> = pairs.into_iter().map(|(c, n)| (c, &captures[&n])).collect();
    let mut report = analyze(&pairs, record.sync_epoch_us);
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub connection_id: u32,
    pub packet_index: usize,
    pub direction: PacketDirection,
    pub expected_us: u64,
    pub recorded_us: u64,
    pub deviation_us: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionRow {
    pub connection_id: u32,
    pub packets: usize,
    pub min_us: Option<i64>,
    pub max_us: Option<i64>,
    pub mean_us: Option<i64>,
    pub median_us: Option<i64>,
    pub stddev_us: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub agg_kind: String,
    pub metric: String,
    pub value_us: i64,
    pub count: usize,
}

/// The three CSV tables, with values rounded to whole microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvTables {
    pub deviations: Vec<DeviationRow>,
    pub connections: Vec<ConnectionRow>,
    pub buckets: Vec<BucketRow>,
}

const DEVIATION_HEADER: [&str; 6] = ["connection_id", "packet_index", "direction", "expected_us", "recorded_us", "deviation_us"];
const CONNECTION_HEADER: [&str; 7] = ["connection_id", "packets", "min_us", "max_us", "mean_us", "median_us", "stddev_us"];
const BUCKET_HEADER: [&str; 5] = ["bucket", "agg_kind", "metric", "value_us", "count"];

impl Report {
    pub fn tables(&self) -> CsvTables {
        let deviations = self
            .deviations()
            .map(|d| DeviationRow {
                connection_id: d.connection_id,
                packet_index: d.packet_index,
                direction: d.direction,
                expected_us: d.expected_us,
                recorded_us: d.recorded_us,
                deviation_us: d.deviation_us,
            })
            .collect();
        let connections = self
            .connections
            .iter()
            .map(|c| ConnectionRow {
                connection_id: c.connection_id,
                packets: c.packets,
                min_us: c.stats.map(|s| s.min_us),
                max_us: c.stats.map(|s| s.max_us),
                mean_us: c.stats.map(|s| s.mean_us.round() as i64),
                median_us: c.stats.map(|s| s.median_us),
                stddev_us: c.stats.map(|s| s.stddev_us.round() as i64),
            })
            .collect();
        let mut buckets = Vec::new();
        for b in &self.buckets.buckets {
            for (kind, set) in [("mean", &b.by_mean), ("median", &b.by_median)] {
                for (i, metric) in METRICS.iter().enumerate() {
                    buckets.push(BucketRow {
                        bucket: b.label.to_string(),
                        agg_kind: kind.to_string(),
                        metric: metric.to_string(),
                        value_us: set.0[i].round() as i64,
                        count: b.count,
                    });
                }
            }
        }
        CsvTables {
            deviations,
            connections,
            buckets,
        }
    }
}

fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), AnalyzerError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnalyzerError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Write `deviations.csv`, `connections.csv` and `buckets.csv` into `dir`.
pub fn emit_csv(report: &Report, dir: &Path) -> Result<(), AnalyzerError> {
    fs::create_dir_all(dir)?;
    let t = report.tables();
    write_table(&dir.join(DEVIATIONS_CSV), &DEVIATION_HEADER, &t.deviations)?;
    write_table(&dir.join(CONNECTIONS_CSV), &CONNECTION_HEADER, &t.connections)?;
    write_table(&dir.join(BUCKETS_CSV), &BUCKET_HEADER, &t.buckets)?;
    Ok(())
}

pub fn parse_csv(dir: &Path) -> Result<CsvTables, AnalyzerError> {
    Ok(CsvTables {
        deviations: read_table(&dir.join(DEVIATIONS_CSV))?,
        connections: read_table(&dir.join(CONNECTIONS_CSV))?,
        buckets: read_table(&dir.join(BUCKETS_CSV))?,
    })
}

fn ms(us: f64) -> String {
    format!("{:.3} ms", us / 1000.0)
}

/// Human-readable summary; deviations in milliseconds, outliers in seconds.
pub fn summary_text(report: &Report) -> String {
    let mut s = String::new();
    let analyzed = report.connections.iter().filter(|c| c.stats.is_some()).count();
    let _ = writeln!(s, "connections: {} ({} with deviations)", report.connections.len(), analyzed);
    let _ = writeln!(s, "packets aligned: {}", report.deviations().count());
    let _ = writeln!(s, "packets missing: {}", report.missing_count());
    match &report.aggregate {
        Some(a) => {
            let _ = writeln!(
                s,
                "overall median deviation: {} (mean {})",
                ms(a.overall_median.0[3]),
                ms(a.overall_mean.0[2])
            );
            let _ = writeln!(s, "series: per-metric values sorted ascending across connections");
            for (i, m) in METRICS.iter().enumerate() {
                let _ = writeln!(s, "  {m:<6} median {:>12}  mean {:>12}", ms(a.overall_median.0[i]), ms(a.overall_mean.0[i]));
            }
            for o in &a.outliers {
                let _ = writeln!(s, "outlier: {} connection {}: {:.3} s", o.metric, o.connection_id, o.value_us / 1e6);
            }
        }
        None => {
            let _ = writeln!(s, "overall median deviation: n/a");
        }
    }
    for b in &report.buckets.buckets {
        let _ = writeln!(
            s,
            "bucket {:<7} n={:<5} median of medians {}",
            b.label,
            b.count,
            ms(b.by_median.0[3])
        );
    }
    for label in &report.buckets.empty {
        let _ = writeln!(s, "bucket {label:<7} n=0");
    }
    let _ = writeln!(s, "warnings: {}", report.warnings.len());
    for w in &report.warnings {
        let _ = writeln!(s, "  {w}");
    }
    s
}

/// Emit the CSVs and `summary.txt` into `dir`.
pub fn write_reports(report: &Report, dir: &Path) -> Result<(), AnalyzerError> {
    emit_csv(report, dir)?;
    fs::write(dir.join(SUMMARY_TXT), summary_text(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_three() {
        let s = connection_stats(&[-1000, -3000, -2000]).unwrap();
        assert_eq!((s.min_us, s.max_us, s.median_us), (-3000, -1000, -2000));
        assert_eq!(s.mean_us, -2000.0);
        assert!(matches!(connection_stats(&[]), Err(AnalyzerError::Empty)));
    }

    #[test]
    fn single_value_stats() {
        let s = connection_stats(&[42]).unwrap();
        assert_eq!((s.min_us, s.max_us, s.median_us, s.mean_us, s.stddev_us), (42, 42, 42, 42.0, 0.0));
    }

    #[test]
    fn lower_middle_median() {
        assert_eq!(connection_stats(&[4, 1, 3, 2]).unwrap().median_us, 2);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(
            [3, 10, 11, 50, 51, 100, 101].map(bucket_of),
            ["3-10", "3-10", "11-50", "11-50", "51-100", "51-100", ">100"]
        );
        let st = connection_stats(&[0]).unwrap();
        let r = bucket_by_length(&[(3, st), (40, st), (60, st), (150, st)]);
        assert_eq!(r.buckets.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1, 1]);
        let r = bucket_by_length(&[(3, st)]);
        assert_eq!(r.empty, vec!["11-50", "51-100", ">100"]);
    }
}

use std::path::{Path, PathBuf};

use meshplay::analyzer::{self, PacketDirection};
use meshplay::harness::LinkParams;
use meshplay::orchestrator::{self, RunConfig, RunRecord};
use meshplay::pcap::{self, Trace};
use meshplay::replay::DuplicatePolicy;
use meshplay::splitter::HostMapping;
use meshplay::synth;

fn write_input(dir: &Path, name: &str, trace: &Trace) -> PathBuf {
    let p = dir.join(name);
    pcap::write_pcap(trace, &p).unwrap();
    p
}

fn simulate(trace: &Trace, mapping: &HostMapping, cfg: RunConfig) -> (tempfile::TempDir, RunRecord) {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path(), "lab.pcap", trace);
    let run = dir.path().join("run");
    let record = orchestrator::simulate(&input, mapping, &cfg, &run).unwrap();
    (dir, record)
}

#[test]
fn handshake_completes_on_both_nodes() {
    let (dir, record) = simulate(&synth::handshake_trace(), &synth::two_node_mapping(), RunConfig::default());
    assert!(record.all_completed(), "{record:#?}");
    assert_eq!(record.connections.len(), 1);
    let c = &record.connections[0];
    assert_eq!(c.outcomes.len(), 2);
    let sent: u32 = c.outcomes.iter().map(|o| o.sent).sum();
    assert_eq!(sent, 3);

    let run = dir.path().join("run");
    let report = analyzer::analyze_run_dir(&run).unwrap();
    assert!(report.deviations().all(|d| d.deviation_us == 0));
    assert_eq!(report.deviations().count(), 3);
    // Initiator capture holds the whole handshake.
    let cap = pcap::read_pcap(orchestrator::capture_path(&run, "a")).unwrap();
    assert_eq!(cap.len(), 3);
}

#[test]
fn delayed_link_shifts_remote_packets() {
    let cfg = RunConfig {
        link: LinkParams {
            one_way_delay_us: 5_000,
            ..Default::default()
        },
        ..Default::default()
    };
    let (dir, record) = simulate(&synth::handshake_trace(), &synth::two_node_mapping(), cfg);
    assert!(record.all_completed());
    let report = analyzer::analyze_run_dir(&dir.path().join("run")).unwrap();
    for d in report.deviations() {
        let want = match d.direction {
            PacketDirection::Forward => 0,
            PacketDirection::Reverse => -5_000,
        };
        assert_eq!(d.deviation_us, want, "{d:?}");
    }
}

#[test]
fn retransmission_needs_duplicate_filter() {
    let trace = synth::retransmission_trace();
    let (_d, strict) = simulate(&trace, &synth::two_node_mapping(), RunConfig::default());
    assert!(!strict.all_completed());
    let cfg = RunConfig {
        duplicate_policy: DuplicatePolicy::DropScheduledDuplicates,
        ..Default::default()
    };
    let (_d, dropped) = simulate(&trace, &synth::two_node_mapping(), cfg);
    assert!(dropped.all_completed(), "{dropped:#?}");
}

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::thread;

use meshplay::clock::{Clock, SystemClock};
use meshplay::harness::{capture, DatagramHub, LinkParams, Simulation, TapFilter, DEFAULT_MTU};
use meshplay::packet::{LinkType, PacketRecord, TcpFlags};
use meshplay::pcap::Trace;
use meshplay::replay::{run_connection, ReplayConfig, ReplayEngine, ReplayOutcome, ReplayStatus};
use meshplay::schedule::{build_schedule, Direction, Schedule};
use meshplay::splitter::{assign_ports, compute_offsets, extract_flows, filter_handshakes, ConnectionTrace};
use meshplay::synth::{self, ConnectionBuilder};
use proptest::prelude::*;

const START: u64 = 1_700_000_000_000_000;

fn a() -> Ipv4Addr {
    Ipv4Addr::new(10, 200, 0, 1)
}

fn b() -> Ipv4Addr {
    Ipv4Addr::new(10, 200, 0, 2)
}

fn connections(trace: &Trace, base_port: u16) -> Vec<ConnectionTrace> {
    compute_offsets(assign_ports(filter_handshakes(extract_flows(trace, "t")).kept, base_port).unwrap())
}

fn frame(i: u32) -> Vec<u8> {
    PacketRecord::synthesize(
        LinkType::Ethernet,
        0,
        (a(), 20000),
        (b(), 20000),
        i,
        0,
        TcpFlags::ACK,
        i.to_be_bytes().to_vec(),
    )
    .to_frame()
}

fn seq_of(frame: &[u8]) -> u32 {
    PacketRecord::from_frame(LinkType::Ethernet, 0, frame).unwrap().seq
}

/// Send `n` frames from one end, 1 ms apart, and return what arrived.
fn blast(params: LinkParams, n: u32) -> Vec<(u64, Vec<u8>)> {
    let mut sim = Simulation::new(START, LinkType::Ethernet);
    let (x, y) = sim.simulated_link(params).unwrap();
    for i in 0..n {
        sim.run_until(START + u64::from(i) * 1_000);
        sim.send(x, frame(i)).unwrap();
    }
    sim.run();
    sim.take_inbox(y)
}

#[test]
fn fixed_delay_is_exact_for_every_packet() {
    let got = blast(
        LinkParams {
            one_way_delay_us: 5_000,
            ..Default::default()
        },
        1000,
    );
    assert_eq!(got.len(), 1000);
    for (i, (ts, f)) in got.iter().enumerate() {
        assert_eq!(seq_of(f), i as u32);
        assert_eq!(*ts, START + i as u64 * 1_000 + 5_000);
    }
}

#[test]
fn impaired_link_is_deterministic_per_seed() {
    let params = LinkParams {
        one_way_delay_us: 2_000,
        jitter_us: 4_000,
        loss_prob: 0.1,
        duplicate_prob: 0.1,
        reorder: true,
        seed: 11,
    };
    let first = blast(params, 500);
    assert_eq!(first, blast(params, 500));
    assert_ne!(first, blast(LinkParams { seed: 12, ..params }, 500));
}

#[test]
fn without_reordering_arrivals_keep_send_order() {
    let got = blast(
        LinkParams {
            jitter_us: 20_000,
            reorder: false,
            seed: 5,
            ..Default::default()
        },
        500,
    );
    let seqs: Vec<u32> = got.iter().map(|(_, f)| seq_of(f)).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    assert!(got.windows(2).all(|w| w[0].0 <= w[1].0));

    let reordered = blast(
        LinkParams {
            jitter_us: 20_000,
            reorder: true,
            seed: 5,
            ..Default::default()
        },
        500,
    );
    assert!(reordered.windows(2).any(|w| seq_of(&w[0].1) > seq_of(&w[1].1)));
}

#[test]
fn loss_and_duplication_rates_are_plausible() {
    let n = 4000;
    let lost = n as usize
        - blast(
            LinkParams {
                loss_prob: 0.25,
                seed: 3,
                ..Default::default()
            },
            n,
        )
        .len();
    let dup = blast(
        LinkParams {
            duplicate_prob: 0.25,
            seed: 3,
            ..Default::default()
        },
        n,
    )
    .len()
        - n as usize;
    // Binomial(4000, 0.25): sd is about 27.
    assert!((850..=1150).contains(&lost), "lost {lost}");
    assert!((850..=1150).contains(&dup), "duplicated {dup}");
}

struct PairRun {
    init: ReplayOutcome,
    resp: ReplayOutcome,
    init_schedule: Schedule,
    resp_schedule: Schedule,
    captured: Trace,
}

/// Run both sides of `c` over one simulated link.
fn replay_pair(c: &ConnectionTrace, params: LinkParams) -> PairRun {
    let mut sim = Simulation::new(START, c.link_type);
    let (x, y) = sim.simulated_link(params).unwrap();
    let tap = sim.add_tap(&[x], TapFilter::All);
    let cfg = ReplayConfig::default();
    let init = sim
        .add_engine(x, ReplayEngine::new(build_schedule(c, true, a(), b(), START, 1), cfg))
        .unwrap();
    let resp = sim
        .add_engine(y, ReplayEngine::new(build_schedule(c, false, b(), a(), START, 2), cfg))
        .unwrap();
    sim.run();
    PairRun {
        init: sim.outcome(init),
        resp: sim.outcome(resp),
        init_schedule: sim.engine(init).schedule().clone(),
        resp_schedule: sim.engine(resp).schedule().clone(),
        captured: sim.capture(tap),
    }
}

fn exchange(n: usize) -> ConnectionTrace {
    let t = Trace::new(
        LinkType::Ethernet,
        ConnectionBuilder::new((synth::client_ip(), 4000), (synth::server_ip(), 80), synth::BASE_TS_US)
            .gaps(20_000, 500)
            .handshake()
            .exchange(n)
            .close()
            .packets(),
    );
    connections(&t, 20000).remove(0)
}

#[test]
fn duplicated_frames_are_classified_not_fatal() {
    let run = replay_pair(
        &exchange(30),
        LinkParams {
            one_way_delay_us: 1_000,
            duplicate_prob: 0.3,
            seed: 8,
            ..Default::default()
        },
    );
    assert_eq!(run.init.status, ReplayStatus::Completed);
    assert_eq!(run.resp.status, ReplayStatus::Completed);
    let dups = run.init.duplicate_count + run.resp.duplicate_count;
    assert!(dups > 0);
    assert_eq!(run.init.unexpected_count + run.resp.unexpected_count, 0);
    // The capture sees each duplicate as an extra frame.
    assert!(run.captured.len() > 36);
}

#[test]
fn lost_packet_times_out_the_waiting_side() {
    let run = replay_pair(
        &exchange(6),
        LinkParams {
            loss_prob: 0.5,
            seed: 2,
            ..Default::default()
        },
    );
    assert!(run.init.status == ReplayStatus::TimedOut || run.resp.status == ReplayStatus::TimedOut);
}

fn check_no_early_sends(outcome: &ReplayOutcome, schedule: &Schedule) -> Result<(), TestCaseError> {
    for ev in outcome.events.iter().filter(|e| e.direction == Direction::Local) {
        let due = schedule.start_epoch_us + schedule.entries()[ev.entry].due_us;
        prop_assert!(ev.ts_us >= due, "entry {} sent at {} before due {}", ev.entry, ev.ts_us, due);
        prop_assert_eq!(ev.late_us, ev.ts_us - due);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sends_never_precede_their_due_time(
        n in 0usize..40,
        delay in 0u64..60_000,
        jitter in 0u64..10_000,
        seed in any::<u64>(),
    ) {
        let params = LinkParams { one_way_delay_us: delay, jitter_us: jitter, seed, ..Default::default() };
        let run = replay_pair(&exchange(n), params);
        prop_assert_eq!(&run.init.status, &ReplayStatus::Completed);
        prop_assert_eq!(&run.resp.status, &ReplayStatus::Completed);
        check_no_early_sends(&run.init, &run.init_schedule)?;
        check_no_early_sends(&run.resp, &run.resp_schedule)?;
    }
}

fn hub(clock: &Arc<SystemClock>) -> DatagramHub {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    DatagramHub::bind(addr, LinkType::Ethernet, DEFAULT_MTU, clock.clone()).unwrap()
}

#[test]
fn datagram_replay_over_loopback_udp() {
    let clock = Arc::new(SystemClock::new());
    let trace = synth::offsets_trace(&[0, 20_000]);
    let conns = connections(&trace, 24000);
    let (ha, hb) = (hub(&clock), hub(&clock));
    let tap = ha.add_tap(TapFilter::All);
    let start = clock.now_us() + 100_000;

    let mut workers = Vec::new();
    for c in &conns {
        for initiator in [true, false] {
            let (me, peer) = if initiator { (&ha, &hb) } else { (&hb, &ha) };
            let mut port = me.connect(c.replay_port, peer.local_addr().unwrap()).unwrap();
            let (l, r) = if initiator { (a(), b()) } else { (b(), a()) };
            let schedule = build_schedule(c, initiator, l, r, start + c.offset_us, 9);
            let clock = clock.clone();
            workers.push(thread::spawn(move || {
                run_connection(schedule, &mut port, clock.as_ref(), ReplayConfig::default())
            }));
        }
    }
    for w in workers {
        let out = w.join().unwrap();
        assert_eq!(out.status, ReplayStatus::Completed, "{out:?}");
        assert_eq!(out.unexpected_count, 0);
    }
    let packets: usize = conns.iter().map(ConnectionTrace::len).sum();
    let captured = capture(&ha.tap(tap));
    assert_eq!(captured.len(), packets);
    // Frames reached the right connection by destination port.
    let ports: std::collections::BTreeSet<u16> = captured.packets.iter().map(|p| p.dst_port).collect();
    assert_eq!(ports.len(), conns.len());
    assert_eq!(ha.stats().unrouted + hb.stats().unrouted, 0);
    assert!(clock.now_us() >= start);
}

#[test]
fn frames_for_unknown_ports_are_counted() {
    let clock = Arc::new(SystemClock::new());
    let (ha, hb) = (hub(&clock), hub(&clock));
    let mut port = ha.connect(20000, hb.local_addr().unwrap()).unwrap();
    meshplay::harness::PacketTransport::send(&mut port, &frame(1)).unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(2);
    while hb.stats().unrouted == 0 && std::time::Instant::now() < deadline {
        thread::sleep(std::time::Duration::from_millis(5));
    }
    assert_eq!(hb.stats().unrouted, 1);
    assert_eq!(ha.stats().sent, 1);
}

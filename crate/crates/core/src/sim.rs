//! Scenario runner: drives emitters, edge buffers, links, connectors and
//! ingest on one simulated clock, then merges and writes the coverage report.
//!
//! Output layout under the run directory:
//!
//! ```text
//! scenario.json      the config that was run (seed override applied)
//! trace.ndjson       event trace
//! staging/           ingest store
//! devices/           edge buffer logs
//! connectors/        connector cursors
//! merged/            merged CSVs
//! coverage.json      coverage report
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::connectors::http::{serve as serve_cloud, HttpCloudClient, SharedCloud};
use crate::connectors::{event_from_sample, CloudKind, ConnectorConfig, ConnectorError, PollOutcome, Poller, ThirdPartyCloud};
use crate::edge::{route_watch_flush, EdgeBuffer, EdgeError, RouteDecision};
use crate::ingest::http::{serve as serve_ingest, HttpIngestClient};
use crate::ingest::{IngestError, IngestSink, StagingFilter, StagingStore, StoreMeta};
use crate::merger::{coverage_report, merge, write_merged, CoverageReport, MergeError, MergedSegmentFile};
use crate::model::{DeviceKind, SensorSample};
use crate::netsim::{link_transmit, stream_rng, Delivery, Emitter, EventQueue, EventTrace, LinkName, SimError, TraceEvent};
use crate::protocol::{Ack, BatchEnvelope};
use crate::scenario::{Fault, Scenario};
use crate::server::ServerHandle;

pub const SCENARIO_FILE: &str = "scenario.json";
pub const TRACE_FILE: &str = "trace.ndjson";
pub const STAGING_DIR: &str = "staging";
pub const DEVICES_DIR: &str = "devices";
pub const CONNECTORS_DIR: &str = "connectors";
pub const MERGED_DIR: &str = "merged";
pub const COVERAGE_FILE: &str = "coverage.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("emitter: {0}")]
    Emitter(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Devices and connectors call the ingest store directly.
    #[default]
    Inproc,
    /// Everything crosses loopback HTTP: ingest and both vendor clouds.
    Wire,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub mode: Mode,
    /// Ingest port in wire mode; 0 picks a free one.
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub emitted: usize,
    pub trace_events: usize,
    pub staged: usize,
    pub merged_files: usize,
    /// Clock at the last processed event.
    pub finished_ms: i64,
    /// Rows still buffered on edge devices or unfetched from clouds, by device.
    pub stranded: BTreeMap<String, usize>,
    pub report: CoverageReport,
}

enum Ev {
    Flush { p: usize, dev: DeviceKind },
    Poll { p: usize, cloud: usize },
    Deliver { p: usize, link: LinkName, from: DeviceKind, env: BatchEnvelope, ack_dropped: bool },
    AckArrive { p: usize, to: DeviceKind, ack: Ack },
}

struct Cloud {
    shared: SharedCloud,
    http: Option<(HttpCloudClient, ServerHandle)>,
    poller: Poller,
    state_path: PathBuf,
    cfg: ConnectorConfig,
    polls: u32,
}

struct Node {
    emitter: Emitter,
    phone: EdgeBuffer,
    watch: EdgeBuffer,
    phone_path: PathBuf,
    watch_path: PathBuf,
    rngs: BTreeMap<LinkName, ChaCha8Rng>,
    clouds: Vec<Cloud>,
    sends: BTreeMap<DeviceKind, u32>,
    acks: BTreeMap<DeviceKind, u32>,
    outstanding: BTreeMap<DeviceKind, BTreeSet<String>>,
}

impl Node {
    fn buffer(&mut self, kind: DeviceKind) -> &mut EdgeBuffer {
        match kind {
            DeviceKind::Watch => &mut self.watch,
            _ => &mut self.phone,
        }
    }
}

struct Sim<'a> {
    sc: &'a Scenario,
    q: EventQueue<Ev>,
    trace: EventTrace,
    nodes: Vec<Node>,
    sink: &'a dyn IngestSink,
    in_flight: usize,
    emitted: usize,
}

const LINKS: [LinkName; 3] = [LinkName::WanPhone, LinkName::WanWatch, LinkName::Ble];

fn remove_artifacts(out: &Path) -> Result<(), RunError> {
    for f in [SCENARIO_FILE, TRACE_FILE, COVERAGE_FILE] {
        let p = out.join(f);
        match fs::remove_file(&p) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&p)(e)),
        }
    }
    for d in [STAGING_DIR, DEVICES_DIR, CONNECTORS_DIR, MERGED_DIR] {
        let p = out.join(d);
        match fs::remove_dir_all(&p) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&p)(e)),
        }
    }
    Ok(())
}

/// Runs `sc` from scratch into `out`, replacing earlier run artifacts there.
pub fn run_scenario(sc: &Scenario, out: &Path, opts: RunOptions) -> Result<RunSummary, RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    remove_artifacts(out)?;
    let scenario_path = out.join(SCENARIO_FILE);
    fs::write(&scenario_path, sc.config.to_json_pretty() + "\n").map_err(io_err(&scenario_path))?;

    let store = Arc::new(StagingStore::open(&out.join(STAGING_DIR))?);
    store.write_meta(&StoreMeta { utc_offset_min: Some(sc.utc_offset_min) })?;
    let loopback = |port| SocketAddr::from((Ipv4Addr::LOCALHOST, port));
    let (server, client) = match opts.mode {
        Mode::Inproc => (None, None),
        Mode::Wire => {
            let addr = loopback(opts.port);
            let server = serve_ingest(addr, store.clone()).map_err(|source| RunError::Bind { addr, source })?;
            let client = HttpIngestClient::new(&server.base_url());
            (Some(server), Some(client))
        }
    };
    let sink: &dyn IngestSink = match &client {
        Some(c) => c,
        None => &*store,
    };

    let mut nodes = Vec::with_capacity(sc.participants.len());
    for p in &sc.participants {
        let emitter = Emitter::new(sc.seed, p.trace.clone(), p.policy.clone(), p.fence, p.gps_jitter_m).map_err(RunError::Emitter)?;
        let dev_dir = out.join(DEVICES_DIR);
        fs::create_dir_all(&dev_dir).map_err(io_err(&dev_dir))?;
        let phone_path = dev_dir.join(format!("{}.log", p.device(DeviceKind::Phone)));
        let watch_path = dev_dir.join(format!("{}.log", p.device(DeviceKind::Watch)));
        let (phone, _) = EdgeBuffer::open(p.device(DeviceKind::Phone), &phone_path)?;
        let (watch, _) = EdgeBuffer::open(p.device(DeviceKind::Watch), &watch_path)?;
        let rngs = LINKS.iter().map(|&l| (l, stream_rng(sc.seed, &format!("{}/{}", p.id, l.as_str())))).collect();
        let mut clouds = Vec::new();
        for kind in [CloudKind::Motion, CloudKind::Sleep] {
            let c = &sc.connectors;
            let mut tpc = ThirdPartyCloud::new(kind, c.token_ttl_ms);
            tpc.register_client(&c.client_id, &c.client_secret);
            let shared: SharedCloud = Arc::new(Mutex::new(tpc));
            let http = match opts.mode {
                Mode::Inproc => None,
                Mode::Wire => {
                    let addr = loopback(0);
                    let h = serve_cloud(addr, shared.clone()).map_err(|source| RunError::Bind { addr, source })?;
                    Some((HttpCloudClient::new(&h.base_url()), h))
                }
            };
            let cfg = ConnectorConfig { client_id: c.client_id.clone(), client_secret: c.client_secret.clone(), page_limit: c.page_limit };
            let device = p.device(kind.device_kind());
            let state_path = out.join(CONNECTORS_DIR).join(format!("{device}.json"));
            let poller = Poller::open(device, cfg.clone(), &state_path)?;
            clouds.push(Cloud { shared, http, poller, state_path, cfg, polls: 0 });
        }
        nodes.push(Node {
            emitter,
            phone,
            watch,
            phone_path,
            watch_path,
            rngs,
            clouds,
            sends: BTreeMap::new(),
            acks: BTreeMap::new(),
            outstanding: BTreeMap::new(),
        });
    }

    let mut sim = Sim { sc, q: EventQueue::new(sc.start_ms), trace: EventTrace::default(), nodes, sink, in_flight: 0, emitted: 0 };
    for (i, p) in sc.participants.iter().enumerate() {
        sim.q.schedule(sc.start_ms + i64::from(p.policy.phone_flush_period_s) * 1000, Ev::Flush { p: i, dev: DeviceKind::Phone })?;
        sim.q.schedule(sc.start_ms + i64::from(p.policy.watch_flush_period_s) * 1000, Ev::Flush { p: i, dev: DeviceKind::Watch })?;
        for c in 0..2 {
            sim.q.schedule(sc.start_ms + sc.connectors.poll_period_ms, Ev::Poll { p: i, cloud: c })?;
        }
    }
    sim.run()?;

    let trace_path = out.join(TRACE_FILE);
    fs::write(&trace_path, sim.trace.to_ndjson()).map_err(io_err(&trace_path))?;
    let mut stranded = BTreeMap::new();
    for n in &sim.nodes {
        for b in [&n.phone, &n.watch] {
            let mut by_origin: BTreeMap<String, usize> = BTreeMap::new();
            for s in b.rows() {
                *by_origin.entry(s.device.to_string()).or_default() += 1;
            }
            for (d, c) in by_origin {
                *stranded.entry(d).or_default() += c;
            }
        }
        for c in &n.clouds {
            let cloud = c.shared.lock().expect("cloud lock poisoned");
            let cursor = c.poller.state().cursor;
            let left = cloud.events().iter().filter(|e| e.event_id > cursor).count();
            if left > 0 {
                *stranded.entry(c.poller.device().to_string()).or_default() += left;
            }
        }
    }
    let (emitted, trace_events, finished_ms) = (sim.emitted, sim.trace.len(), sim.q.now_ms());
    drop(sim);
    drop(client);
    drop(server);

    let staged = store.read_staging(&StagingFilter::default())?;
    let staged_n = staged.len();
    let (files, report) = merge_and_report(staged, sc, &out.join(MERGED_DIR))?;
    let cov_path = out.join(COVERAGE_FILE);
    fs::write(&cov_path, report.to_json_pretty()).map_err(io_err(&cov_path))?;
    Ok(RunSummary { emitted, trace_events, staged: staged_n, merged_files: files.len(), finished_ms, stranded, report })
}

fn merge_and_report(
    staged: Vec<SensorSample>,
    sc: &Scenario,
    merged_dir: &Path,
) -> Result<(Vec<MergedSegmentFile>, CoverageReport), RunError> {
    let files = merge(staged, sc.segment, sc.utc_offset_min)?;
    write_merged(merged_dir, &files)?;
    let report = coverage_report(&files, sc);
    Ok((files, report))
}

impl Sim<'_> {
    fn run(&mut self) -> Result<(), RunError> {
        while let Some(t) = self.q.peek_time() {
            self.advance_world(t + 1)?;
            let (t, ev) = self.q.pop_until(t).expect("peeked");
            match ev {
                Ev::Flush { p, dev: DeviceKind::Watch } => self.watch_tick(p, t)?,
                Ev::Flush { p, .. } => self.phone_tick(p, t)?,
                Ev::Poll { p, cloud } => self.poll(p, cloud, t)?,
                Ev::Deliver { p, link, from, env, ack_dropped } => {
                    self.in_flight -= 1;
                    self.deliver(p, link, from, env, ack_dropped, t)?
                }
                Ev::AckArrive { p, to, ack } => {
                    self.in_flight -= 1;
                    self.ack_arrive(p, to, ack, t)?
                }
            }
        }
        Ok(())
    }

    fn advance_world(&mut self, until: i64) -> Result<(), RunError> {
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            let from = n.emitter.cursor();
            if until <= from {
                continue;
            }
            let em = n.emitter.next_emissions((from, until))?;
            let participant = n.emitter.trace().participant.clone();
            let mut transitions = em.transitions.into_iter().peekable();
            for s in em.samples {
                while let Some(tr) = transitions.next_if(|tr| tr.t_ms <= s.t_ms) {
                    self.trace.push(TraceEvent::Fence { t: tr.t_ms, participant: participant.clone(), direction: tr.direction });
                }
                self.dispatch(i, s)?;
            }
            for tr in transitions {
                self.trace.push(TraceEvent::Fence { t: tr.t_ms, participant: participant.clone(), direction: tr.direction });
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, i: usize, s: SensorSample) -> Result<(), RunError> {
        self.trace.push(TraceEvent::Emit { t: s.t_ms, key: s.key() });
        self.emitted += 1;
        let ble_up = self.sc.links.ble.is_up(s.t_ms);
        let n = &mut self.nodes[i];
        match s.device.kind() {
            DeviceKind::Phone => {
                n.phone.record_sample(s)?;
            }
            DeviceKind::Watch => {
                if ble_up {
                    n.phone.observe_watch_sample(s.t_ms);
                }
                n.watch.record_sample(s)?;
            }
            DeviceKind::Motion | DeviceKind::Sleep => {
                let c = if s.device.kind() == DeviceKind::Motion { 0 } else { 1 };
                let ev = event_from_sample(&s)?;
                n.clouds[c].shared.lock().expect("cloud lock poisoned").push_event(ev)?;
            }
        }
        Ok(())
    }

    fn quiet(&self) -> bool {
        self.in_flight == 0
            && self.nodes.iter().all(|n| {
                n.phone.is_empty()
                    && n.watch.is_empty()
                    && n.clouds.iter().all(|c| {
                        c.poller.state().cursor >= c.shared.lock().expect("cloud lock poisoned").last_event_id()
                    })
            })
    }

    /// Periodic events keep firing until the scenario ends, then during the
    /// drain period until nothing is left to deliver.
    fn reschedule(&mut self, t: i64, period: i64, ev: Ev) -> Result<(), RunError> {
        let next = t + period;
        if t < self.sc.end_ms || (next <= self.sc.end_ms + self.sc.drain_max_ms && !self.quiet()) {
            self.q.schedule(next, ev)?;
        }
        Ok(())
    }

    fn time_out(&mut self, p: usize, dev: DeviceKind, t: i64) {
        let device = self.sc.participants[p].device(dev);
        let pending = std::mem::take(self.nodes[p].outstanding.entry(dev).or_default());
        for batch_id in pending {
            self.trace.push(TraceEvent::Timeout { t, device: device.clone(), batch_id });
        }
    }

    fn phone_tick(&mut self, p: usize, t: i64) -> Result<(), RunError> {
        let period = i64::from(self.sc.participants[p].policy.phone_flush_period_s) * 1000;
        self.time_out(p, DeviceKind::Phone, t);
        if t <= self.sc.end_ms {
            if let Some(note) = self.nodes[p].phone.check_wear_gap(t, period)? {
                self.trace.push(TraceEvent::Notify { t, key: note.key() });
            }
        }
        let batches = self.nodes[p].phone.prepare_batches(t, self.sc.max_batch)?;
        for env in batches {
            self.transmit(p, DeviceKind::Phone, LinkName::WanPhone, env, t)?;
        }
        self.reschedule(t, period, Ev::Flush { p, dev: DeviceKind::Phone })
    }

    fn watch_tick(&mut self, p: usize, t: i64) -> Result<(), RunError> {
        let period = i64::from(self.sc.participants[p].policy.watch_flush_period_s) * 1000;
        self.time_out(p, DeviceKind::Watch, t);
        if !self.nodes[p].watch.is_empty() {
            let links = &self.sc.links;
            let link = match route_watch_flush(links.wan_watch.is_up(t), links.ble.is_up(t)) {
                RouteDecision::Direct => Some(LinkName::WanWatch),
                RouteDecision::Relay => Some(LinkName::Ble),
                RouteDecision::Hold => None,
            };
            match link {
                Some(link) => {
                    for env in self.nodes[p].watch.prepare_batches(t, self.sc.max_batch)? {
                        self.transmit(p, DeviceKind::Watch, link, env, t)?;
                    }
                }
                None => {
                    let rows = self.nodes[p].watch.len();
                    self.trace.push(TraceEvent::Hold { t, device: self.sc.participants[p].device(DeviceKind::Watch), rows });
                }
            }
        }
        self.reschedule(t, period, Ev::Flush { p, dev: DeviceKind::Watch })
    }

    fn transmit(&mut self, p: usize, from: DeviceKind, link: LinkName, env: BatchEnvelope, t: i64) -> Result<(), RunError> {
        let device = self.sc.participants[p].device(from);
        let model = self.sc.links.get(link);
        let batch_id = env.batch_id.clone();
        if !model.is_up(t) {
            self.trace.push(TraceEvent::LinkDown { t, device, link, batch_id });
            return Ok(());
        }
        let n = &mut self.nodes[p];
        let sends = n.sends.entry(from).or_default();
        *sends += 1;
        let send_no = *sends;
        self.trace.push(TraceEvent::Send { t, device: device.clone(), link, batch_id: batch_id.clone(), n: env.samples.len() });
        n.outstanding.entry(from).or_default().insert(batch_id.clone());
        let forced_drop = self.sc.faults.iter().any(|f| matches!(f, Fault::DropAck { device: d, send } if *d == device && *send == send_no));
        let rng = n.rngs.get_mut(&link).expect("every link has a stream");
        let (at, ack_dropped) = match link_transmit(model, t, rng) {
            Delivery::LinkDown => unreachable!("link checked up"),
            Delivery::DroppedRequest => {
                self.trace.push(TraceEvent::DropRequest { t, link, batch_id });
                return Ok(());
            }
            Delivery::DroppedAck(at) => (at, true),
            Delivery::DeliveredAt(at) => (at, forced_drop),
        };
        self.in_flight += 1;
        self.q.schedule(at, Ev::Deliver { p, link, from, env, ack_dropped })?;
        Ok(())
    }

    fn deliver(&mut self, p: usize, link: LinkName, from: DeviceKind, env: BatchEnvelope, ack_dropped: bool, t: i64) -> Result<(), RunError> {
        let ack = match link {
            LinkName::Ble => self.nodes[p].phone.receive_relay(&env)?,
            _ => self.sink.submit(&env)?,
        };
        self.trace.push(TraceEvent::Deliver {
            t,
            link,
            batch_id: ack.batch_id.clone(),
            accepted: ack.accepted,
            duplicates: ack.duplicates,
        });
        if ack_dropped {
            self.trace.push(TraceEvent::DropAck { t, link, batch_id: ack.batch_id });
            return Ok(());
        }
        self.in_flight += 1;
        self.q.schedule(t + self.sc.links.get(link).latency_ms, Ev::AckArrive { p, to: from, ack })?;
        Ok(())
    }

    fn ack_arrive(&mut self, p: usize, to: DeviceKind, ack: Ack, t: i64) -> Result<(), RunError> {
        let device = self.sc.participants[p].device(to);
        let n = &mut self.nodes[p];
        n.outstanding.entry(to).or_default().remove(&ack.batch_id);
        let acks = n.acks.entry(to).or_default();
        *acks += 1;
        let ack_no = *acks;
        self.trace.push(TraceEvent::Ack { t, device: device.clone(), batch_id: ack.batch_id.clone() });
        let crash = self.sc.faults.iter().any(|f| matches!(f, Fault::CrashAfterAck { device: d, ack } if *d == device && *ack == ack_no));
        if crash {
            self.trace.push(TraceEvent::Crash { t, device: device.clone() });
            let path = if to == DeviceKind::Watch { n.watch_path.clone() } else { n.phone_path.clone() };
            let (buf, report) = EdgeBuffer::open(device.clone(), &path)?;
            *n.buffer(to) = buf;
            n.outstanding.remove(&to);
            self.trace.push(TraceEvent::Restore { t, device, rows: report.rows, discarded_bytes: report.discarded_bytes });
            return Ok(());
        }
        let deleted = n.buffer(to).on_ack(&ack)?;
        self.trace.push(TraceEvent::Delete { t, device, batch_id: ack.batch_id, n: deleted });
        Ok(())
    }

    fn poll(&mut self, p: usize, ci: usize, t: i64) -> Result<(), RunError> {
        let sink = self.sink;
        let c = &mut self.nodes[p].clouds[ci];
        c.polls += 1;
        let device = c.poller.device().clone();
        {
            let mut cloud = c.shared.lock().expect("cloud lock poisoned");
            cloud.set_now(t);
            for f in &self.sc.faults {
                match f {
                    Fault::ExpireTokens { device: d, poll } if *d == device && *poll == c.polls => cloud.revoke_all_tokens(),
                    Fault::ConnectorCrashAfterAck { device: d, poll } if *d == device && *poll == c.polls => {
                        c.poller.set_crash_after_ack(true)
                    }
                    _ => {}
                }
            }
        }
        let result = match &mut c.http {
            Some((client, _)) => c.poller.poll_once(client, sink, t),
            None => {
                let mut cloud = c.shared.lock().expect("cloud lock poisoned");
                c.poller.poll_once(&mut *cloud, sink, t)
            }
        };
        match result {
            Ok(outcome) => {
                let (fetched, accepted, duplicates, reauthenticated) = match &outcome {
                    PollOutcome::Polled(s) => (s.fetched, s.accepted, s.duplicates, s.reauthenticated),
                    _ => (0, 0, 0, false),
                };
                let outcome = outcome.label().to_string();
                self.trace.push(TraceEvent::Poll { t, device, outcome, fetched, accepted, duplicates, reauthenticated });
            }
            Err(ConnectorError::InjectedCrash(_)) => {
                self.trace.push(TraceEvent::Crash { t, device: device.clone() });
                c.poller = Poller::open(device.clone(), c.cfg.clone(), &c.state_path)?;
                self.trace.push(TraceEvent::Restore { t, device, rows: 0, discarded_bytes: 0 });
            }
            Err(e) => return Err(e.into()),
        }
        self.reschedule(t, self.sc.connectors.poll_period_ms, Ev::Poll { p, cloud: ci })
    }
}

/// Merges an existing staging store into `out`; used by the `merge` command.
pub fn merge_staging(
    staging: &Path,
    out: &Path,
    segment: crate::model::SegmentLength,
    utc_offset_min: i32,
) -> Result<(usize, crate::merger::WriteSummary), RunError> {
    let store = StagingStore::open_existing(staging)?;
    let samples = store.read_staging(&StagingFilter::default())?;
    let files = merge(samples, segment, utc_offset_min)?;
    let summary = write_merged(out, &files)?;
    Ok((files.len(), summary))
}

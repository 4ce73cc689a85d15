//! Experiment configuration and the single-threaded discrete-event run that
//! wires every component together.

use crate::cluster_sim::{parse_server_groups, CompletionEvent, ServerSpec, ServerState, SubmitOutcome};
use crate::estimator_loop::{
    control_tick, load_coefficients, ControlState, ControlStats, Estimator, EstimatorKind, GroundTruthFeed,
    OracleEstimator, TickOutcome,
};
use crate::feature_pipeline::{export_dataset, Dataset, FrameReducer, GroundTruthRow, NormStats};
use crate::metrics::{write_metrics_csv, Summary, WindowMetrics};
use crate::packet_model::{
    flow_to_packets, request_complete_time, timestamp_ticks, Anchor, FiveTuple, FlowRequest, PacketEvent, PacketKind,
    ScriptedPacket, TraceConfig, TraceGenerator, DEFAULT_CLIENT_RTT, DEFAULT_MTU, MIN_MTU,
};
use crate::parser::{FlowTable, DEFAULT_IDLE_TIMEOUT};
use crate::policies::{PolicyKind, Selector, DEFAULT_TABLE_SIZE};
use crate::telemetry::{
    FeatureFetcher, FrameWriter, StoreConfig, VipStore, DEFAULT_MAX_DIPS, DEFAULT_RESERVOIR_CAPACITY, DEFAULT_RING_LEN,
};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const DEFAULT_FRAME_MS: u64 = 50;
pub const DEFAULT_PERIOD_MS: u64 = 250;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{0}")]
    Io(String),
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Invariant(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

/// Knobs with sensible defaults that rarely change between experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub mtu: u32,
    pub client_rtt: f64,
    pub table_size: usize,
    pub reservoir_capacity: usize,
    pub ring_len: usize,
    pub max_dips: usize,
    pub idle_timeout: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            mtu: DEFAULT_MTU,
            client_rtt: DEFAULT_CLIENT_RTT,
            table_size: DEFAULT_TABLE_SIZE,
            reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY,
            ring_len: DEFAULT_RING_LEN,
            max_dips: DEFAULT_MAX_DIPS,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

fn default_frame_ms() -> u64 {
    DEFAULT_FRAME_MS
}

fn default_period_ms() -> u64 {
    DEFAULT_PERIOD_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// The trace's own `seed` is ignored in favour of `seed`.
    pub trace: TraceConfig,
    pub servers: String,
    pub policy: PolicyKind,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Normalization stats for the linear model. Defaults to `stats.csv`
    /// next to the model file when that exists.
    #[serde(default)]
    pub stats: Option<PathBuf>,
    #[serde(default = "default_frame_ms")]
    pub frame_ms: u64,
    #[serde(default = "default_period_ms")]
    pub period_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimParams,
}

impl ExperimentConfig {
    pub fn new(trace: TraceConfig, servers: &str, policy: PolicyKind, estimator: EstimatorKind, seed: u64) -> Self {
        ExperimentConfig {
            trace,
            servers: servers.to_string(),
            policy,
            estimator,
            model: None,
            stats: None,
            frame_ms: DEFAULT_FRAME_MS,
            period_ms: DEFAULT_PERIOD_MS,
            seed,
            out: None,
            sim: SimParams::default(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    pub fn trace_config(&self) -> TraceConfig {
        TraceConfig { seed: self.seed, ..self.trace.clone() }
    }

    pub fn frame_seconds(&self) -> f64 {
        self.frame_ms as f64 / 1000.0
    }

    pub fn period_seconds(&self) -> f64 {
        self.period_ms as f64 / 1000.0
    }

    /// Checks everything that can be checked before the run starts.
    pub fn validate(&self) -> Result<Vec<ServerSpec>, RunError> {
        let cfg = |m: String| RunError::Config(m);
        self.trace_config().validate().map_err(|e| cfg(e.to_string()))?;
        let servers = parse_server_groups(&self.servers).map_err(|e| cfg(e.to_string()))?;
        if servers.len() > self.sim.max_dips {
            return Err(cfg(format!("{} servers exceed max_dips {}", servers.len(), self.sim.max_dips)));
        }
        if self.frame_ms == 0 || self.frame_ms >= self.period_ms {
            return Err(cfg(format!("need 0 < frame_ms < period_ms, got {} and {}", self.frame_ms, self.period_ms)));
        }
        if self.sim.mtu < MIN_MTU {
            return Err(cfg(format!("mtu {} below {MIN_MTU}", self.sim.mtu)));
        }
        if !(self.sim.client_rtt > 0.0 && self.sim.client_rtt.is_finite()) {
            return Err(cfg(format!("client_rtt must be positive, got {}", self.sim.client_rtt)));
        }
        if self.sim.idle_timeout.is_nan() || self.sim.idle_timeout <= 0.0 {
            return Err(cfg(format!("idle_timeout must be positive, got {}", self.sim.idle_timeout)));
        }
        if self.estimator == EstimatorKind::Linear {
            match &self.model {
                None => return Err(cfg("--estimator linear needs --model".into())),
                Some(p) if !p.is_file() => return Err(cfg(format!("model file {} not found", p.display()))),
                _ => {}
            }
        }
        if let Some(p) = &self.stats {
            if !p.is_file() {
                return Err(cfg(format!("stats file {} not found", p.display())));
            }
        }
        Ok(servers)
    }

    fn resolved_stats(&self) -> Option<PathBuf> {
        self.stats.clone().or_else(|| {
            let sibling = self.model.as_ref()?.parent()?.join("stats.csv");
            sibling.is_file().then_some(sibling)
        })
    }
}

/// Σ n_cpu divided by the mean work of the configured trace as actually
/// drawn: the offered rate at which the cluster's CPUs are fully used.
pub fn saturation_rate(servers: &[ServerSpec], trace: &TraceConfig) -> f64 {
    let cores: u32 = servers.iter().map(|s| s.n_cpu).sum();
    let sample = TraceGenerator::new(trace.clone()).expect("valid trace");
    let (n, work) = sample.fold((0u64, 0.0), |(n, w), f| (n + 1, w + f.work));
    let mean_work = if n == 0 { trace.expected_work() } else { work / n as f64 };
    cores as f64 / mean_work
}

/// Bottleneck utilization at or above which a server counts as saturated.
pub const SATURATED_CPU: f64 = 0.99;

/// Measures the offered rate at which a cluster saturates under `config`'s
/// policy: the lowest rate at which its busiest server's mean CPU
/// utilization reaches [`SATURATED_CPU`], found by bisection over
/// `[lo, hi]` to within `tol` qps.
pub fn measure_saturation_rate(config: &ExperimentConfig, lo: f64, hi: f64, tol: f64) -> Result<f64, RunError> {
    let saturated = |rate: f64| -> Result<bool, RunError> {
        let mut c = config.clone();
        c.trace.rate_qps = rate;
        let out = run_experiment(&c)?;
        Ok(out.report.servers.iter().any(|s| s.mean_cpu >= SATURATED_CPU))
    };
    let (mut lo, mut hi) = (lo, hi);
    if saturated(lo)? {
        return Ok(lo);
    }
    if !saturated(hi)? {
        return Err(RunError::Config(format!("cluster not saturated at {hi} qps")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if saturated(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub generated: u64,
    pub completed: u64,
    pub reset: u64,
    pub in_flight: u64,
}

/// Whole-run averages for one server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerSummary {
    pub dip: u32,
    pub n_cpu: u32,
    pub mean_busy: f64,
    pub mean_cpu: f64,
    pub resets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub estimator: String,
    pub stats: ControlStats,
    pub final_generation: u64,
    pub final_weights: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub flows: FlowCounts,
    pub control: ControlReport,
    pub parser_anomalies: u64,
    pub servers: Vec<ServerSummary>,
    pub series: Vec<WindowMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub dataset: Dataset,
}

impl RunOutput {
    pub fn series(&self) -> &[WindowMetrics] {
        &self.report.series
    }

    pub fn summary(&self) -> &Summary {
        &self.report.summary
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSet {
    /// report.json, metrics.csv, features.csv and stats.csv.
    Full,
    /// features.csv and stats.csv only.
    DatasetOnly,
}

pub fn write_outputs(run: &RunOutput, dir: &Path, set: OutputSet) -> Result<(), RunError> {
    let io = |e: &dyn std::fmt::Display| RunError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
    export_dataset(&run.dataset, dir.join("features.csv")).map_err(|e| io(&e))?;
    let stats = if run.dataset.is_empty() { NormStats::identity() } else { NormStats::fit(&run.dataset.rows) };
    stats.write_csv(dir.join("stats.csv")).map_err(|e| io(&e))?;
    if set == OutputSet::Full {
        write_metrics_csv(&run.report.series, dir.join("metrics.csv")).map_err(|e| io(&e))?;
        let json = serde_json::to_string_pretty(&run.report).map_err(|e| io(&e))?;
        std::fs::write(dir.join("report.json"), json + "\n").map_err(|e| io(&e))?;
    }
    Ok(())
}

/// Builds the configured estimator. `None` means the loop is off.
pub fn build_estimator(
    config: &ExperimentConfig,
    feed: &Arc<GroundTruthFeed>,
) -> Result<Option<Box<dyn Estimator>>, RunError> {
    Ok(match config.estimator {
        EstimatorKind::Off => None,
        EstimatorKind::Oracle => Some(Box::new(OracleEstimator::new(Arc::clone(feed)))),
        EstimatorKind::Linear => {
            let path =
                config.model.as_ref().ok_or_else(|| RunError::Config("linear estimator needs a model".into()))?;
            let mut est = load_coefficients(path).map_err(|e| RunError::Config(e.to_string()))?;
            match config.resolved_stats() {
                Some(p) => est = est.with_stats(NormStats::read_csv(&p).map_err(|e| RunError::Config(e.to_string()))?),
                None => log::warn!("no stats file for {}; feeding raw features", path.display()),
            }
            Some(Box::new(est))
        }
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    config.validate()?;
    let feed = GroundTruthFeed::new(config.sim.max_dips);
    let est = build_estimator(config, &feed)?;
    Simulation::new(config, feed, est)?.run()
}

/// Runs with a caller-supplied estimator in place of the configured one.
pub fn run_with_estimator(config: &ExperimentConfig, est: Box<dyn Estimator>) -> Result<RunOutput, RunError> {
    config.validate()?;
    let feed = GroundTruthFeed::new(config.sim.max_dips);
    Simulation::new(config, feed, Some(est))?.run()
}

#[derive(Debug)]
enum Event {
    Boundary(u64),
    Submit(u64),
    Packet(PacketEvent),
    Arrival(FlowRequest),
}

impl Event {
    /// Order among events at the same instant: windows close before anything
    /// else lands in them.
    fn rank(&self) -> u8 {
        match self {
            Event::Boundary(_) => 0,
            Event::Submit(_) => 1,
            Event::Packet(_) => 2,
            Event::Arrival(_) => 3,
        }
    }
}

struct Queued {
    time: f64,
    rank: u8,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed so BinaryHeap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.rank.cmp(&self.rank)).then(other.seq.cmp(&self.seq))
    }
}

struct LiveFlow {
    arrival: f64,
    work: f64,
    dip: Option<u32>,
    five_tuple: FiveTuple,
    synack_ts: u32,
    response: Vec<ScriptedPacket>,
}

struct Simulation<'a> {
    config: &'a ExperimentConfig,
    duration: f64,
    frame: f64,
    rtt: f64,
    generator: TraceGenerator,
    heap: BinaryHeap<Queued>,
    seq: u64,
    store: Arc<VipStore>,
    selector: Selector,
    flow_table: FlowTable,
    writers: Vec<FrameWriter>,
    servers: Vec<ServerState>,
    last_integrals: Vec<(f64, f64)>,
    live: FxHashMap<u64, LiveFlow>,
    counts: FlowCounts,
    window_fcts: Vec<f64>,
    window_rst: u64,
    series: Vec<WindowMetrics>,
    dataset_reducer: FrameReducer,
    dataset: Dataset,
    feed: Arc<GroundTruthFeed>,
    control: Option<(ControlState, Box<dyn Estimator>)>,
    completions: Vec<CompletionEvent>,
}

impl<'a> Simulation<'a> {
    fn new(
        config: &'a ExperimentConfig,
        feed: Arc<GroundTruthFeed>,
        est: Option<Box<dyn Estimator>>,
    ) -> Result<Self, RunError> {
        let specs = config.validate()?;
        let trace = config.trace_config();
        let store = VipStore::new(StoreConfig {
            vip: trace.vip,
            max_dips: config.sim.max_dips,
            ring_len: config.sim.ring_len,
            reservoir_capacity: config.sim.reservoir_capacity,
        })
        .map_err(|e| RunError::Config(e.to_string()))?;
        for s in &specs {
            store.set_active(s.dip, true).map_err(|e| RunError::Config(e.to_string()))?;
        }
        let mut static_weights = vec![1; config.sim.max_dips];
        for s in &specs {
            static_weights[s.dip as usize] = s.n_cpu;
        }
        let selector = Selector::new(config.policy, Arc::clone(&store), config.sim.table_size, static_weights)
            .map_err(|e| RunError::Config(e.to_string()))?;
        let frame = config.frame_seconds();
        let writers = specs
            .iter()
            .map(|s| store.writer(s.dip, frame, 0.0, config.seed))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if est.is_some() && config.policy != PolicyKind::Aquarius {
            log::warn!("estimator {} runs but policy {} ignores its weights", config.estimator, config.policy);
        }
        let control = est.map(|e| {
            let mut st =
                ControlState::new(FeatureFetcher::without_history(Arc::clone(&store)), config.period_seconds());
            st.last_tick = Some(0.0);
            (st, e)
        });
        let generator = TraceGenerator::new(trace.clone()).map_err(|e| RunError::Config(e.to_string()))?;
        Ok(Simulation {
            config,
            duration: trace.duration,
            frame,
            rtt: config.sim.client_rtt,
            generator,
            heap: BinaryHeap::new(),
            seq: 0,
            selector,
            flow_table: FlowTable::new(),
            writers,
            last_integrals: vec![(0.0, 0.0); specs.len()],
            servers: specs.into_iter().map(ServerState::new).collect(),
            store,
            live: FxHashMap::default(),
            counts: FlowCounts::default(),
            window_fcts: Vec::new(),
            window_rst: 0,
            series: Vec::new(),
            dataset_reducer: FrameReducer::new(),
            dataset: Dataset { split_seed: config.seed, ..Dataset::default() },
            feed,
            control,
            completions: Vec::new(),
        })
    }

    fn push(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Queued { time, rank: event.rank(), seq: self.seq, event });
    }

    fn pull_arrival(&mut self) {
        if let Some((t, flow)) = self.generator.next_arrival() {
            self.push(t, Event::Arrival(flow));
        }
    }

    fn run(mut self) -> Result<RunOutput, RunError> {
        self.pull_arrival();
        if self.frame <= self.duration {
            self.push(self.frame, Event::Boundary(1));
        }
        loop {
            let next_heap = self.heap.peek().map(|q| q.time).filter(|&t| t <= self.duration);
            let next_server = self
                .servers
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.next_completion_time().map(|t| (t, i)))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .filter(|&(t, _)| t <= self.duration);
            match (next_heap, next_server) {
                (None, None) => break,
                (h, Some((ts, i))) if h.is_none_or(|th| ts <= th) => {
                    self.advance_server(i, ts);
                }
                _ => {
                    let q = self.heap.pop().expect("peeked");
                    self.handle(q.time, q.event)?;
                }
            }
        }
        self.finish()
    }

    fn advance_server(&mut self, i: usize, until: f64) {
        let mut done = std::mem::take(&mut self.completions);
        self.servers[i].advance_into(until, &mut done);
        for c in done.drain(..) {
            self.on_completion(c);
        }
        self.completions = done;
    }

    fn handle(&mut self, t: f64, event: Event) -> Result<(), RunError> {
        match event {
            Event::Arrival(flow) => {
                self.counts.generated += 1;
                let script = flow_to_packets(&flow, self.config.sim.mtu, self.rtt);
                let mut response = Vec::new();
                for s in script {
                    match s.anchor {
                        Anchor::Arrival => self.push(s.event.time, Event::Packet(s.event)),
                        Anchor::Response => response.push(s),
                    }
                }
                let submit_at = request_complete_time(&flow, self.config.sim.mtu, self.rtt);
                self.push(submit_at, Event::Submit(flow.flow_id));
                self.live.insert(
                    flow.flow_id,
                    LiveFlow {
                        arrival: flow.arrival_time,
                        work: flow.work,
                        dip: None,
                        five_tuple: flow.five_tuple,
                        synack_ts: timestamp_ticks(flow.arrival_time),
                        response,
                    },
                );
                self.pull_arrival();
            }
            Event::Packet(pkt) => self.on_packet(t, &pkt)?,
            Event::Submit(flow_id) => self.on_submit(t, flow_id)?,
            Event::Boundary(k) => self.on_boundary(t, k)?,
        }
        Ok(())
    }

    fn on_packet(&mut self, t: f64, pkt: &PacketEvent) -> Result<(), RunError> {
        let pinned = self.flow_table.pinned_dip(pkt.flow_id);
        let dip = match (pinned, pkt.kind) {
            (Some(d), _) => d,
            (None, PacketKind::Syn) => {
                self.selector.select(&pkt.five_tuple).map_err(|e| RunError::Invariant(e.to_string()))?
            }
            // Unknown flow: the parser counts it as an anomaly.
            (None, _) => 0,
        };
        let outcome = self.flow_table.on_packet(pkt, dip, t);
        if let Some(d) = outcome.dip {
            self.writers[d as usize].record(&outcome);
        }
        match pkt.kind {
            PacketKind::Syn => {
                if let Some(live) = self.live.get_mut(&pkt.flow_id) {
                    live.dip.get_or_insert(dip);
                }
            }
            PacketKind::Fin | PacketKind::Rst => {
                let live = self
                    .live
                    .remove(&pkt.flow_id)
                    .ok_or_else(|| RunError::Invariant(format!("flow {} closed twice", pkt.flow_id)))?;
                if let (Some(a), Some(b)) = (outcome.dip, live.dip) {
                    if a != b {
                        return Err(RunError::Invariant(format!("flow {} moved from dip {b} to dip {a}", pkt.flow_id)));
                    }
                }
                if pkt.kind == PacketKind::Fin {
                    self.counts.completed += 1;
                    self.window_fcts.push(t - live.arrival);
                } else {
                    self.counts.reset += 1;
                    self.window_rst += 1;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_submit(&mut self, t: f64, flow_id: u64) -> Result<(), RunError> {
        let (dip, work) = match self.live.get(&flow_id) {
            Some(l) => (l.dip, l.work),
            None => return Err(RunError::Invariant(format!("request of unknown flow {flow_id}"))),
        };
        let dip = dip.ok_or_else(|| RunError::Invariant(format!("flow {flow_id} has no server")))? as usize;
        self.advance_server(dip, t);
        if self.servers[dip].submit(flow_id, work, t) == SubmitOutcome::RstOverflow {
            // The server refuses the connection; the client answers with a
            // reset that crosses the balancer one RTT later.
            let live = self.live.get_mut(&flow_id).expect("checked above");
            live.response.clear();
            let at = t + self.rtt;
            let rst = PacketEvent {
                time: at,
                flow_id,
                five_tuple: live.five_tuple,
                kind: PacketKind::Rst,
                payload_bytes: 0,
                ts_val: timestamp_ticks(at),
                ts_ecr: live.synack_ts,
            };
            self.push(at, Event::Packet(rst));
        }
        Ok(())
    }

    fn on_completion(&mut self, c: CompletionEvent) {
        let Some(live) = self.live.get_mut(&c.flow_id) else {
            log::error!("completion for unknown flow {}", c.flow_id);
            return;
        };
        let server_ts = timestamp_ticks(c.time);
        let packets: Vec<PacketEvent> = live.response.drain(..).map(|s| s.resolve(c.time, server_ts)).collect();
        for p in packets {
            self.push(p.time, Event::Packet(p));
        }
    }

    fn on_boundary(&mut self, t: f64, k: u64) -> Result<(), RunError> {
        for i in 0..self.servers.len() {
            self.advance_server(i, t);
        }
        self.flow_table.expire_flows(t, self.config.sim.idle_timeout);

        let mut busy = Vec::with_capacity(self.servers.len());
        let mut cpu = Vec::with_capacity(self.servers.len());
        for (i, server) in self.servers.iter().enumerate() {
            let int = server.integrals();
            let (b0, c0) = self.last_integrals[i];
            busy.push((int.busy_seconds - b0) / self.frame);
            cpu.push((int.cpu_seconds - c0) / self.frame);
            self.last_integrals[i] = (int.busy_seconds, int.cpu_seconds);
        }

        let vip = self.store.vip();
        for (i, server) in self.servers.iter().enumerate() {
            let dip = server.spec().dip;
            let w = &mut self.writers[i];
            w.set_gauge(self.flow_table.ongoing(dip));
            w.publish(t);
            let mut row = self.dataset_reducer.reduce(vip, dip, w.last_published());
            row.ground_truth = Some(GroundTruthRow::from(&server.ground_truth(t)));
            self.dataset.rows.push(row);
            self.feed.set(dip, server.busy_threads() as f64);
        }

        let mut fcts = std::mem::take(&mut self.window_fcts);
        self.series.push(WindowMetrics::from_window(t, &busy, &cpu, &mut fcts, self.window_rst));
        fcts.clear();
        self.window_fcts = fcts;
        self.window_rst = 0;

        if let Some((state, est)) = self.control.as_mut() {
            if state.due(t) {
                if let TickOutcome::Applied { .. } = control_tick(state, est.as_mut(), t) {
                    self.selector.sync_registers().map_err(|e| RunError::Invariant(e.to_string()))?;
                }
            }
        }

        let next = (k + 1) as f64 * self.frame;
        if next <= self.duration + 1e-9 {
            self.push(next, Event::Boundary(k + 1));
        }
        Ok(())
    }

    fn finish(self) -> Result<RunOutput, RunError> {
        let mut counts = self.counts;
        counts.in_flight = self.live.len() as u64;
        if counts.generated != counts.completed + counts.reset + counts.in_flight {
            return Err(RunError::Invariant(format!(
                "flow conservation: generated {} != completed {} + reset {} + in flight {}",
                counts.generated, counts.completed, counts.reset, counts.in_flight
            )));
        }
        let (generation, weights) = self.store.actions().read();
        let control = match &self.control {
            Some((st, est)) => ControlReport {
                estimator: est.describe(),
                stats: st.stats,
                final_generation: generation,
                final_weights: weights[..self.servers.len()].to_vec(),
            },
            None => ControlReport {
                estimator: "off".into(),
                stats: ControlStats::default(),
                final_generation: generation,
                final_weights: weights[..self.servers.len()].to_vec(),
            },
        };
        let summary = Summary::from_series(&self.series);
        let elapsed = self.series.last().map_or(0.0, |w| w.time);
        let per = |x: f64| if elapsed > 0.0 { x / elapsed } else { 0.0 };
        let servers = self
            .servers
            .iter()
            .map(|s| {
                let int = s.integrals();
                ServerSummary {
                    dip: s.spec().dip,
                    n_cpu: s.spec().n_cpu,
                    mean_busy: per(int.busy_seconds),
                    mean_cpu: per(int.cpu_seconds),
                    resets: s.resets(),
                }
            })
            .collect();
        let report = Report {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            summary,
            flows: counts,
            control,
            parser_anomalies: self.flow_table.anomalies(),
            servers,
            series: self.series,
        };
        Ok(RunOutput { report, dataset: self.dataset })
    }
}

//! Experiment configuration, drivers and CSV output.
//!
//! Each driver builds worlds from an [`ExperimentConfig`], runs them and
//! returns a report whose `csv` method renders a fixed schema. Every row
//! ends with the config digest so results can be matched to their inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modeler::{build_model, estimate_join, estimate_revocation, Joiner, ModelTopology, RevocationMethod};
use crate::private::{discovery_key, QueryMode};
use crate::ring::AddressSpace;
use crate::sim::{synthetic_latency, LatencyMatrix, NatProfile, Time};
use crate::stats::{mean, median_u64, spearman};
use crate::world::{Overlay, ProcId, World, WorldConfig};

/// Settle time before steady-state measurements.
pub const SETTLE_MS: Time = 3_600_000;
/// Secured joins count as not significantly slower below this ratio.
pub const SECURITY_RATIO_LIMIT: f64 = 1.5;
/// Static discovery must cost more than this multiple of dynamic.
pub const STATIC_DYNAMIC_RATIO: f64 = 2.0;
/// Longest a single join may take before the run is flagged.
pub const JOIN_TIMEOUT_MS: Time = 300_000;

#[derive(Debug, Clone, PartialEq)]
pub enum LatencySource {
    Synthetic { min: u32, max: u32 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub public_size: usize,
    pub private_size: usize,
    pub security: bool,
    pub seed: u64,
    pub latency: LatencySource,
    pub sites: usize,
    pub timer: QueryMode,
    pub method: RevocationMethod,
    pub reps: usize,
    pub out: PathBuf,
    /// Private sizes swept by the model comparison.
    pub sizes: Vec<usize>,
    /// Joiners averaged per modeler estimate.
    pub model_joiners: usize,
    /// Use the NAT mix for paired hosts; otherwise every host is public.
    pub nat: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            public_size: 200,
            private_size: 32,
            security: false,
            seed: 1,
            latency: LatencySource::Synthetic { min: 20, max: 300 },
            sites: 64,
            timer: QueryMode::Dynamic,
            method: RevocationMethod::Broadcast,
            reps: 30,
            out: PathBuf::from("."),
            sizes: vec![16, 32, 64, 128, 256],
            model_joiners: 1000,
            nat: true,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("not a boolean: {v}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value for {key}: {v}")))
}

fn fnv64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in data {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ExperimentConfig {
    /// Sets one option by its flag name (without dashes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "public-size" => self.public_size = parse_num(key, value)?,
            "private-size" => self.private_size = parse_num(key, value)?,
            "security" => self.security = parse_bool(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "latency-file" => self.latency = LatencySource::File(PathBuf::from(value)),
            "synthetic" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("synthetic expects MIN,MAX: {value}")))?;
                let (min, max) = (parse_num(key, a)?, parse_num(key, b)?);
                if min > max {
                    return Err(Error::Config(format!("synthetic bounds inverted: {value}")));
                }
                self.latency = LatencySource::Synthetic { min, max };
            }
            "sites" => {
                self.sites = parse_num(key, value)?;
                if self.sites == 0 {
                    return Err(Error::Config("sites must be positive".into()));
                }
            }
            "timer" => {
                self.timer = match value {
                    "static" => QueryMode::Static,
                    "dynamic" => QueryMode::Dynamic,
                    _ => return Err(Error::Config(format!("timer must be static or dynamic: {value}"))),
                }
            }
            "method" => {
                self.method = match value {
                    "dht" => RevocationMethod::Dht,
                    "broadcast" => RevocationMethod::Broadcast,
                    _ => return Err(Error::Config(format!("method must be dht or broadcast: {value}"))),
                }
            }
            "reps" => self.reps = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "sizes" => {
                self.sizes = value.split(',').map(|s| parse_num(key, s)).collect::<Result<_>>()?;
            }
            "model-joiners" => self.model_joiners = parse_num(key, value)?,
            "nat" => self.nat = parse_bool(value)?,
            other => return Err(Error::Config(format!("unknown option: {other}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_file_text(&text)
    }

    /// Every option as sorted `key=value` lines; the output directory is
    /// left out since it does not affect results.
    pub fn canonical(&self) -> String {
        let latency = match &self.latency {
            LatencySource::Synthetic { min, max } => format!("synthetic={min},{max}"),
            LatencySource::File(p) => format!("latency-file={}", p.display()),
        };
        let timer = match self.timer {
            QueryMode::Static => "static",
            QueryMode::Dynamic => "dynamic",
        };
        let method = match self.method {
            RevocationMethod::Dht => "dht",
            RevocationMethod::Broadcast => "broadcast",
        };
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        let mut lines = vec![
            latency,
            format!("method={method}"),
            format!("model-joiners={}", self.model_joiners),
            format!("nat={}", self.nat),
            format!("private-size={}", self.private_size),
            format!("public-size={}", self.public_size),
            format!("reps={}", self.reps),
            format!("security={}", self.security),
            format!("seed={}", self.seed),
            format!("sites={}", self.sites),
            format!("sizes={}", sizes.join(",")),
            format!("timer={timer}"),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", fnv64(self.canonical().as_bytes()))
    }

    pub fn latency_matrix(&self) -> Result<LatencyMatrix> {
        match &self.latency {
            LatencySource::Synthetic { min, max } => synthetic_latency(self.sites, *min, *max, self.seed),
            LatencySource::File(p) => LatencyMatrix::load(p),
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut w = WorldConfig {
            seed: self.seed,
            security: self.security,
            query_mode: self.timer,
            ..Default::default()
        };
        if !self.nat {
            w.nat = crate::sim::NatFractions::all_public();
        }
        w
    }
}

/// Rows plus a header; renders as comma-separated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out += &r.join(",");
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

fn opt(t: Option<Time>) -> String {
    t.map_or_else(String::new, |v| v.to_string())
}

/// A settled world and the processes in it.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub world: World,
    pub public: Vec<ProcId>,
    pub pairs: Vec<(ProcId, ProcId)>,
    /// When both overlays were last seen well formed, if they were.
    pub formed_at: Option<Time>,
}

const BUILD_CAP_MS: Time = 3_600_000;
const START_SPACING_MS: Time = 100;

fn start_public_pool(w: &mut World, n: usize, rng: &mut ChaCha8Rng) -> Vec<ProcId> {
    let mut pool = Vec::with_capacity(n);
    for i in 0..n {
        let p = w.add_public_node(None, None);
        if i > 0 {
            let b = pool[rng.gen_range(0..i)];
            w.set_bootstrap(p, &[b]);
        }
        w.start_at(p, w.now() + i as Time * START_SPACING_MS);
        pool.push(p);
    }
    pool
}

fn add_pair(w: &mut World, pool: &[ProcId], rng: &mut ChaCha8Rng, at: Time, group: Option<&str>) -> Result<(ProcId, ProcId)> {
    let (a, b) = w.add_paired_node(None, None)?;
    if let Some(&boot) = pool.choose(rng) {
        w.set_bootstrap(a, &[boot]);
    }
    if let Some(g) = group {
        w.set_discovery_group(b, g);
    }
    w.start_at(a, at);
    Ok((a, b))
}

fn both_formed(w: &World) -> bool {
    w.well_formed_at(Overlay::Public).is_some() && w.well_formed_at(Overlay::Private).is_some()
}

fn formed_for(private_size: usize) -> impl Fn(&World) -> bool {
    move |w| w.well_formed_at(Overlay::Public).is_some() && (private_size == 0 || both_formed(w))
}

/// Builds the public pool, then joins `private_size` pairs one after
/// another, and runs until both overlays are well formed.
pub fn deploy(wcfg: WorldConfig, latency: LatencyMatrix, public_size: usize, private_size: usize) -> Result<Deployment> {
    let mut rng = ChaCha8Rng::seed_from_u64(wcfg.seed ^ 0xd3_9107);
    let mut w = World::new(wcfg, latency)?;
    let public = start_public_pool(&mut w, public_size, &mut rng);
    let t0 = public_size as Time * START_SPACING_MS + 1_000;
    let mut pairs = Vec::with_capacity(private_size);
    for i in 0..private_size {
        pairs.push(add_pair(&mut w, &public, &mut rng, t0 + i as Time * START_SPACING_MS, None)?);
    }
    let last = t0 + private_size as Time * START_SPACING_MS;
    w.run_until(last);
    w.watch_well_formed_min(Overlay::Public, public_size + private_size);
    w.watch_well_formed_min(Overlay::Private, private_size);
    let ok = w.run_until_pred(last + BUILD_CAP_MS, formed_for(private_size));
    let formed_at = ok.then(|| w.now());
    Ok(Deployment { world: w, public, pairs, formed_at })
}

fn rep_seed(seed: u64, rep: usize) -> u64 {
    fnv64(&[seed.to_be_bytes(), (rep as u64).to_be_bytes()].concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleJoinReport {
    pub private_size: usize,
    pub security: bool,
    /// Per repetition, public side join time.
    pub public_join_ms: Vec<Option<Time>>,
    /// Per repetition, `None` when the private join did not converge.
    pub join_ms: Vec<Option<Time>>,
    pub median_ms: Option<f64>,
    pub converged: usize,
    pub digest: String,
}

impl SingleJoinReport {
    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&[
            "repetition",
            "private_size",
            "security",
            "public_join_ms",
            "private_join_ms",
            "converged",
            "config",
        ]);
        for (i, (p, j)) in self.public_join_ms.iter().zip(&self.join_ms).enumerate() {
            c.push(vec![
                i.to_string(),
                self.private_size.to_string(),
                self.security.to_string(),
                opt(*p),
                opt(*j),
                j.is_some().to_string(),
                self.digest.clone(),
            ]);
        }
        c
    }

    pub fn flagged(&self) -> bool {
        self.converged < self.join_ms.len()
    }
}

/// Time from a new pair's start until its private process is linked to
/// its true ring neighbours, in a cloned settled deployment per rep.
pub fn run_single_join(cfg: &ExperimentConfig) -> Result<SingleJoinReport> {
    let base = deploy(cfg.world_config(), cfg.latency_matrix()?, cfg.public_size, cfg.private_size)?;
    let settle = base.world.now() + 60_000;
    let mut base = base;
    base.world.run_until(settle);
    let times: Vec<(Option<Time>, Option<Time>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<(Option<Time>, Option<Time>)> {
            let mut w = base.world.clone();
            let seed = rep_seed(cfg.seed, rep);
            w.reseed(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = w.now() + 1;
            let (a, b) = add_pair(&mut w, &base.public, &mut rng, start, None)?;
            w.run_until_pred(start + JOIN_TIMEOUT_MS, |w| {
                w.proc(a).connected_at.is_some() && w.proc(b).connected_at.is_some()
            });
            let since = |p: ProcId| w.proc(p).connected_at.map(|t| t - start);
            Ok((since(a), since(b)))
        })
        .collect::<Result<_>>()?;
    let (public_join_ms, join_ms): (Vec<_>, Vec<_>) = times.into_iter().unzip();
    let ok: Vec<u64> = join_ms.iter().flatten().copied().collect();
    Ok(SingleJoinReport {
        private_size: cfg.private_size,
        security: cfg.security,
        converged: ok.len(),
        median_ms: median_u64(&ok),
        public_join_ms,
        join_ms,
        digest: cfg.digest(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassJoinRun {
    pub completion_ms: Option<Time>,
    pub public_single_cycle: bool,
    pub private_single_cycle: bool,
    pub public_cycles: usize,
    pub private_cycles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassJoinReport {
    pub private_size: usize,
    pub runs: Vec<MassJoinRun>,
    pub median_completion_ms: Option<f64>,
    pub digest: String,
}

impl MassJoinReport {
    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&[
            "rep",
            "private_size",
            "completion_ms",
            "public_single_cycle",
            "private_single_cycle",
            "public_cycles",
            "private_cycles",
            "config",
        ]);
        for (i, r) in self.runs.iter().enumerate() {
            c.push(vec![
                i.to_string(),
                self.private_size.to_string(),
                opt(r.completion_ms),
                r.public_single_cycle.to_string(),
                r.private_single_cycle.to_string(),
                r.public_cycles.to_string(),
                r.private_cycles.to_string(),
                self.digest.clone(),
            ]);
        }
        c
    }

    pub fn flagged(&self) -> bool {
        self.runs.iter().any(|r| !r.public_single_cycle || !r.private_single_cycle)
    }
}

/// Starts every pair at the same instant on a settled public pool and
/// times until both overlays are well formed.
pub fn run_mass_join(cfg: &ExperimentConfig) -> Result<MassJoinReport> {
    let latency = cfg.latency_matrix()?;
    let runs: Vec<MassJoinRun> = (0..cfg.reps.max(1))
        .into_par_iter()
        .map(|rep| -> Result<MassJoinRun> {
            let mut wcfg = cfg.world_config();
            wcfg.seed = rep_seed(cfg.seed, rep);
            let mut rng = ChaCha8Rng::seed_from_u64(wcfg.seed);
            let base = deploy(wcfg, latency.clone(), cfg.public_size, 0)?;
            let mut w = base.world;
            let t = w.now() + 60_000;
            for _ in 0..cfg.private_size {
                add_pair(&mut w, &base.public, &mut rng, t, None)?;
            }
            w.run_until(t);
            w.watch_well_formed_min(Overlay::Public, cfg.public_size + cfg.private_size);
            w.watch_well_formed_min(Overlay::Private, cfg.private_size);
            w.run_until_pred(t + BUILD_CAP_MS, both_formed);
            let completion = w.well_formed_at(Overlay::Private).map(|p| p - t);
            let (pc, vc) = (w.crawl(Overlay::Public), w.crawl(Overlay::Private));
            Ok(MassJoinRun {
                completion_ms: completion,
                public_single_cycle: pc.is_single_cycle,
                private_single_cycle: vc.is_single_cycle,
                public_cycles: pc.cycle_count,
                private_cycles: vc.cycle_count,
            })
        })
        .collect::<Result<_>>()?;
    let done: Vec<u64> = runs.iter().filter_map(|r| r.completion_ms).collect();
    Ok(MassJoinReport {
        private_size: cfg.private_size,
        median_completion_ms: median_u64(&done),
        runs,
        digest: cfg.digest(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBandwidth {
    pub nat: NatProfile,
    pub bytes_per_sec: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthReport {
    pub timer: QueryMode,
    pub window: (Time, Time),
    pub nodes: Vec<NodeBandwidth>,
    pub mean_bytes_per_sec: f64,
    pub formed: bool,
    pub digest: String,
}

impl BandwidthReport {
    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&["node", "node_class", "timer", "window_start", "bytes_per_s", "queries", "config"]);
        for (i, n) in self.nodes.iter().enumerate() {
            c.push(vec![
                i.to_string(),
                format!("{:?}", n.nat).to_lowercase(),
                format!("{:?}", self.timer).to_lowercase(),
                self.window.0.to_string(),
                format!("{:.3}", n.bytes_per_sec),
                n.queries.to_string(),
                self.digest.clone(),
            ]);
        }
        c
    }

    pub fn flagged(&self) -> bool {
        !self.formed
    }
}

/// Per-pair traffic (both processes, sent plus received) over the hour
/// following a one-hour settle after the overlays formed.
pub fn run_bandwidth(cfg: &ExperimentConfig) -> Result<BandwidthReport> {
    let mut d = deploy(cfg.world_config(), cfg.latency_matrix()?, cfg.public_size, cfg.private_size)?;
    let formed = d.formed_at.is_some();
    let minute = 60_000;
    let w0 = d.world.now().div_ceil(minute) * minute;
    let window = (w0 + SETTLE_MS, w0 + 2 * SETTLE_MS);
    d.world.run_until(window.1);
    let secs = (window.1 - window.0) as f64 / 1000.0;
    let w = &d.world;
    let nodes: Vec<NodeBandwidth> = d
        .pairs
        .iter()
        .map(|(a, b)| {
            let bytes: u64 = [a, b]
                .iter()
                .map(|p| {
                    let (s, r) = w.meter().node_bytes_between(p.0 as usize, window.0, window.1);
                    s + r
                })
                .sum();
            let queries = w.queries().iter().filter(|(p, t)| p == b && *t >= window.0 && *t < window.1).count();
            NodeBandwidth { nat: w.host_of(*a).nat, bytes_per_sec: bytes as f64 / secs, queries }
        })
        .collect();
    let bps: Vec<f64> = nodes.iter().map(|n| n.bytes_per_sec).collect();
    Ok(BandwidthReport {
        timer: cfg.timer,
        window,
        mean_bytes_per_sec: mean(&bps).unwrap_or(0.0),
        nodes,
        formed,
        digest: cfg.digest(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevocationReport {
    pub method: RevocationMethod,
    pub n: usize,
    pub messages: u64,
    pub bytes: u64,
    /// Share of live non-revoked private processes holding the notice.
    pub reached_fraction: f64,
    pub completion_ms: Option<Time>,
    /// Handshakes by the revoked user that a peer accepted after the probe.
    pub accepted_after: usize,
    /// Handshakes by the revoked user that a peer refused after the probe.
    pub rejected_after: usize,
    pub links_after: usize,
    pub duplicates: usize,
    pub digest: String,
}

impl RevocationReport {
    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&[
            "method",
            "private_size",
            "delay_ms",
            "bytes_total",
            "reached_fraction",
            "messages",
            "accepted_after",
            "rejected_after",
            "links_after",
            "duplicates",
            "config",
        ]);
        c.push(vec![
            format!("{:?}", self.method).to_lowercase(),
            self.n.to_string(),
            opt(self.completion_ms),
            self.bytes.to_string(),
            format!("{:.4}", self.reached_fraction),
            self.messages.to_string(),
            self.accepted_after.to_string(),
            self.rejected_after.to_string(),
            self.links_after.to_string(),
            self.duplicates.to_string(),
            self.digest.clone(),
        ]);
        c
    }

    pub fn flagged(&self) -> bool {
        self.accepted_after > 0
            || self.links_after > 0
            || self.duplicates > 0
            || (self.method == RevocationMethod::Broadcast && self.reached_fraction < 1.0)
    }
}

const REVOCATION_RUN_MS: Time = 60_000;

/// Revokes one random member from another and then has the revoked
/// member try to link to everyone. Security is always on.
pub fn run_revocation(cfg: &ExperimentConfig) -> Result<RevocationReport> {
    let mut wcfg = cfg.world_config();
    wcfg.security = true;
    wcfg.subscribe_on_connect = true;
    wcfg.revocation_check_on_connect = cfg.method == RevocationMethod::Dht;
    let mut d = deploy(wcfg, cfg.latency_matrix()?, cfg.public_size, cfg.private_size)?;
    let w = &mut d.world;
    w.run_until(w.now() + 60_000);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e_70ce);
    let mut picks: Vec<usize> = (0..d.pairs.len()).collect();
    picks.shuffle(&mut rng);
    let (victim, agent) = (d.pairs[picks[0]].1, d.pairs[picks[1 % picks.len()]].1);
    let user = w.proc(victim).user.clone();
    w.reset_revocation_traffic();
    let t0 = w.now();
    match cfg.method {
        RevocationMethod::Broadcast => w.revoke_broadcast(agent, &user)?,
        RevocationMethod::Dht => w.revoke_dht(agent, &user)?,
    };
    w.run_until(t0 + REVOCATION_RUN_MS);
    let (messages, bytes) = w.revocation_traffic();
    let members: Vec<ProcId> =
        w.live_ids(Overlay::Private).values().copied().filter(|p| w.proc(*p).user != user).collect();
    let reached: Vec<Time> = members.iter().filter_map(|p| w.notice_received().get(p).copied()).collect();
    let reached_fraction = reached.len() as f64 / members.len().max(1) as f64;
    let completion_ms = reached.iter().max().map(|t| t - t0);
    let probe = w.probe_revoked(&user);
    w.run_until(probe + REVOCATION_RUN_MS);
    let after: Vec<bool> =
        w.handshakes.iter().filter(|h| h.at >= probe && h.initiator == victim).map(|h| h.established).collect();
    let accepted_after = after.iter().filter(|e| **e).count();
    let rejected_after = after.len() - accepted_after;
    Ok(RevocationReport {
        method: cfg.method,
        n: cfg.private_size,
        messages,
        bytes,
        reached_fraction,
        completion_ms,
        accepted_after,
        rejected_after,
        links_after: w.links_to_user(&user),
        duplicates: w.violations.len(),
        digest: cfg.digest(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub size: usize,
    pub model_ms: f64,
    pub revoke_broadcast_bytes: u64,
    pub revoke_dht_bytes: u64,
    /// Only sizes up to [`SIM_SIZE_LIMIT`] are simulated.
    pub sim_median_ms: Option<f64>,
}

/// Largest private size the model mode also simulates.
pub const SIM_SIZE_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub rows: Vec<ModelRow>,
    pub spearman: Option<f64>,
    pub digest: String,
}

impl ModelReport {
    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&[
            "private_size",
            "model_join_ms",
            "model_revoke_broadcast_bytes",
            "model_revoke_dht_bytes",
            "sim_median_join_ms",
            "config",
        ]);
        for r in &self.rows {
            c.push(vec![
                r.size.to_string(),
                format!("{:.3}", r.model_ms),
                r.revoke_broadcast_bytes.to_string(),
                r.revoke_dht_bytes.to_string(),
                r.sim_median_ms.map_or_else(String::new, |v| format!("{v:.3}")),
                self.digest.clone(),
            ]);
        }
        c
    }

    pub fn flagged(&self) -> bool {
        self.rows.iter().any(|r| r.size <= SIM_SIZE_LIMIT && r.sim_median_ms.is_none())
    }
}

fn model_pair(cfg: &ExperimentConfig, latency: &LatencyMatrix, size: usize) -> (ModelTopology, ModelTopology) {
    let space = AddressSpace::default();
    let mut pub_topo = build_model(cfg.public_size, space, cfg.seed);
    let mut priv_topo = build_model(size, space, cfg.seed.wrapping_add(1));
    pub_topo.place(latency.n_sites(), cfg.seed);
    priv_topo.place(latency.n_sites(), cfg.seed.wrapping_add(1));
    (pub_topo, priv_topo)
}

/// Modeler mean join time for a private overlay of `size`, averaged over
/// random joiners on random sites.
pub fn model_join_ms(cfg: &ExperimentConfig, latency: &LatencyMatrix, size: usize) -> f64 {
    let (pub_topo, priv_topo) = model_pair(cfg, latency, size);
    let key = discovery_key(&WorldConfig::default().group, pub_topo.space);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ size as u64);
    let totals: Vec<f64> = (0..cfg.model_joiners.max(1))
        .map(|_| {
            let site = rng.gen_range(0..latency.n_sites());
            let j = Joiner::random(&pub_topo, &priv_topo, site, &mut rng);
            estimate_join(&pub_topo, &priv_topo, cfg.security, &j, latency, key).total as f64
        })
        .collect();
    mean(&totals).unwrap_or(0.0)
}

/// Modeler revocation bytes for both methods on a private overlay of `size`.
pub fn model_revocation_bytes(cfg: &ExperimentConfig, latency: &LatencyMatrix, size: usize) -> (u64, u64) {
    let (_, topo) = model_pair(cfg, latency, size.max(2));
    let sizes = WorldConfig::default().node.sizes;
    let target = topo.len() / 2;
    let b = estimate_revocation(&topo, RevocationMethod::Broadcast, 0, target, latency, &sizes);
    let d = estimate_revocation(&topo, RevocationMethod::Dht, 0, target, latency, &sizes);
    (b.bytes, d.bytes)
}

/// Compares modeler estimates with simulated single-join medians over
/// `cfg.sizes` on the same latency matrix.
pub fn run_model(cfg: &ExperimentConfig) -> Result<ModelReport> {
    let latency = cfg.latency_matrix()?;
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let sim_median_ms = if size <= SIM_SIZE_LIMIT {
            run_single_join(&ExperimentConfig { private_size: size, ..cfg.clone() })?.median_ms
        } else {
            None
        };
        let (revoke_broadcast_bytes, revoke_dht_bytes) = model_revocation_bytes(cfg, &latency, size);
        rows.push(ModelRow {
            size,
            model_ms: model_join_ms(cfg, &latency, size),
            revoke_broadcast_bytes,
            revoke_dht_bytes,
            sim_median_ms,
        });
    }
    let complete: Vec<&ModelRow> = rows.iter().filter(|r| r.sim_median_ms.is_some()).collect();
    let xs: Vec<f64> = complete.iter().map(|r| r.model_ms).collect();
    let ys: Vec<f64> = complete.iter().filter_map(|r| r.sim_median_ms).collect();
    Ok(ModelReport { spearman: spearman(&xs, &ys), rows, digest: cfg.digest() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealReport {
    pub merged_at: Time,
    /// Longest dynamic query period in effect when the lists merged.
    pub period_ms: Time,
    pub healed_at: Option<Time>,
    pub digest: String,
}

impl HealReport {
    pub fn deadline(&self) -> Time {
        self.merged_at + 2 * self.period_ms
    }

    pub fn healed_in_time(&self) -> bool {
        self.healed_at.is_some_and(|t| t <= self.deadline())
    }

    pub fn csv(&self) -> Csv {
        let mut c = Csv::new(&["merged_at_ms", "period_ms", "healed_at_ms", "deadline_ms", "healed_in_time", "config"]);
        c.push(vec![
            self.merged_at.to_string(),
            self.period_ms.to_string(),
            opt(self.healed_at),
            self.deadline().to_string(),
            self.healed_in_time().to_string(),
            self.digest.clone(),
        ]);
        c
    }
}

/// Grows two private partitions under different discovery keys, then
/// points everyone at one key and waits for a single ring.
pub fn run_partition_heal(cfg: &ExperimentConfig) -> Result<HealReport> {
    let mut wcfg = cfg.world_config();
    wcfg.query_mode = QueryMode::Dynamic;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ea1);
    let mut w = World::new(wcfg, cfg.latency_matrix()?)?;
    let public = start_public_pool(&mut w, cfg.public_size, &mut rng);
    let t0 = cfg.public_size as Time * START_SPACING_MS + 1_000;
    let mut privs = Vec::new();
    for i in 0..cfg.private_size {
        let group = if i % 2 == 0 { "part-a" } else { "part-b" };
        privs.push(add_pair(&mut w, &public, &mut rng, t0 + i as Time * START_SPACING_MS, Some(group))?.1);
    }
    let last = t0 + cfg.private_size as Time * START_SPACING_MS;
    w.run_until(last);
    w.run_until_pred(last + BUILD_CAP_MS, |w| {
        privs.iter().all(|p| w.join_phase(*p) == crate::private::JoinPhase::Connected)
    });
    w.run_until(w.now() + 120_000);
    let merged_at = w.now();
    let period_ms = privs.iter().map(|p| w.query_period(*p)).max().unwrap_or(0);
    let group = w.cfg.group.clone();
    for p in &privs {
        w.set_discovery_group(*p, &group);
    }
    w.watch_well_formed(Overlay::Private);
    w.run_until_pred(merged_at + 4 * period_ms.max(1), |w| w.well_formed_at(Overlay::Private).is_some());
    Ok(HealReport { merged_at, period_ms, healed_at: w.well_formed_at(Overlay::Private), digest: cfg.digest() })
}

/// Textual one-line summary used by the CLI.
pub fn summary_line(name: &str, fields: &[(&str, String)]) -> String {
    let mut s = name.to_string();
    for (k, v) in fields {
        let _ = write!(s, " {k}={v}");
    }
    s
}

//! Throughput and contention scenarios. Every run ends with an integrity
//! audit; a run whose audit fails is an error, not a report.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::pool::PoolConfig;
use crate::storage::MemStorage;
use crate::types::{Durability, IsolationMode, MessageId, Ordering};
use crate::workflow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    EnqueueCommit,
    EnqueueCommitGroup,
    SerializableDequeueContention,
    ReadPastDequeueScaling,
    TriAcidEndToEnd,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::EnqueueCommit,
        Scenario::EnqueueCommitGroup,
        Scenario::SerializableDequeueContention,
        Scenario::ReadPastDequeueScaling,
        Scenario::TriAcidEndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::EnqueueCommit => "enqueue_commit",
            Scenario::EnqueueCommitGroup => "enqueue_commit_group",
            Scenario::SerializableDequeueContention => "serializable_dequeue_contention",
            Scenario::ReadPastDequeueScaling => "read_past_dequeue_scaling",
            Scenario::TriAcidEndToEnd => "tri_acid_end_to_end",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct BenchParams {
    pub messages: usize,
    pub payload_bytes: usize,
    /// Producers, consumers or clients, depending on the scenario.
    pub concurrency: usize,
    pub seed: u64,
    /// Simulated processing time per dequeued message, spent while the
    /// dequeue is still uncommitted.
    pub work: Duration,
    /// Run against files in this directory instead of in memory. It must
    /// not exist yet.
    pub data_dir: Option<PathBuf>,
    /// Simulated log sync time when running in memory.
    pub sync_latency: Duration,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            messages: 1000,
            payload_bytes: 64,
            concurrency: 4,
            seed: 1,
            work: Duration::from_millis(1),
            data_dir: None,
            sync_latency: Duration::from_micros(200),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub concurrency: usize,
    pub messages: usize,
    pub payload_bytes: usize,
    pub seed: u64,
    pub duration_secs: f64,
    pub ops: u64,
    pub throughput: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub lock_waits: u64,
    pub mean_blocked_us: f64,
    pub commits: u64,
    pub log_flushes: u64,
    pub flushes_per_commit: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario      {} (concurrency {})", self.scenario, self.concurrency)?;
        writeln!(f, "ops           {} in {:.3}s", self.ops, self.duration_secs)?;
        writeln!(f, "throughput    {:.1} ops/s", self.throughput)?;
        writeln!(f, "latency       p50 {}us  p95 {}us  p99 {}us", self.p50_us, self.p95_us, self.p99_us)?;
        writeln!(f, "lock waits    {}  mean blocked {:.1}us", self.lock_waits, self.mean_blocked_us)?;
        write!(
            f,
            "log flushes   {} for {} commits ({:.3}/commit)",
            self.log_flushes, self.commits, self.flushes_per_commit
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Default)]
struct Samples {
    latency_us: Vec<u64>,
    blocked_us: Vec<u64>,
}

impl Samples {
    fn merge(&mut self, other: Samples) {
        self.latency_us.extend(other.latency_us);
        self.blocked_us.extend(other.blocked_us);
    }
}

fn open_engine(params: &BenchParams, scenario: Scenario) -> Result<Engine> {
    let config = EngineConfig { lock_timeout: Duration::from_secs(60), ..EngineConfig::default() };
    match &params.data_dir {
        Some(dir) => {
            let dir = dir.join(format!("{scenario}-c{}-s{}", params.concurrency, params.seed));
            if dir.exists() {
                return Err(Error::usage(format!("{} already exists", dir.display())));
            }
            std::fs::create_dir_all(&dir)?;
            Engine::open_dir(dir, config)
        }
        None => {
            let storage = MemStorage::new();
            storage.set_sync_latency(params.sync_latency);
            Engine::open(Arc::new(storage), config)
        }
    }
}

fn payloads(params: &BenchParams) -> Vec<Vec<u8>> {
    let mut rng = StdRng::seed_from_u64(params.seed);
    (0..params.messages).map(|_| (0..params.payload_bytes).map(|_| rng.r#gen::<u8>()).collect()).collect()
}

/// Splits `n` items into `k` nearly equal contiguous chunks.
fn shares(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let k = k.max(1);
    (0..k).map(|i| (n * i / k)..(n * (i + 1) / k)).collect()
}

pub fn run_scenario(scenario: Scenario, params: &BenchParams) -> Result<BenchReport> {
    if params.concurrency == 0 {
        return Err(Error::usage("concurrency must be at least 1"));
    }
    let engine = open_engine(params, scenario)?;
    let result = run_on(&engine, scenario, params);
    let shut = engine.shutdown();
    let report = result?;
    shut?;
    Ok(report)
}

fn run_on(engine: &Engine, scenario: Scenario, params: &BenchParams) -> Result<BenchReport> {
    let data = payloads(params);
    let before = engine.report();
    let started = Instant::now();
    let (ops, samples) = match scenario {
        Scenario::EnqueueCommit => produce(engine, &data, 1)?,
        Scenario::EnqueueCommitGroup => produce(engine, &data, params.concurrency)?,
        Scenario::SerializableDequeueContention => {
            return consume(engine, scenario, params, &data, IsolationMode::Serializable);
        }
        Scenario::ReadPastDequeueScaling => {
            return consume(engine, scenario, params, &data, IsolationMode::ReadPastDequeue);
        }
        Scenario::TriAcidEndToEnd => tri_acid(engine, params, &data)?,
    };
    let elapsed = started.elapsed();
    finish(engine, scenario, params, before, elapsed, ops, samples)
}

fn finish(
    engine: &Engine,
    scenario: Scenario,
    params: &BenchParams,
    before: crate::engine::StatsReport,
    elapsed: Duration,
    ops: u64,
    samples: Samples,
) -> Result<BenchReport> {
    engine.audit().map_err(|e| Error::Failed(format!("audit after {scenario}: {e}")))?;
    let after = engine.report();
    let mut lat = samples.latency_us;
    lat.sort_unstable();
    let secs = elapsed.as_secs_f64().max(1e-9);
    let commits = ops;
    let log_flushes = after.physical_flushes - before.physical_flushes;
    let mean_blocked_us = if samples.blocked_us.is_empty() {
        0.0
    } else {
        samples.blocked_us.iter().sum::<u64>() as f64 / samples.blocked_us.len() as f64
    };
    Ok(BenchReport {
        scenario,
        concurrency: if scenario == Scenario::EnqueueCommit { 1 } else { params.concurrency },
        messages: params.messages,
        payload_bytes: params.payload_bytes,
        seed: params.seed,
        duration_secs: secs,
        ops,
        throughput: ops as f64 / secs,
        p50_us: percentile(&lat, 50.0),
        p95_us: percentile(&lat, 95.0),
        p99_us: percentile(&lat, 99.0),
        lock_waits: after.locks.waits - before.locks.waits,
        mean_blocked_us,
        commits,
        log_flushes,
        flushes_per_commit: if commits == 0 { 0.0 } else { log_flushes as f64 / commits as f64 },
    })
}

/// Each message is its own enqueue-then-commit transaction.
fn produce(engine: &Engine, data: &[Vec<u8>], producers: usize) -> Result<(u64, Samples)> {
    engine.create_queue("bench", Durability::Durable, Ordering::Fifo)?;
    let results: Vec<Result<Samples>> = thread::scope(|s| {
        let handles: Vec<_> = shares(data.len(), producers)
            .into_iter()
            .map(|range| {
                s.spawn(move || {
                    let mut out = Samples::default();
                    for p in &data[range] {
                        let t = Instant::now();
                        engine.enqueue("bench", 0, p)?;
                        out.latency_us.push(t.elapsed().as_micros() as u64);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("producer panicked")).collect()
    });
    let mut samples = Samples::default();
    for r in results {
        samples.merge(r?);
    }
    let depth = engine.stats("bench")?.depth_visible;
    if depth != data.len() as u64 {
        return Err(Error::Failed(format!("{} enqueued, {depth} visible", data.len())));
    }
    Ok((data.len() as u64, samples))
}

/// Drains a pre-filled queue with `concurrency` consumers, each holding its
/// dequeue uncommitted for the simulated work time.
fn consume(
    engine: &Engine,
    scenario: Scenario,
    params: &BenchParams,
    data: &[Vec<u8>],
    isolation: IsolationMode,
) -> Result<BenchReport> {
    engine.create_queue("bench", Durability::Durable, Ordering::Fifo)?;
    let mut expected = HashSet::new();
    for p in data {
        expected.insert(engine.enqueue("bench", 0, p)?);
    }
    let before = engine.report();
    let consumed: Mutex<Vec<MessageId>> = Mutex::new(Vec::with_capacity(data.len()));
    let started = Instant::now();
    let results: Vec<Result<Samples>> = thread::scope(|s| {
        let handles: Vec<_> = (0..params.concurrency)
            .map(|_| {
                let consumed = &consumed;
                s.spawn(move || {
                    let mut out = Samples::default();
                    loop {
                        let t = Instant::now();
                        let mut txn = engine.begin()?;
                        let got = txn.dequeue("bench", isolation, Duration::ZERO)?;
                        out.blocked_us.push(t.elapsed().as_micros() as u64);
                        let Some(m) = got else {
                            txn.abort()?;
                            // read-past may see only rows others hold
                            if engine.stats("bench")?.depth_visible == 0 {
                                return Ok(out);
                            }
                            thread::sleep(Duration::from_millis(1));
                            continue;
                        };
                        thread::sleep(params.work);
                        txn.commit()?;
                        consumed.lock().push(m.id);
                        out.latency_us.push(t.elapsed().as_micros() as u64);
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("consumer panicked")).collect()
    });
    let elapsed = started.elapsed();
    let mut samples = Samples::default();
    for r in results {
        samples.merge(r?);
    }
    let consumed = consumed.into_inner();
    let distinct: HashSet<MessageId> = consumed.iter().copied().collect();
    if consumed.len() != data.len() || distinct != expected {
        return Err(Error::Failed(format!(
            "{} consumed ({} distinct) of {} enqueued",
            consumed.len(),
            distinct.len(),
            data.len()
        )));
    }
    finish(engine, scenario, params, before, elapsed, consumed.len() as u64, samples)
}

/// Clients submit requests to a pool-served queue and await each response
/// on their own reply queue; latency covers all three transactions.
fn tri_acid(engine: &Engine, params: &BenchParams, data: &[Vec<u8>]) -> Result<(u64, Samples)> {
    engine.create_queue("requests", Durability::Durable, Ordering::Fifo)?;
    let work = params.work;
    let mut pool = PoolConfig::new(
        "requests",
        workflow::pool_handler(move |body: &[u8]| {
            thread::sleep(work);
            Ok(body.to_vec())
        }),
    );
    pool.min_servers = 1;
    pool.max_servers = params.concurrency as u32;
    pool.failure_limit = u32::MAX;
    engine.attach_pool(pool)?;
    let clients = shares(data.len(), params.concurrency);
    for i in 0..clients.len() {
        engine.create_queue(&format!("replies.{i}"), Durability::Durable, Ordering::Fifo)?;
    }
    let results: Vec<Result<Samples>> = thread::scope(|s| {
        let handles: Vec<_> = clients
            .into_iter()
            .enumerate()
            .map(|(i, range)| {
                s.spawn(move || {
                    let reply_to = format!("replies.{i}");
                    let mut out = Samples::default();
                    for p in &data[range] {
                        let t = Instant::now();
                        let id = workflow::submit(engine, "requests", &reply_to, p)?;
                        let resp = workflow::await_response(engine, id, &reply_to, Duration::from_secs(60))?;
                        if resp.body != *p {
                            return Err(Error::Failed(format!("request {id}: wrong response body")));
                        }
                        out.latency_us.push(t.elapsed().as_micros() as u64);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client panicked")).collect()
    });
    let mut samples = Samples::default();
    for r in results {
        samples.merge(r?);
    }
    Ok((data.len() as u64, samples))
}

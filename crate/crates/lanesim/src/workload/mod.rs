//! Job descriptions, trace I/O, and synthetic trace generation.
//!
//! A trace is line-delimited JSON, one [`JobSpec`] per line. Traces are kept
//! sorted by `(arrival_time_s, id)`; loading re-sorts, so files may be written
//! in any order.

pub mod catalog;

use std::io::BufRead;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::units::MB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Training,
    Inference,
    Hyperparam,
}

/// One job in a trace. Memory is split into a persistent region (parameters
/// plus framework state, held from admission to completion) and an ephemeral
/// peak (scratch that exists only inside an iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: u64,
    /// Convention: `<model>_<batch>`, e.g. `resnet152_75`. The suffix is used
    /// by throughput reporting; anything without a numeric suffix still runs.
    pub name: String,
    pub arrival_time_s: f64,
    pub persistent_bytes: u64,
    pub ephemeral_bytes: u64,
    /// Duration of one iteration when the job runs alone on the GPU.
    pub iteration_duration_s: f64,
    pub iteration_count: u64,
    /// Fraction of GPU compute the job can use by itself, in (0, 1].
    pub compute_fraction: f64,
    pub kind: JobKind,
}

impl JobSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SimError::Validation(format!("job {}: {msg}", self.id)));
        if self.name.is_empty() {
            return fail("empty name".into());
        }
        if !(self.arrival_time_s.is_finite() && self.arrival_time_s >= 0.0) {
            return fail(format!("arrival_time_s {} must be finite and >= 0", self.arrival_time_s));
        }
        if self.persistent_bytes == 0 {
            return fail("persistent_bytes must be > 0".into());
        }
        if !(self.iteration_duration_s.is_finite() && self.iteration_duration_s > 0.0) {
            return fail(format!(
                "iteration_duration_s {} must be finite and > 0",
                self.iteration_duration_s
            ));
        }
        if self.iteration_count == 0 {
            return fail("iteration_count must be >= 1".into());
        }
        if !(self.compute_fraction > 0.0 && self.compute_fraction <= 1.0) {
            return fail(format!("compute_fraction {} must be in (0, 1]", self.compute_fraction));
        }
        Ok(())
    }

    /// Total bytes the job ever holds at once.
    pub fn footprint_bytes(&self) -> u64 {
        self.persistent_bytes + self.ephemeral_bytes
    }
}

fn sort_trace(jobs: &mut [JobSpec]) {
    jobs.sort_by(|a, b| {
        a.arrival_time_s
            .partial_cmp(&b.arrival_time_s)
            .expect("arrivals are finite after validation")
            .then(a.id.cmp(&b.id))
    });
}

/// Parse a line-delimited JSON trace. Blank lines are allowed; anything else
/// must be a complete job record. Jobs are validated, checked for duplicate
/// ids, and returned sorted by `(arrival_time_s, id)`.
pub fn load_trace(reader: impl BufRead) -> Result<Vec<JobSpec>> {
    let mut jobs: Vec<JobSpec> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let job: JobSpec = serde_json::from_str(trimmed).map_err(|e| SimError::TraceParse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        job.validate().map_err(|e| SimError::TraceParse { line: idx + 1, msg: e.to_string() })?;
        if !seen.insert(job.id) {
            return Err(SimError::DuplicateJobId(job.id));
        }
        jobs.push(job);
    }
    sort_trace(&mut jobs);
    Ok(jobs)
}

/// Render a trace as line-delimited JSON, sorted by `(arrival_time_s, id)` so
/// equal traces always serialize to identical bytes.
pub fn serialize_trace(jobs: &[JobSpec]) -> String {
    let mut sorted = jobs.to_vec();
    sort_trace(&mut sorted);
    let mut out = String::new();
    for job in &sorted {
        out.push_str(&serde_json::to_string(job).expect("job specs serialize"));
        out.push('\n');
    }
    out
}

/// Time to move `bytes` over a link of `bandwidth` bytes per second. This is
/// the cost model for reloading an evicted job's persistent region.
pub fn min_transfer_time(bytes: u64, bandwidth: f64) -> Result<f64> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(SimError::Domain(format!("bandwidth {bandwidth} must be finite and > 0")));
    }
    Ok(bytes as f64 / bandwidth)
}

/// Parameters for the synthetic trace generator. Arrivals are Poisson,
/// iteration counts log-normal (a heavy right tail, so a few jobs run far
/// longer than the median), models drawn uniformly from the catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: u64,
    pub seed: u64,
    pub mean_interarrival_s: f64,
    /// Mean of ln(iteration count).
    pub iters_mu: f64,
    /// Std dev of ln(iteration count).
    pub iters_sigma: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(SimError::Config(msg.to_string()));
        if self.count == 0 {
            return fail("count must be >= 1");
        }
        if !(self.mean_interarrival_s.is_finite() && self.mean_interarrival_s > 0.0) {
            return fail("mean_interarrival_s must be finite and > 0");
        }
        if !self.iters_mu.is_finite() {
            return fail("iters_mu must be finite");
        }
        if !(self.iters_sigma.is_finite() && self.iters_sigma >= 0.0) {
            return fail("iters_sigma must be finite and >= 0");
        }
        if !(self.u_min > 0.0 && self.u_min <= self.u_max && self.u_max <= 1.0) {
            return fail("compute fractions must satisfy 0 < u_min <= u_max <= 1");
        }
        Ok(())
    }

    /// Parse `key=value` pairs separated by commas, e.g.
    /// `count=100,seed=7,mean_interarrival_s=10`. Unspecified keys keep the
    /// defaults from [`SynthConfig::default`].
    pub fn parse(spec: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for part in spec.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("expected key=value, got {part:?}")))?;
            let bad = |e: &dyn std::fmt::Display| {
                SimError::Config(format!("bad value for {key}: {e}"))
            };
            match key.trim() {
                "count" => cfg.count = value.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "mean_interarrival_s" => {
                    cfg.mean_interarrival_s = value.parse().map_err(|e| bad(&e))?
                }
                "iters_mu" => cfg.iters_mu = value.parse().map_err(|e| bad(&e))?,
                "iters_sigma" => cfg.iters_sigma = value.parse().map_err(|e| bad(&e))?,
                "u_min" => cfg.u_min = value.parse().map_err(|e| bad(&e))?,
                "u_max" => cfg.u_max = value.parse().map_err(|e| bad(&e))?,
                other => return Err(SimError::Config(format!("unknown synth key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            mean_interarrival_s: 10.0,
            iters_mu: 4.0,
            iters_sigma: 1.5,
            u_min: 0.5,
            u_max: 1.0,
        }
    }
}

/// Generate a trace from `cfg`. Deterministic for a given config: one ChaCha8
/// stream, and per job exactly four draws in a fixed order (interarrival gap,
/// catalog row, iteration count, compute fraction).
pub fn synth_trace(cfg: &SynthConfig) -> Result<Vec<JobSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gap = Exp::new(1.0 / cfg.mean_interarrival_s)
        .map_err(|e| SimError::Config(format!("interarrival distribution: {e}")))?;
    let iters = LogNormal::new(cfg.iters_mu, cfg.iters_sigma)
        .map_err(|e| SimError::Config(format!("iteration distribution: {e}")))?;
    let entries = catalog::all();

    let mut jobs = Vec::with_capacity(cfg.count as usize);
    let mut t = 0.0;
    for i in 0..cfg.count {
        t += gap.sample(&mut rng);
        let entry = &entries[rng.random_range(0..entries.len())];
        let n = iters.sample(&mut rng).ceil().max(1.0) as u64;
        let u = if cfg.u_min == cfg.u_max {
            let _ = rng.random::<f64>();
            cfg.u_min
        } else {
            rng.random_range(cfg.u_min..=cfg.u_max)
        };
        jobs.push(JobSpec {
            id: i + 1,
            name: format!("{}_{}", entry.name, entry.batch),
            arrival_time_s: t,
            persistent_bytes: entry.persistent_bytes,
            ephemeral_bytes: entry.peak_bytes - entry.persistent_bytes,
            iteration_duration_s: entry.solo_iteration_s,
            iteration_count: n,
            compute_fraction: u,
            kind: JobKind::Training,
        });
    }
    sort_trace(&mut jobs);
    Ok(jobs)
}

/// The consolidation study workload: three inference replicas of every
/// catalog model that has a numeric batch entry, at its smallest batch.
/// Inference iterations carry tiny scratch, so the ephemeral peak is scaled
/// down from the training peak and floored at 8 MB; latency scales roughly
/// with batch, so the solo duration is divided by the same small-batch ratio.
pub fn inference_set() -> Vec<JobSpec> {
    let mut smallest: Vec<&catalog::CatalogEntry> = Vec::new();
    for e in catalog::all() {
        if e.batch.parse::<u64>().is_err() {
            continue;
        }
        match smallest.last() {
            Some(prev) if prev.name == e.name => {}
            _ => smallest.push(e),
        }
    }
    let mut jobs = Vec::new();
    for (m, entry) in smallest.iter().enumerate() {
        let ephemeral = ((entry.peak_bytes - entry.persistent_bytes) / 64).max(8 * MB);
        for r in 0..3 {
            let id = (m * 3 + r + 1) as u64;
            jobs.push(JobSpec {
                id,
                name: format!("{}_{}", entry.name, entry.batch),
                arrival_time_s: 0.0,
                persistent_bytes: entry.persistent_bytes,
                ephemeral_bytes: ephemeral,
                iteration_duration_s: entry.solo_iteration_s / 3.0,
                iteration_count: 1000,
                compute_fraction: 0.1,
                kind: JobKind::Inference,
            });
        }
    }
    jobs
}

/// One step of a progressive allocation schedule: a signed change to a job's
/// footprint, tagged with what kind of memory it touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemType {
    Model,
    Framework,
    Ephemeral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationStep {
    pub delta_bytes: i64,
    pub mem_type: MemType,
    pub sequence_index: u32,
}

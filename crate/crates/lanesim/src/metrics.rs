//! Report computation and CSV rendering.
//!
//! Everything here is derived from the run log alone, never from live engine
//! state, so a report recomputed from a saved log reproduces the original
//! CSVs byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::engine::RunLog;
use crate::error::{Result, SimError};
use crate::lane::{GpuState, Outcome};
use crate::workload::JobSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerJob {
    pub arrival_s: f64,
    pub first_start_s: f64,
    pub completion_s: f64,
    pub jct_s: f64,
    /// Time from arrival to first iteration start.
    pub queuing_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemorySample {
    pub t: f64,
    pub persistent_bytes: u64,
    pub ephemeral_in_use_bytes: u64,
    pub lane_reserved_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputSample {
    pub t: f64,
    pub job: u64,
    pub iterations_done: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub capacity_bytes: u64,
    pub per_job: BTreeMap<u64, PerJob>,
    pub makespan_s: f64,
    pub avg_jct_s: f64,
    pub p95_jct_s: f64,
    pub avg_queuing_s: f64,
    pub memory_timeline: Vec<MemorySample>,
    pub throughput_timeline: Vec<ThroughputSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsolidationResult {
    pub jobs_packed: usize,
    /// One dedicated GPU per job.
    pub gpus_without_sharing: u64,
    /// First-fit across simulated GPUs under the lane admission rules.
    pub gpus_with_sharing: u64,
    pub factor: f64,
}

struct Replay {
    capacity: u64,
    persistent: u64,
    ephemeral: u64,
    lane_sizes: BTreeMap<u64, u64>,
}

impl Replay {
    fn lane_total(&self) -> u64 {
        self.lane_sizes.values().sum()
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.persistent + self.lane_total() > self.capacity {
            return Err(SimError::Validation(format!(
                "log violates the safety sum at t={t}: {} persistent + {} reserved > {} capacity",
                self.persistent,
                self.lane_total(),
                self.capacity
            )));
        }
        if self.ephemeral > self.lane_total() {
            return Err(SimError::Validation(format!(
                "log shows {} ephemeral bytes in use above {} reserved at t={t}",
                self.ephemeral,
                self.lane_total()
            )));
        }
        Ok(())
    }
}

fn detail_u64(rec_detail: &serde_json::Value, key: &str, t: f64) -> Result<u64> {
    rec_detail
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| SimError::Validation(format!("record at t={t} lacks {key}")))
}

/// Rebuild the full report from a run log.
pub fn compute_report(log: &RunLog) -> Result<SimReport> {
    let meta = log
        .records()
        .first()
        .filter(|r| r.kind == "meta")
        .ok_or_else(|| SimError::Validation("log does not start with a meta record".into()))?;
    let policy = meta
        .detail
        .get("policy")
        .and_then(|v| v.as_str())
        .ok_or_else(|| SimError::Validation("meta record lacks policy".into()))?
        .to_string();
    let capacity_bytes = detail_u64(&meta.detail, "capacity_bytes", meta.t)?;

    let mut replay = Replay {
        capacity: capacity_bytes,
        persistent: 0,
        ephemeral: 0,
        lane_sizes: BTreeMap::new(),
    };
    // (persistent, ephemeral) per job as declared at arrival
    let mut mem: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    let mut arrival: BTreeMap<u64, f64> = BTreeMap::new();
    let mut first_start: BTreeMap<u64, f64> = BTreeMap::new();
    let mut completion: BTreeMap<u64, f64> = BTreeMap::new();
    let mut memory_timeline: Vec<MemorySample> = Vec::new();
    let mut throughput_timeline: Vec<ThroughputSample> = Vec::new();

    let job_of = |rec: &crate::engine::LogRecord| -> Result<u64> {
        rec.job
            .ok_or_else(|| SimError::Validation(format!("{} record without job at t={}", rec.kind, rec.t)))
    };
    let lane_of = |rec: &crate::engine::LogRecord| -> Result<u64> {
        rec.lane
            .ok_or_else(|| SimError::Validation(format!("{} record without lane at t={}", rec.kind, rec.t)))
    };

    for rec in log.records().iter().skip(1) {
        match rec.kind.as_str() {
            "arrive" => {
                let job = job_of(rec)?;
                let p = detail_u64(&rec.detail, "persistent_bytes", rec.t)?;
                let e = detail_u64(&rec.detail, "ephemeral_bytes", rec.t)?;
                mem.insert(job, (p, e));
                arrival.insert(job, rec.t);
            }
            "admit" => {
                let job = job_of(rec)?;
                let (p, _) = mem[&job];
                replay.persistent += p;
            }
            "evict" => {
                let job = job_of(rec)?;
                let (p, _) = mem[&job];
                replay.persistent -= p;
            }
            "finish" => {
                let job = job_of(rec)?;
                let (p, _) = mem[&job];
                replay.persistent -= p;
                completion.insert(job, rec.t);
            }
            "iter_start" => {
                let job = job_of(rec)?;
                let (_, e) = mem[&job];
                replay.ephemeral += e;
                first_start.entry(job).or_insert(rec.t);
            }
            "iter_end" => {
                let job = job_of(rec)?;
                let (_, e) = mem[&job];
                replay.ephemeral -= e;
                throughput_timeline.push(ThroughputSample {
                    t: rec.t,
                    job,
                    iterations_done: detail_u64(&rec.detail, "iterations_done", rec.t)?,
                });
            }
            "lane_created" => {
                let lane = lane_of(rec)?;
                let size = detail_u64(&rec.detail, "size_bytes", rec.t)?;
                replay.lane_sizes.insert(lane, size);
            }
            "lane_resized" => {
                let lane = lane_of(rec)?;
                let size = detail_u64(&rec.detail, "size_bytes", rec.t)?;
                replay.lane_sizes.insert(lane, size);
            }
            "lane_deleted" => {
                let lane = lane_of(rec)?;
                replay.lane_sizes.remove(&lane);
            }
            "queued" | "lane_moved" | "meta" => {}
            other => {
                return Err(SimError::Validation(format!("unknown record kind {other}")));
            }
        }
        replay.check(rec.t)?;
        let sample = MemorySample {
            t: rec.t,
            persistent_bytes: replay.persistent,
            ephemeral_in_use_bytes: replay.ephemeral,
            lane_reserved_bytes: replay.lane_total(),
        };
        match memory_timeline.last_mut() {
            Some(last) if last.t == sample.t => *last = sample,
            _ => memory_timeline.push(sample),
        }
    }

    let unfinished: Vec<u64> =
        arrival.keys().filter(|id| !completion.contains_key(id)).copied().collect();
    if !unfinished.is_empty() {
        return Err(SimError::Validation(format!("log is truncated: jobs {unfinished:?} never finish")));
    }

    let mut per_job = BTreeMap::new();
    for (&job, &arr) in &arrival {
        let start = first_start[&job];
        let end = completion[&job];
        per_job.insert(
            job,
            PerJob {
                arrival_s: arr,
                first_start_s: start,
                completion_s: end,
                jct_s: end - arr,
                queuing_s: start - arr,
            },
        );
    }

    let makespan_s = if per_job.is_empty() {
        0.0
    } else {
        let last = completion.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let first = arrival.values().fold(f64::INFINITY, |a, &b| a.min(b));
        last - first
    };
    let n = per_job.len() as f64;
    let avg = |f: fn(&PerJob) -> f64| {
        if per_job.is_empty() {
            0.0
        } else {
            per_job.values().map(f).sum::<f64>() / n
        }
    };
    let avg_jct_s = avg(|j| j.jct_s);
    let avg_queuing_s = avg(|j| j.queuing_s);
    let p95_jct_s = if per_job.is_empty() {
        0.0
    } else {
        percentile_nearest_rank(per_job.values().map(|j| j.jct_s).collect(), 0.95)
    };

    Ok(SimReport {
        policy,
        capacity_bytes,
        per_job,
        makespan_s,
        avg_jct_s,
        p95_jct_s,
        avg_queuing_s,
        memory_timeline,
        throughput_timeline,
    })
}

/// Nearest-rank percentile: the value at rank ⌈q·n⌉ of the sorted sample.
fn percentile_nearest_rank(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.max(1) - 1]
}

/// Cumulative distribution of job completion times: (jct, fraction ≤ jct),
/// one point per distinct value.
pub fn jct_cdf(report: &SimReport) -> Result<Vec<(f64, f64)>> {
    if report.per_job.is_empty() {
        return Err(SimError::Domain("cdf of an empty job set".into()));
    }
    let mut jcts: Vec<f64> = report.per_job.values().map(|j| j.jct_s).collect();
    jcts.sort_by(f64::total_cmp);
    let n = jcts.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in jcts.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// Cumulative iterations of one job over time.
pub fn throughput_series(log: &RunLog, job: u64) -> Vec<(f64, u64)> {
    log.records()
        .iter()
        .filter(|r| r.kind == "iter_end" && r.job == Some(job))
        .filter_map(|r| r.detail.get("iterations_done").and_then(|v| v.as_u64()).map(|n| (r.t, n)))
        .collect()
}

/// How many GPUs the job set needs with and without lane sharing. Jobs are
/// packed first-fit in the given order under the real admission rules.
pub fn consolidation(jobs: &[JobSpec], capacity_bytes: u64) -> Result<ConsolidationResult> {
    let mut gpus: Vec<GpuState> = Vec::new();
    for job in jobs {
        job.validate()?;
        if job.footprint_bytes() > capacity_bytes {
            return Err(SimError::Unschedulable {
                job: job.id,
                needed: job.footprint_bytes(),
                capacity: capacity_bytes,
            });
        }
        let slot = gpus
            .iter()
            .position(|g| g.find_lane(job.persistent_bytes, job.ephemeral_bytes).outcome != Outcome::Queued);
        let gpu = match slot {
            Some(i) => &mut gpus[i],
            None => {
                gpus.push(GpuState::new(capacity_bytes));
                gpus.last_mut().expect("just pushed")
            }
        };
        let d = gpu.job_arrive(job.id, job.persistent_bytes, job.ephemeral_bytes)?;
        debug_assert_ne!(d.outcome, Outcome::Queued, "first-fit checked admissibility");
        gpu.take_events();
    }
    let without = jobs.len() as u64;
    let with = gpus.len() as u64;
    let factor = if with == 0 { 1.0 } else { without as f64 / with as f64 };
    Ok(ConsolidationResult {
        jobs_packed: jobs.len(),
        gpus_without_sharing: without,
        gpus_with_sharing: with,
        factor,
    })
}

// ── CSV rendering ───────────────────────────────────────────────────────────
// Column names and order are a contract with downstream tooling; change them
// and saved artifacts stop lining up.

pub fn summary_csv(report: &SimReport) -> String {
    format!(
        "policy,makespan_s,avg_queuing_s,avg_jct_s,p95_jct_s\n{},{},{},{},{}\n",
        report.policy, report.makespan_s, report.avg_queuing_s, report.avg_jct_s, report.p95_jct_s
    )
}

pub fn jct_cdf_csv(report: &SimReport) -> Result<String> {
    let mut out = String::from("jct_s,fraction\n");
    for (jct, frac) in jct_cdf(report)? {
        out.push_str(&format!("{jct},{frac}\n"));
    }
    Ok(out)
}

pub fn memory_timeline_csv(report: &SimReport) -> String {
    let mut out = String::from("t_s,persistent_bytes,ephemeral_in_use_bytes,lane_reserved_bytes\n");
    for s in &report.memory_timeline {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.t, s.persistent_bytes, s.ephemeral_in_use_bytes, s.lane_reserved_bytes
        ));
    }
    out
}

pub fn throughput_csv(report: &SimReport) -> String {
    let mut out = String::from("t_s,job,iterations_done\n");
    for s in &report.throughput_timeline {
        out.push_str(&format!("{},{},{}\n", s.t, s.job, s.iterations_done));
    }
    out
}

/// Write the four CSV artifacts under `dir`, each through a temp file and an
/// atomic rename so readers never observe partial output.
pub fn write_csvs(dir: &Path, report: &SimReport) -> Result<()> {
    let cdf = if report.per_job.is_empty() {
        String::from("jct_s,fraction\n")
    } else {
        jct_cdf_csv(report)?
    };
    let files = [
        ("summary.csv", summary_csv(report)),
        ("jct_cdf.csv", cdf),
        ("memory_timeline.csv", memory_timeline_csv(report)),
        ("throughput.csv", throughput_csv(report)),
    ];
    for (name, content) in files {
        write_atomic(&dir.join(name), content.as_bytes())?;
    }
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

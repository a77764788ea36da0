//! Deterministic discrete-event simulation loop.
//!
//! Jobs are admitted into lanes through the lane manager, lanes execute one
//! iteration at a time, and the policy picks which resident job runs at each
//! boundary. Event ties are broken by a fixed total order so identical inputs
//! replay to byte-identical logs.

pub mod progressive;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, SimError};
use crate::lane::{GpuState, LaneEvent, Outcome};
use crate::metrics;
use crate::policy::{self, JobProgress, JobState, Policy, ScheduleCtx};
use crate::workload::{self, JobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interference {
    /// Lanes never slow each other down.
    None,
    /// Solo duration × max(1, Σ compute_fraction over concurrently running
    /// jobs). Crude, but it reproduces the two sharing regimes: memory-bound
    /// jobs pack for free, compute-bound jobs serialize.
    Linear,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub capacity_bytes: u64,
    /// Charged when a lane switches which job runs; never charged when the
    /// same job continues or a lane runs its first job.
    pub switch_overhead_s: f64,
    pub interference: Interference,
    /// Bytes per second for persistent-state reload after an eviction.
    pub bandwidth: f64,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            capacity_bytes,
            switch_overhead_s: 0.005,
            interference: Interference::Linear,
            bandwidth: 30e9,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_bytes == 0 {
            return Err(SimError::Config("capacity must be > 0".into()));
        }
        if !(self.switch_overhead_s.is_finite() && self.switch_overhead_s >= 0.0) {
            return Err(SimError::Config("switch overhead must be finite and >= 0".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(SimError::Config("bandwidth must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Duration of one iteration of `job` given every currently running job
/// (`concurrent` includes `job` itself).
pub fn effective_iteration_duration(
    job: &JobSpec,
    concurrent: &[&JobSpec],
    cfg: &EngineConfig,
) -> f64 {
    match cfg.interference {
        Interference::None => job.iteration_duration_s,
        Interference::Linear => {
            let u: f64 = concurrent.iter().map(|j| j.compute_fraction).sum();
            job.iteration_duration_s * u.max(1.0)
        }
    }
}

// ── run log ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<u64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn push(&mut self, rec: LogRecord) {
        self.records.push(rec);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| SimError::TraceParse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub log: RunLog,
    pub report: metrics::SimReport,
}

// ── event queue ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Payload {
    JobFinish { job: u64 },
    LaneMoved { lane: u64 },
    JobArrive { job: u64 },
    IterationEnd { job: u64, lane: u64, service_s: f64 },
}

impl Payload {
    // tie order: JobFinish < LaneMoved < JobArrive < IterationEnd
    fn prio(&self) -> u8 {
        match self {
            Payload::JobFinish { .. } => 0,
            Payload::LaneMoved { .. } => 1,
            Payload::JobArrive { .. } => 2,
            Payload::IterationEnd { .. } => 3,
        }
    }

    fn id(&self) -> u64 {
        match *self {
            Payload::JobFinish { job } => job,
            Payload::LaneMoved { lane } => lane,
            Payload::JobArrive { job } => job,
            Payload::IterationEnd { job, .. } => job,
        }
    }
}

#[derive(Debug, Clone)]
struct HeapEv {
    time: f64,
    seq: u64,
    payload: Payload,
}

impl HeapEv {
    fn key(&self) -> (f64, u8, u64, u64) {
        (self.time, self.payload.prio(), self.payload.id(), self.seq)
    }
}

impl PartialEq for HeapEv {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for HeapEv {}

impl PartialOrd for HeapEv {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEv {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let (t1, p1, i1, s1) = self.key();
        let (t2, p2, i2, s2) = other.key();
        t1.total_cmp(&t2).then(p1.cmp(&p2)).then(i1.cmp(&i2)).then(s1.cmp(&s2))
    }
}

// ── engine ──────────────────────────────────────────────────────────────────

struct Engine<'a> {
    cfg: &'a EngineConfig,
    policy: &'a dyn Policy,
    specs: BTreeMap<u64, JobSpec>,
    progress: BTreeMap<u64, JobProgress>,
    /// Service accrued per job since its lane last changed membership.
    epoch_service: BTreeMap<u64, f64>,
    gpu: GpuState,
    queue: BinaryHeap<Reverse<HeapEv>>,
    seq: u64,
    log: RunLog,
    now: f64,
    /// job → lane for in-flight iterations.
    running: BTreeMap<u64, u64>,
    lane_last_job: BTreeMap<u64, u64>,
    /// Evicted jobs owing a persistent-reload charge at their next start.
    needs_reload: BTreeSet<u64>,
    /// Running eviction victims, displaced at their iteration boundary.
    evict_at_boundary: BTreeSet<u64>,
    /// Exclusive-policy arrival queue; at most one job is ever admitted.
    waiting_exclusive: VecDeque<u64>,
    exclusive_active: Option<u64>,
    finished: BTreeSet<u64>,
}

pub fn run(trace: &[JobSpec], policy: &dyn Policy, cfg: &EngineConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut specs = BTreeMap::new();
    for job in trace {
        job.validate()?;
        if job.footprint_bytes() > cfg.capacity_bytes {
            return Err(SimError::Unschedulable {
                job: job.id,
                needed: job.footprint_bytes(),
                capacity: cfg.capacity_bytes,
            });
        }
        if specs.insert(job.id, job.clone()).is_some() {
            return Err(SimError::DuplicateJobId(job.id));
        }
    }

    let mut eng = Engine {
        cfg,
        policy,
        progress: specs.keys().map(|&id| (id, JobProgress::default())).collect(),
        epoch_service: specs.keys().map(|&id| (id, 0.0)).collect(),
        specs,
        gpu: GpuState::new(cfg.capacity_bytes),
        queue: BinaryHeap::new(),
        seq: 0,
        log: RunLog::default(),
        now: 0.0,
        running: BTreeMap::new(),
        lane_last_job: BTreeMap::new(),
        needs_reload: BTreeSet::new(),
        evict_at_boundary: BTreeSet::new(),
        waiting_exclusive: VecDeque::new(),
        exclusive_active: None,
        finished: BTreeSet::new(),
    };
    eng.log.push(LogRecord {
        t: 0.0,
        kind: "meta".into(),
        job: None,
        lane: None,
        detail: json!({
            "capacity_bytes": cfg.capacity_bytes,
            "policy": policy.name(),
            "switch_overhead_s": cfg.switch_overhead_s,
            "interference": cfg.interference,
            "bandwidth": cfg.bandwidth,
            "seed": cfg.seed,
        }),
    });

    let mut arrivals: Vec<(f64, u64)> =
        eng.specs.values().map(|j| (j.arrival_time_s, j.id)).collect();
    arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, id) in arrivals {
        eng.schedule(t, Payload::JobArrive { job: id });
    }

    eng.event_loop()?;

    if eng.finished.len() != eng.specs.len() {
        return Err(SimError::Contract(format!(
            "run ended with unfinished jobs: {:?}",
            eng.specs.keys().filter(|id| !eng.finished.contains(id)).collect::<Vec<_>>()
        )));
    }
    let report = metrics::compute_report(&eng.log)?;
    Ok(SimOutput { log: eng.log, report })
}

impl Engine<'_> {
    fn schedule(&mut self, time: f64, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(HeapEv { time, seq, payload }));
    }

    fn record(&mut self, kind: &str, job: Option<u64>, lane: Option<u64>, detail: serde_json::Value) {
        self.log.push(LogRecord { t: self.now, kind: kind.into(), job, lane, detail });
    }

    fn event_loop(&mut self) -> Result<()> {
        while let Some(Reverse(ev)) = self.queue.pop() {
            self.now = ev.time;
            match ev.payload {
                Payload::JobArrive { job } => self.on_arrive(job)?,
                Payload::IterationEnd { job, lane, service_s } => {
                    self.on_iteration_end(job, lane, service_s)?
                }
                Payload::JobFinish { job } => self.on_finish(job)?,
                Payload::LaneMoved { .. } => {
                    // Algorithm 1's LaneMoved reaction: reprocess the queue
                    let admissions = self.gpu.process_requests();
                    debug_assert!(admissions.is_empty(), "moves change no sums");
                    self.drain_gpu_events();
                }
            }
            if !self.gpu.check_safety() || !self.gpu.lanes_disjoint() {
                return Err(SimError::Contract(format!(
                    "safety violated at t={} after {:?}",
                    self.now, ev.payload
                )));
            }
            let more_now = self
                .queue
                .peek()
                .is_some_and(|Reverse(next)| next.time == self.now);
            if !more_now {
                // iteration durations are positive, so starts never add
                // events at the current instant
                self.kick_idle_lanes();
            }
        }
        Ok(())
    }

    fn on_arrive(&mut self, job: u64) -> Result<()> {
        let spec = self.specs[&job].clone();
        let detail = serde_json::to_value(&spec).expect("specs serialize");
        self.record("arrive", Some(job), None, detail);
        if self.policy.exclusive() {
            self.waiting_exclusive.push_back(job);
            self.try_start_exclusive()?;
            if self.exclusive_active != Some(job) {
                self.record("queued", Some(job), None, serde_json::Value::Null);
            }
            return Ok(());
        }
        self.gpu.enqueue_pending(job, spec.persistent_bytes, spec.ephemeral_bytes)?;
        if self.policy.preemptive() {
            self.preemptive_admission_pass()?;
        } else {
            self.gpu.process_requests();
            self.drain_gpu_events();
        }
        if self.gpu.pending_jobs().contains(&job) {
            self.record("queued", Some(job), None, serde_json::Value::Null);
        }
        Ok(())
    }

    fn on_iteration_end(&mut self, job: u64, lane: u64, service_s: f64) -> Result<()> {
        self.gpu.set_lane_busy(lane, false);
        self.lane_last_job.insert(lane, job);
        self.running.remove(&job);
        let progress = self.progress.get_mut(&job).expect("known job");
        policy::update_service(progress, service_s)?;
        progress.state = JobState::Admitted;
        let done = progress.iterations_done;
        let total_service = progress.service_time_s;
        *self.epoch_service.entry(job).or_insert(0.0) += service_s;
        self.record(
            "iter_end",
            Some(job),
            Some(lane),
            json!({ "duration_s": service_s, "iterations_done": done, "service_s": total_service }),
        );

        let finished_all = done >= self.specs[&job].iteration_count;
        if finished_all {
            self.evict_at_boundary.remove(&job);
            self.schedule(self.now, Payload::JobFinish { job });
            return Ok(());
        }
        if self.evict_at_boundary.remove(&job) {
            self.evict_now(job)?;
            self.preemptive_admission_pass()?;
        }
        // the lane just went idle: reclaim any hole above it
        if self.gpu.lane(lane).is_some() {
            if let Some(_move) = self.gpu.reclaim_lane(lane) {
                self.drain_gpu_events();
                self.schedule(self.now, Payload::LaneMoved { lane });
            }
        }
        Ok(())
    }

    fn on_finish(&mut self, job: u64) -> Result<()> {
        self.finished.insert(job);
        self.progress.get_mut(&job).expect("known job").state = JobState::Finished;
        let lane = self.gpu.lane_of(job);
        let jct = self.now - self.specs[&job].arrival_time_s;
        self.record("finish", Some(job), lane, json!({ "jct_s": jct }));
        self.gpu.job_finish(job)?;
        self.drain_gpu_events();
        if self.policy.exclusive() {
            if self.exclusive_active == Some(job) {
                self.exclusive_active = None;
            }
            self.try_start_exclusive()?;
        } else if self.policy.preemptive() {
            self.preemptive_admission_pass()?;
        }
        Ok(())
    }

    fn try_start_exclusive(&mut self) -> Result<()> {
        if self.exclusive_active.is_some() {
            return Ok(());
        }
        let Some(job) = self.waiting_exclusive.pop_front() else {
            return Ok(());
        };
        self.exclusive_active = Some(job);
        let spec = &self.specs[&job];
        let d = self.gpu.job_arrive(job, spec.persistent_bytes, spec.ephemeral_bytes)?;
        debug_assert_eq!(d.outcome, Outcome::NewLane, "exclusive admission on an empty GPU");
        self.drain_gpu_events();
        Ok(())
    }

    /// Keep the pending queue priority-sorted, admit whatever fits, and if
    /// the shortest waiting job still does not fit, displace admitted jobs
    /// with strictly longer remaining time.
    fn preemptive_admission_pass(&mut self) -> Result<()> {
        self.sort_pending_by_remaining();
        self.gpu.process_requests();
        self.drain_gpu_events();
        let Some(&head) = self.gpu.pending_jobs().first() else {
            return Ok(());
        };
        self.try_evict_for(head)?;
        Ok(())
    }

    fn sort_pending_by_remaining(&mut self) {
        let specs = &self.specs;
        let progress = &self.progress;
        self.gpu.sort_pending_by_key(|job| {
            let spec = &specs[&job];
            let rem = policy::remaining_time(spec, &progress[&job]).expect("pending jobs unfinished");
            (rem, spec.arrival_time_s, job)
        });
    }

    fn try_evict_for(&mut self, job: u64) -> Result<()> {
        let spec = &self.specs[&job];
        let (p, e) = (spec.persistent_bytes, spec.ephemeral_bytes);
        let my_rem = policy::remaining_time(spec, &self.progress[&job])?;

        // victims: strictly longer remaining time, longest first
        let mut victims: Vec<(f64, f64, u64)> = Vec::new();
        for id in self.gpu.admitted_jobs() {
            if self.evict_at_boundary.contains(&id) || self.finished.contains(&id) {
                continue;
            }
            let vspec = &self.specs[&id];
            let rem = policy::remaining_time(vspec, &self.progress[&id])?;
            if rem > my_rem {
                victims.push((rem, vspec.arrival_time_s, id));
            }
        }
        victims.sort_by(|a, b| b.partial_cmp(a).expect("finite keys"));

        // find the shortest victim prefix that makes the job admissible
        let mut shadow = self.gpu.clone();
        let mut chosen: Vec<u64> = Vec::new();
        if shadow.find_lane(p, e).outcome == Outcome::Queued {
            for &(_, _, id) in &victims {
                shadow.remove_job(id)?;
                chosen.push(id);
                if shadow.find_lane(p, e).outcome != Outcome::Queued {
                    break;
                }
            }
            if shadow.find_lane(p, e).outcome == Outcome::Queued {
                return Ok(()); // no victim set suffices; the job waits
            }
        }

        let mut displaced_now = false;
        for id in chosen {
            if self.running.contains_key(&id) {
                self.evict_at_boundary.insert(id);
            } else {
                self.evict_now(id)?;
                displaced_now = true;
            }
        }
        if displaced_now {
            self.sort_pending_by_remaining();
            self.gpu.process_requests();
            self.drain_gpu_events();
        }
        Ok(())
    }

    /// Remove an idle admitted job from its lane and requeue it; its
    /// persistent state must be reloaded before it next runs.
    fn evict_now(&mut self, job: u64) -> Result<()> {
        let lane = self.gpu.lane_of(job);
        let (p, e) = self.gpu.remove_job(job)?;
        self.drain_gpu_events();
        self.record("evict", Some(job), lane, serde_json::Value::Null);
        self.progress.get_mut(&job).expect("known job").state = JobState::Pending;
        self.needs_reload.insert(job);
        self.gpu.enqueue_pending(job, p, e)?;
        Ok(())
    }

    /// Translate lane-manager events into log records and engine state.
    fn drain_gpu_events(&mut self) {
        for ev in self.gpu.take_events() {
            match ev {
                LaneEvent::Created { lane, size, base } => {
                    self.record(
                        "lane_created",
                        None,
                        Some(lane),
                        json!({ "size_bytes": size, "base_offset": base }),
                    );
                }
                LaneEvent::Resized { lane, size, base } => {
                    self.record(
                        "lane_resized",
                        None,
                        Some(lane),
                        json!({ "size_bytes": size, "base_offset": base }),
                    );
                }
                LaneEvent::Moved { lane, from, to } => {
                    self.record("lane_moved", None, Some(lane), json!({ "from": from, "to": to }));
                }
                LaneEvent::Deleted { lane } => {
                    self.record("lane_deleted", None, Some(lane), serde_json::Value::Null);
                    self.lane_last_job.remove(&lane);
                }
                LaneEvent::Admitted { job, lane, outcome } => {
                    let outcome = match outcome {
                        Outcome::NewLane => "new_lane",
                        Outcome::ExistingLane => "existing_lane",
                        Outcome::ReplacedLane => "replaced_lane",
                        Outcome::Queued => unreachable!("queued is not an admission"),
                    };
                    self.record("admit", Some(job), Some(lane), json!({ "outcome": outcome }));
                    self.progress.get_mut(&job).expect("known job").state = JobState::Admitted;
                    self.reset_epoch(lane);
                }
                LaneEvent::Departed { job: _, lane } => {
                    self.reset_epoch(lane);
                }
            }
        }
    }

    /// Lane membership changed: service equalization starts a fresh epoch.
    fn reset_epoch(&mut self, lane: u64) {
        if let Some(lane) = self.gpu.lane(lane) {
            for job in lane.resident.clone() {
                self.epoch_service.insert(job, 0.0);
            }
        }
    }

    /// Start the next iteration on every idle lane. Selection happens for all
    /// lanes first, then durations are computed against the full post-start
    /// running set, so simultaneous starts see each other symmetrically.
    fn kick_idle_lanes(&mut self) {
        let idle: Vec<(u64, Vec<u64>)> = self
            .gpu
            .lanes()
            .filter(|l| !l.busy)
            .map(|l| (l.id, l.resident.clone()))
            .collect();

        let mut starts: Vec<(u64, u64)> = Vec::new();
        {
            let ctx = ScheduleCtx {
                specs: &self.specs,
                progress: &self.progress,
                epoch_service: &self.epoch_service,
                now: self.now,
            };
            for (lane, resident) in idle {
                let candidates: Vec<u64> = resident
                    .into_iter()
                    .filter(|j| {
                        self.progress[j].state == JobState::Admitted
                            && self.progress[j].iterations_done < self.specs[j].iteration_count
                            && !self.evict_at_boundary.contains(j)
                    })
                    .collect();
                if let Some(job) = self.policy.select_next(&candidates, &ctx) {
                    starts.push((lane, job));
                }
            }
        }

        let timed: Vec<(u64, u64, f64)> = {
            let concurrent: Vec<u64> = self
                .running
                .keys()
                .copied()
                .chain(starts.iter().map(|&(_, j)| j))
                .collect();
            let concurrent_specs: Vec<&JobSpec> =
                concurrent.iter().map(|j| &self.specs[j]).collect();
            starts
                .iter()
                .map(|&(lane, job)| {
                    let d = effective_iteration_duration(
                        &self.specs[&job],
                        &concurrent_specs,
                        self.cfg,
                    );
                    (lane, job, d)
                })
                .collect()
        };

        for (lane, job, duration) in timed {
            let mut overhead = match self.lane_last_job.get(&lane) {
                Some(&prev) if prev != job => self.cfg.switch_overhead_s,
                _ => 0.0,
            };
            if self.needs_reload.remove(&job) {
                let p = self.specs[&job].persistent_bytes;
                overhead += workload::min_transfer_time(p, self.cfg.bandwidth)
                    .expect("bandwidth validated");
            }
            self.gpu.set_lane_busy(lane, true);
            self.running.insert(job, lane);
            self.progress.get_mut(&job).expect("known job").state = JobState::Running;
            self.record(
                "iter_start",
                Some(job),
                Some(lane),
                json!({ "duration_s": duration, "overhead_s": overhead }),
            );
            self.schedule(
                self.now + overhead + duration,
                Payload::IterationEnd { job, lane, service_s: duration },
            );
        }
    }
}

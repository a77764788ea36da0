//! Scheduling policies behind a common trait, registered by name and chosen
//! at runtime. A policy answers two questions: how admission behaves
//! (exclusive / preemptive flags consumed by the engine) and which resident
//! job a lane runs at each iteration boundary.

use std::collections::BTreeMap;

use crate::error::{Result, SimError};
use crate::workload::JobSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Admitted,
    Running,
    Finished,
}

#[derive(Debug, Clone, Copy)]
pub struct JobProgress {
    pub iterations_done: u64,
    /// Lane-occupancy seconds accumulated over the whole run (excludes
    /// switch and reload overhead).
    pub service_time_s: f64,
    pub state: JobState,
}

impl Default for JobProgress {
    fn default() -> Self {
        Self { iterations_done: 0, service_time_s: 0.0, state: JobState::Pending }
    }
}

/// Solo time left: (iterations remaining) × solo iteration duration.
/// Contention is ignored on purpose; priorities assume known solo durations.
pub fn remaining_time(spec: &JobSpec, progress: &JobProgress) -> Result<f64> {
    if progress.iterations_done >= spec.iteration_count {
        return Err(SimError::Domain(format!("job {} has no remaining iterations", spec.id)));
    }
    Ok((spec.iteration_count - progress.iterations_done) as f64 * spec.iteration_duration_s)
}

/// Account one finished iteration: service grows by the elapsed lane time.
pub fn update_service(progress: &mut JobProgress, elapsed: f64) -> Result<()> {
    if !(elapsed.is_finite() && elapsed >= 0.0) {
        return Err(SimError::Domain(format!("elapsed {elapsed} must be finite and >= 0")));
    }
    progress.service_time_s += elapsed;
    progress.iterations_done += 1;
    Ok(())
}

/// Read-only view the engine hands to `select_next`.
pub struct ScheduleCtx<'a> {
    pub specs: &'a BTreeMap<u64, JobSpec>,
    pub progress: &'a BTreeMap<u64, JobProgress>,
    /// Service seconds accrued since the job's lane last changed membership.
    /// FAIR equalizes these, so a late joiner does not monopolize the lane
    /// while it catches up on service it never shared.
    pub epoch_service: &'a BTreeMap<u64, f64>,
    pub now: f64,
}

impl ScheduleCtx<'_> {
    fn arrival_id(&self, job: u64) -> (f64, u64) {
        (self.specs[&job].arrival_time_s, job)
    }
}

pub trait Policy {
    fn name(&self) -> &'static str;

    /// Whole-GPU occupancy, one job at a time (the no-sharing baseline).
    fn exclusive(&self) -> bool {
        false
    }

    /// May displace admitted lower-priority jobs to admit a shorter one.
    fn preemptive(&self) -> bool {
        false
    }

    /// Choose which of a lane's unfinished resident jobs runs next;
    /// `None` idles the lane. Ties break by (arrival_time, job id).
    fn select_next(&self, candidates: &[u64], ctx: &ScheduleCtx) -> Option<u64>;
}

fn min_by_key<K: PartialOrd>(candidates: &[u64], key: impl Fn(u64) -> K) -> Option<u64> {
    candidates
        .iter()
        .copied()
        .min_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("selection keys are finite"))
}

/// One job owns the GPU until it finishes; arrival order.
pub struct Fifo;

impl Policy for Fifo {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn exclusive(&self) -> bool {
        true
    }

    fn select_next(&self, candidates: &[u64], ctx: &ScheduleCtx) -> Option<u64> {
        min_by_key(candidates, |j| ctx.arrival_id(j))
    }
}

/// Shortest remaining (solo) time first; preemption happens only at
/// iteration boundaries, eviction only when admission demands it.
pub struct Srtf;

impl Policy for Srtf {
    fn name(&self) -> &'static str {
        "srtf"
    }

    fn preemptive(&self) -> bool {
        true
    }

    fn select_next(&self, candidates: &[u64], ctx: &ScheduleCtx) -> Option<u64> {
        min_by_key(candidates, |j| {
            let rem = remaining_time(&ctx.specs[&j], &ctx.progress[&j])
                .expect("candidates are unfinished");
            let (arr, id) = ctx.arrival_id(j);
            (rem, arr, id)
        })
    }
}

/// Greedy admission under the safety condition; arrival order within a lane.
/// The packing effect comes entirely from admission.
pub struct Pack;

impl Policy for Pack {
    fn name(&self) -> &'static str {
        "pack"
    }

    fn select_next(&self, candidates: &[u64], ctx: &ScheduleCtx) -> Option<u64> {
        min_by_key(candidates, |j| ctx.arrival_id(j))
    }
}

/// Least service within the lane's current sharing epoch.
pub struct Fair;

impl Policy for Fair {
    fn name(&self) -> &'static str {
        "fair"
    }

    fn select_next(&self, candidates: &[u64], ctx: &ScheduleCtx) -> Option<u64> {
        min_by_key(candidates, |j| {
            let svc = ctx.epoch_service.get(&j).copied().unwrap_or(0.0);
            let (arr, id) = ctx.arrival_id(j);
            (svc, arr, id)
        })
    }
}

pub fn names() -> &'static [&'static str] {
    &["fifo", "srtf", "pack", "fair"]
}

pub fn by_name(name: &str) -> Result<Box<dyn Policy>> {
    match name {
        "fifo" => Ok(Box::new(Fifo)),
        "srtf" => Ok(Box::new(Srtf)),
        "pack" => Ok(Box::new(Pack)),
        "fair" => Ok(Box::new(Fair)),
        other => Err(SimError::Config(format!(
            "unknown policy {other:?}; expected one of: {}",
            names().join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::JobKind;

    fn spec(id: u64, arrival: f64, iters: u64, iter_s: f64) -> JobSpec {
        JobSpec {
            id,
            name: format!("job_{id}"),
            arrival_time_s: arrival,
            persistent_bytes: 1,
            ephemeral_bytes: 0,
            iteration_duration_s: iter_s,
            iteration_count: iters,
            compute_fraction: 1.0,
            kind: JobKind::Training,
        }
    }

    struct Fixture {
        specs: BTreeMap<u64, JobSpec>,
        progress: BTreeMap<u64, JobProgress>,
        epoch: BTreeMap<u64, f64>,
    }

    impl Fixture {
        fn ctx(&self) -> ScheduleCtx<'_> {
            ScheduleCtx {
                specs: &self.specs,
                progress: &self.progress,
                epoch_service: &self.epoch,
                now: 0.0,
            }
        }
    }

    fn fixture(jobs: &[(u64, f64, u64, f64)]) -> Fixture {
        let mut specs = BTreeMap::new();
        let mut progress = BTreeMap::new();
        let mut epoch = BTreeMap::new();
        for &(id, arrival, iters, iter_s) in jobs {
            specs.insert(id, spec(id, arrival, iters, iter_s));
            progress.insert(id, JobProgress::default());
            epoch.insert(id, 0.0);
        }
        Fixture { specs, progress, epoch }
    }

    #[test]
    fn registry_resolves_every_name() {
        for &name in names() {
            assert_eq!(by_name(name).unwrap().name(), name);
        }
        let err = match by_name("bogus") {
            Err(e) => e.to_string(),
            Ok(_) => panic!("bogus policy accepted"),
        };
        for &name in names() {
            assert!(err.contains(name), "error should list {name}: {err}");
        }
        assert!(by_name("fifo").unwrap().exclusive());
        assert!(by_name("srtf").unwrap().preemptive());
        assert!(!by_name("pack").unwrap().exclusive());
        assert!(!by_name("fair").unwrap().preemptive());
    }

    #[test]
    fn remaining_time_arithmetic() {
        let s = spec(1, 0.0, 100, 0.5);
        let mut p = JobProgress::default();
        assert_eq!(remaining_time(&s, &p).unwrap(), 50.0);
        p.iterations_done = 60;
        assert_eq!(remaining_time(&s, &p).unwrap(), 20.0);
        p.iterations_done = 100;
        assert!(remaining_time(&s, &p).is_err());
    }

    #[test]
    fn update_service_accumulates() {
        let mut p = JobProgress::default();
        update_service(&mut p, 0.5).unwrap();
        assert_eq!(p.service_time_s, 0.5);
        assert_eq!(p.iterations_done, 1);
        assert!(update_service(&mut p, -0.1).is_err());
        assert!(update_service(&mut p, f64::NAN).is_err());
    }

    #[test]
    fn srtf_picks_least_remaining() {
        // A: 100 s remaining, B: 30 s remaining → B
        let f = fixture(&[(1, 0.0, 100, 1.0), (2, 5.0, 30, 1.0)]);
        let p = Srtf;
        assert_eq!(p.select_next(&[1, 2], &f.ctx()), Some(2));
        // remaining ties break by arrival
        let f = fixture(&[(1, 3.0, 30, 1.0), (2, 5.0, 30, 1.0)]);
        assert_eq!(p.select_next(&[1, 2], &f.ctx()), Some(1));
        assert_eq!(p.select_next(&[], &f.ctx()), None);
    }

    #[test]
    fn fair_picks_least_epoch_service() {
        // service {A: 10, B: 4} → B
        let mut f = fixture(&[(1, 0.0, 100, 1.0), (2, 5.0, 100, 1.0)]);
        f.epoch.insert(1, 10.0);
        f.epoch.insert(2, 4.0);
        assert_eq!(Fair.select_next(&[1, 2], &f.ctx()), Some(2));
        // equal service → earlier arrival
        f.epoch.insert(2, 10.0);
        assert_eq!(Fair.select_next(&[1, 2], &f.ctx()), Some(1));
    }

    #[test]
    fn fifo_and_pack_run_in_arrival_order() {
        let f = fixture(&[(3, 2.0, 10, 1.0), (7, 1.0, 10, 1.0), (9, 2.0, 10, 1.0)]);
        assert_eq!(Fifo.select_next(&[3, 7, 9], &f.ctx()), Some(7));
        assert_eq!(Pack.select_next(&[3, 9], &f.ctx()), Some(3));
    }
}

//! Progressive allocation mode.
//!
//! Instead of reserving a job's whole footprint up front, jobs grow their
//! memory step by step, the way framework allocators actually behave. With a
//! shared free pool this admits a classic incremental-allocation deadlock:
//! everyone holds a partial footprint and nobody's next request fits. With
//! lanes enabled the peak is reserved at admission, so admitted jobs always
//! finish.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::error::{Result, SimError};
use crate::lane::GpuState;
use crate::workload::{AllocationStep, MemType};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressiveJob {
    pub id: u64,
    pub steps: Vec<AllocationStep>,
}

impl ProgressiveJob {
    /// Total persistent footprint (model plus framework state).
    pub fn persistent_bytes(&self) -> u64 {
        self.steps
            .iter()
            .filter(|s| s.mem_type != MemType::Ephemeral)
            .map(|s| s.delta_bytes as u64)
            .sum()
    }

    /// Peak of the running ephemeral sum.
    pub fn peak_ephemeral_bytes(&self) -> u64 {
        let mut sum: i64 = 0;
        let mut peak: i64 = 0;
        for s in self.steps.iter().filter(|s| s.mem_type == MemType::Ephemeral) {
            sum += s.delta_bytes;
            peak = peak.max(sum);
        }
        peak as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(SimError::Validation(format!("job {} has no steps", self.id)));
        }
        let mut seen_ephemeral = false;
        let mut eph_sum: i64 = 0;
        for (idx, step) in self.steps.iter().enumerate() {
            if step.sequence_index as usize != idx {
                return Err(SimError::Validation(format!(
                    "job {}: step {} has sequence_index {}",
                    self.id, idx, step.sequence_index
                )));
            }
            match step.mem_type {
                MemType::Model | MemType::Framework => {
                    if seen_ephemeral {
                        return Err(SimError::Validation(format!(
                            "job {}: persistent allocation after ephemeral traffic",
                            self.id
                        )));
                    }
                    if step.delta_bytes <= 0 {
                        return Err(SimError::Validation(format!(
                            "job {}: persistent deltas must be positive",
                            self.id
                        )));
                    }
                }
                MemType::Ephemeral => {
                    seen_ephemeral = true;
                    eph_sum += step.delta_bytes;
                    if eph_sum < 0 {
                        return Err(SimError::Validation(format!(
                            "job {}: ephemeral balance goes negative",
                            self.id
                        )));
                    }
                }
            }
        }
        if eph_sum != 0 {
            return Err(SimError::Validation(format!(
                "job {}: ephemeral allocations never fully released ({} bytes leak)",
                self.id, eph_sum
            )));
        }
        if self.persistent_bytes() == 0 {
            return Err(SimError::Validation(format!(
                "job {} allocates no persistent memory",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub deadlocked: bool,
    /// (job id, blocked request in bytes), ascending job id.
    pub blocked_jobs: Vec<(u64, u64)>,
    pub free_bytes: u64,
}

/// A pool is deadlocked when every unfinished job is blocked and each blocked
/// request is strictly larger than the free pool. A request equal to the free
/// pool is grantable, so it does not count as blocked.
pub fn detect_deadlock(blocked: &[(u64, u64)], unfinished: usize, free_bytes: u64) -> bool {
    unfinished > 0
        && blocked.len() == unfinished
        && blocked.iter().all(|&(_, req)| req > free_bytes)
}

/// Drive every job to completion or to a blocked state. Jobs take turns in
/// ascending id order, one allocation step per turn.
pub fn run_progressive(
    jobs: &[ProgressiveJob],
    capacity_bytes: u64,
    lanes_enabled: bool,
) -> Result<DeadlockReport> {
    let mut ids = BTreeMap::new();
    for job in jobs {
        job.validate()?;
        if ids.insert(job.id, job).is_some() {
            return Err(SimError::DuplicateJobId(job.id));
        }
    }
    if lanes_enabled {
        run_with_lanes(&ids, capacity_bytes)
    } else {
        run_pooled(&ids, capacity_bytes)
    }
}

fn run_pooled(jobs: &BTreeMap<u64, &ProgressiveJob>, capacity_bytes: u64) -> Result<DeadlockReport> {
    let mut free = capacity_bytes;
    let mut cursor: BTreeMap<u64, usize> = jobs.keys().map(|&id| (id, 0)).collect();
    let mut held: BTreeMap<u64, u64> = jobs.keys().map(|&id| (id, 0)).collect();

    loop {
        let mut progressed = false;
        let mut blocked: Vec<(u64, u64)> = Vec::new();
        for (&id, job) in jobs {
            let Some(&at) = cursor.get(&id) else { continue };
            let step = &job.steps[at];
            if step.delta_bytes >= 0 {
                let need = step.delta_bytes as u64;
                if need > free {
                    blocked.push((id, need));
                    continue;
                }
                free -= need;
                *held.get_mut(&id).expect("tracked job") += need;
            } else {
                let give = (-step.delta_bytes) as u64;
                debug_assert!(held[&id] >= give, "validated sequences never over-release");
                free += give;
                *held.get_mut(&id).expect("tracked job") -= give;
            }
            progressed = true;
            if at + 1 == job.steps.len() {
                // job done: everything it still holds is released at exit
                free += held[&id];
                held.insert(id, 0);
                cursor.remove(&id);
            } else {
                cursor.insert(id, at + 1);
            }
        }
        if cursor.is_empty() {
            debug_assert_eq!(free, capacity_bytes);
            return Ok(DeadlockReport { deadlocked: false, blocked_jobs: Vec::new(), free_bytes: free });
        }
        if !progressed {
            let deadlocked = detect_deadlock(&blocked, cursor.len(), free);
            debug_assert!(deadlocked, "no progress implies every request exceeds free");
            return Ok(DeadlockReport { deadlocked, blocked_jobs: blocked, free_bytes: free });
        }
    }
}

fn run_with_lanes(jobs: &BTreeMap<u64, &ProgressiveJob>, capacity_bytes: u64) -> Result<DeadlockReport> {
    let mut gpu = GpuState::new(capacity_bytes);
    for (&id, job) in jobs {
        gpu.enqueue_pending(id, job.persistent_bytes(), job.peak_ephemeral_bytes())?;
    }
    gpu.process_requests();
    gpu.take_events();

    let mut unfinished = jobs.len();
    while unfinished > 0 {
        let Some(&id) = gpu.admitted_jobs().first() else {
            return Err(SimError::Contract(
                "no admissible job although work remains".into(),
            ));
        };
        // every step fits inside the lane reservation by construction
        let job = jobs[&id];
        let mut eph: i64 = 0;
        for step in job.steps.iter().filter(|s| s.mem_type == MemType::Ephemeral) {
            eph += step.delta_bytes;
            debug_assert!(eph as u64 <= job.peak_ephemeral_bytes());
        }
        gpu.job_finish(id)?;
        gpu.take_events();
        unfinished -= 1;
    }
    debug_assert_eq!(gpu.free_bytes(), capacity_bytes);
    Ok(DeadlockReport { deadlocked: false, blocked_jobs: Vec::new(), free_bytes: capacity_bytes })
}

/// Two identical jobs, each growing to 3 units of scratch on top of 1 unit of
/// model state. At 12 units of capacity the shared pool wedges with both jobs
/// waiting on a 3-unit request against 2 free units.
pub fn demo_scenario(unit: u64) -> Vec<ProgressiveJob> {
    let u = unit as i64;
    (1..=2)
        .map(|id| ProgressiveJob {
            id,
            steps: vec![
                AllocationStep { delta_bytes: u, mem_type: MemType::Model, sequence_index: 0 },
                AllocationStep { delta_bytes: 2 * u, mem_type: MemType::Ephemeral, sequence_index: 1 },
                AllocationStep { delta_bytes: 2 * u, mem_type: MemType::Ephemeral, sequence_index: 2 },
                AllocationStep { delta_bytes: 3 * u, mem_type: MemType::Ephemeral, sequence_index: 3 },
                AllocationStep { delta_bytes: -7 * u, mem_type: MemType::Ephemeral, sequence_index: 4 },
            ],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GB;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn demo_pool_wedges_at_twelve_units() {
        let report = run_progressive(&demo_scenario(GB), 12 * GB, false).unwrap();
        assert!(report.deadlocked);
        assert_eq!(report.free_bytes, 2 * GB);
        assert_eq!(report.blocked_jobs, vec![(1, 3 * GB), (2, 3 * GB)]);
    }

    #[test]
    fn demo_lanes_complete_at_twelve_units() {
        let report = run_progressive(&demo_scenario(GB), 12 * GB, true).unwrap();
        assert!(!report.deadlocked);
        assert!(report.blocked_jobs.is_empty());
        assert_eq!(report.free_bytes, 12 * GB);
    }

    #[test]
    fn demo_pool_completes_with_headroom() {
        let report = run_progressive(&demo_scenario(GB), 32 * GB, false).unwrap();
        assert!(!report.deadlocked);
        assert_eq!(report.free_bytes, 32 * GB);
    }

    #[test]
    fn request_equal_to_free_pool_is_grantable() {
        // one job whose last growth step exactly matches the leftover pool
        let jobs = vec![ProgressiveJob {
            id: 1,
            steps: vec![
                AllocationStep { delta_bytes: 2, mem_type: MemType::Model, sequence_index: 0 },
                AllocationStep { delta_bytes: 10, mem_type: MemType::Ephemeral, sequence_index: 1 },
                AllocationStep { delta_bytes: -10, mem_type: MemType::Ephemeral, sequence_index: 2 },
            ],
        }];
        let report = run_progressive(&jobs, 12, false).unwrap();
        assert!(!report.deadlocked);
        assert!(!detect_deadlock(&[(1, 5)], 1, 5), "request == free is grantable");
        assert!(detect_deadlock(&[(1, 6)], 1, 5));
        assert!(!detect_deadlock(&[(1, 6)], 2, 5), "a runnable job breaks the deadlock");
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let model = |d| AllocationStep { delta_bytes: d, mem_type: MemType::Model, sequence_index: 0 };
        // leaks ephemeral memory
        let leak = ProgressiveJob {
            id: 1,
            steps: vec![
                model(1),
                AllocationStep { delta_bytes: 5, mem_type: MemType::Ephemeral, sequence_index: 1 },
            ],
        };
        assert!(leak.validate().is_err());
        // over-releases
        let over = ProgressiveJob {
            id: 1,
            steps: vec![
                model(1),
                AllocationStep { delta_bytes: -1, mem_type: MemType::Ephemeral, sequence_index: 1 },
                AllocationStep { delta_bytes: 1, mem_type: MemType::Ephemeral, sequence_index: 2 },
            ],
        };
        assert!(over.validate().is_err());
        // persistent growth after scratch traffic
        let late = ProgressiveJob {
            id: 1,
            steps: vec![
                model(1),
                AllocationStep { delta_bytes: 2, mem_type: MemType::Ephemeral, sequence_index: 1 },
                AllocationStep { delta_bytes: -2, mem_type: MemType::Ephemeral, sequence_index: 2 },
                AllocationStep { delta_bytes: 1, mem_type: MemType::Framework, sequence_index: 3 },
            ],
        };
        assert!(late.validate().is_err());
        // bad sequence numbering
        let missequenced = ProgressiveJob { id: 1, steps: vec![model(1), model(1)] };
        assert!(missequenced.validate().is_err());
    }

    #[test]
    fn random_scenarios_with_lanes_never_deadlock() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..200 {
            let capacity: u64 = rng.random_range(8..=64);
            let njobs = rng.random_range(1..=5);
            let mut jobs = Vec::new();
            for id in 1..=njobs {
                let persistent = rng.random_range(1..=2u64);
                let peak = rng.random_range(1..=(capacity - persistent).min(6));
                let mut steps = vec![AllocationStep {
                    delta_bytes: persistent as i64,
                    mem_type: MemType::Model,
                    sequence_index: 0,
                }];
                // climb to the peak in random increments, then release all
                let mut climbed = 0;
                while climbed < peak {
                    let inc = rng.random_range(1..=peak - climbed);
                    steps.push(AllocationStep {
                        delta_bytes: inc as i64,
                        mem_type: MemType::Ephemeral,
                        sequence_index: steps.len() as u32,
                    });
                    climbed += inc;
                }
                steps.push(AllocationStep {
                    delta_bytes: -(peak as i64),
                    mem_type: MemType::Ephemeral,
                    sequence_index: steps.len() as u32,
                });
                jobs.push(ProgressiveJob { id, steps });
            }
            let report = run_progressive(&jobs, capacity, true).unwrap();
            assert!(!report.deadlocked, "round {round} deadlocked with lanes");
            assert_eq!(report.free_bytes, capacity);
            // pooled mode on the same scenario must terminate either way
            run_progressive(&jobs, capacity, false).unwrap();
        }
    }
}

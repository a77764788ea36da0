//! Two-region GPU memory model and lane assignment.
//!
//! Memory splits into a persistent region growing up from offset 0 (model and
//! framework state, tracked as a running total) and ephemeral lanes growing
//! down from capacity. A lane is a reserved interval sized to the largest
//! ephemeral peak among its resident jobs; iteration execution is serialized
//! within a lane and parallel across lanes. Every public operation preserves
//! the safety condition
//!
//! ```text
//! persistent_total + Σ lane sizes ≤ capacity
//! ```
//!
//! so a resident job can always materialize its ephemeral peak inside its own
//! lane without touching anyone else's bytes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    NewLane,
    ExistingLane,
    ReplacedLane,
    Queued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneDecision {
    pub outcome: Outcome,
    /// Concrete lane for admissions; `None` when queued, and also `None` on a
    /// pure `find_lane` new-lane answer (the lane does not exist yet).
    pub lane_id: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub id: u64,
    pub size_bytes: u64,
    /// Lowest address of the reserved interval [base, base + size).
    pub base_offset: u64,
    /// Resident job ids in admission order; the ref count is the length.
    pub resident: Vec<u64>,
    /// True while an iteration is in flight in this lane.
    pub busy: bool,
}

impl Lane {
    pub fn ref_count(&self) -> usize {
        self.resident.len()
    }

    fn top(&self) -> u64 {
        self.base_offset + self.size_bytes
    }
}

/// State changes emitted by operations, drained by the engine for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneEvent {
    Created { lane: u64, size: u64, base: u64 },
    Resized { lane: u64, size: u64, base: u64 },
    Moved { lane: u64, from: u64, to: u64 },
    Deleted { lane: u64 },
    Admitted { job: u64, lane: u64, outcome: Outcome },
    Departed { job: u64, lane: u64 },
}

#[derive(Debug, Clone, Copy)]
struct JobMem {
    p: u64,
    e: u64,
    lane: u64,
}

#[derive(Debug, Clone)]
pub struct GpuState {
    capacity: u64,
    persistent_total: u64,
    lanes: BTreeMap<u64, Lane>,
    jobs: BTreeMap<u64, JobMem>,
    pending: VecDeque<(u64, u64, u64)>,
    next_lane_id: u64,
    events: Vec<LaneEvent>,
}

impl GpuState {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            persistent_total: 0,
            lanes: BTreeMap::new(),
            jobs: BTreeMap::new(),
            pending: VecDeque::new(),
            next_lane_id: 0,
            events: Vec::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn persistent_total(&self) -> u64 {
        self.persistent_total
    }

    pub fn lane_reserved_total(&self) -> u64 {
        self.lanes.values().map(|l| l.size_bytes).sum()
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity - self.persistent_total - self.lane_reserved_total()
    }

    pub fn lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.values()
    }

    pub fn lane(&self, id: u64) -> Option<&Lane> {
        self.lanes.get(&id)
    }

    pub fn lane_of(&self, job: u64) -> Option<u64> {
        self.jobs.get(&job).map(|m| m.lane)
    }

    /// (persistent, ephemeral) bytes of an admitted job.
    pub fn job_mem(&self, job: u64) -> Option<(u64, u64)> {
        self.jobs.get(&job).map(|m| (m.p, m.e))
    }

    pub fn admitted_jobs(&self) -> Vec<u64> {
        self.jobs.keys().copied().collect()
    }

    pub fn pending_jobs(&self) -> Vec<u64> {
        self.pending.iter().map(|&(id, _, _)| id).collect()
    }

    pub fn set_lane_busy(&mut self, lane: u64, busy: bool) {
        self.lanes.get_mut(&lane).expect("known lane").busy = busy;
    }

    pub fn take_events(&mut self) -> Vec<LaneEvent> {
        std::mem::take(&mut self.events)
    }

    /// Pure three-branch lane assignment. Never mutates; admissions go
    /// through [`GpuState::job_arrive`] or [`GpuState::process_requests`].
    ///
    /// 1. Open a fresh lane when ΣP + P + ΣL + E ≤ C.
    /// 2. Join the best-match existing lane: the smallest lane with L ≥ E
    ///    (lowest id on ties), provided ΣP + P + ΣL ≤ C so the persistent
    ///    bytes still fit.
    /// 3. Grow a lane: scanning in ascending (size, id), the first lane with
    ///    L < E whose replacement keeps ΣP + P + ΣL − L + E ≤ C.
    ///
    /// Otherwise the request queues.
    pub fn find_lane(&self, p: u64, e: u64) -> LaneDecision {
        let lane_sum = self.lane_reserved_total();
        if self.persistent_total + p + lane_sum + e <= self.capacity {
            return LaneDecision { outcome: Outcome::NewLane, lane_id: None };
        }
        if self.persistent_total + p + lane_sum <= self.capacity {
            let best = self
                .lanes
                .values()
                .filter(|l| l.size_bytes >= e)
                .min_by_key(|l| (l.size_bytes, l.id));
            if let Some(lane) = best {
                return LaneDecision { outcome: Outcome::ExistingLane, lane_id: Some(lane.id) };
            }
        }
        let mut order: Vec<(u64, u64)> =
            self.lanes.values().map(|l| (l.size_bytes, l.id)).collect();
        order.sort_unstable();
        for (size, id) in order {
            if size < e && self.persistent_total + p + lane_sum - size + e <= self.capacity {
                return LaneDecision { outcome: Outcome::ReplacedLane, lane_id: Some(id) };
            }
        }
        LaneDecision { outcome: Outcome::Queued, lane_id: None }
    }

    /// Append a request to the pending queue without processing it.
    pub fn enqueue_pending(&mut self, id: u64, p: u64, e: u64) -> Result<()> {
        if p == 0 {
            return Err(SimError::Validation(format!("job {id}: persistent bytes must be > 0")));
        }
        if p + e > self.capacity {
            return Err(SimError::Unschedulable { job: id, needed: p + e, capacity: self.capacity });
        }
        if self.jobs.contains_key(&id) || self.pending.iter().any(|&(j, _, _)| j == id) {
            return Err(SimError::DuplicateJobId(id));
        }
        self.pending.push_back((id, p, e));
        Ok(())
    }

    /// Enqueue the job and process the queue; the returned decision is this
    /// job's (queued if the pass left it pending).
    pub fn job_arrive(&mut self, id: u64, p: u64, e: u64) -> Result<LaneDecision> {
        self.enqueue_pending(id, p, e)?;
        let admitted = self.process_requests();
        Ok(admitted
            .into_iter()
            .find(|&(j, _)| j == id)
            .map(|(_, d)| d)
            .unwrap_or(LaneDecision { outcome: Outcome::Queued, lane_id: None }))
    }

    /// One in-order pass over the pending queue, admitting every request that
    /// fits. State is re-evaluated after each admission; unsatisfiable
    /// requests are skipped (no head-of-queue blocking) and keep their
    /// relative order.
    pub fn process_requests(&mut self) -> Vec<(u64, LaneDecision)> {
        let mut admitted = Vec::new();
        let queue = std::mem::take(&mut self.pending);
        for (id, p, e) in queue {
            let d = self.find_lane(p, e);
            if d.outcome == Outcome::Queued {
                self.pending.push_back((id, p, e));
            } else {
                admitted.push((id, self.apply(id, p, e, d)));
            }
        }
        admitted
    }

    /// Stable-sort the pending queue by a caller-supplied key; entries with
    /// equal keys keep their arrival order.
    pub fn sort_pending_by_key<K: PartialOrd>(&mut self, mut key: impl FnMut(u64) -> K) {
        let mut q: Vec<(u64, u64, u64)> = self.pending.drain(..).collect();
        q.sort_by(|a, b| key(a.0).partial_cmp(&key(b.0)).expect("total key order"));
        self.pending = q.into();
    }

    fn apply(&mut self, id: u64, p: u64, e: u64, d: LaneDecision) -> LaneDecision {
        self.persistent_total += p;
        // the boundary may have risen past a fragmented lane's base
        self.keep_lanes_above_boundary();
        let lane_id = match d.outcome {
            Outcome::NewLane => {
                let lane_id = self.next_lane_id;
                self.next_lane_id += 1;
                let base = self.place(e, None);
                self.lanes.insert(
                    lane_id,
                    Lane { id: lane_id, size_bytes: e, base_offset: base, resident: vec![id], busy: false },
                );
                self.events.push(LaneEvent::Created { lane: lane_id, size: e, base });
                lane_id
            }
            Outcome::ExistingLane => {
                let lane_id = d.lane_id.expect("join decision carries a lane");
                self.lanes.get_mut(&lane_id).expect("lane exists").resident.push(id);
                lane_id
            }
            Outcome::ReplacedLane => {
                let lane_id = d.lane_id.expect("replace decision carries a lane");
                // grow: re-place the lane at its new size, then record it
                let lane = self.lanes.get_mut(&lane_id).expect("lane exists");
                lane.size_bytes = e;
                lane.resident.push(id);
                let base = self.place(e, Some(lane_id));
                let lane = self.lanes.get_mut(&lane_id).expect("lane exists");
                lane.base_offset = base;
                self.events.push(LaneEvent::Resized { lane: lane_id, size: e, base });
                lane_id
            }
            Outcome::Queued => unreachable!("apply is never called on queued decisions"),
        };
        self.jobs.insert(id, JobMem { p, e, lane: lane_id });
        self.events.push(LaneEvent::Admitted { job: id, lane: lane_id, outcome: d.outcome });
        LaneDecision { outcome: d.outcome, lane_id: Some(lane_id) }
    }

    /// Find a base for a lane of `size`, top-down first fit over the free
    /// gaps in [persistent_total, capacity). `moving` names a lane whose
    /// current interval counts as free (it is being re-placed). Falls back to
    /// upward compaction when fragmentation leaves no single gap large
    /// enough; the safety sums guarantee the compacted layout fits.
    fn place(&mut self, size: u64, moving: Option<u64>) -> u64 {
        if let Some(base) = self.try_place(size, moving) {
            return base;
        }
        self.compact_up(moving);
        self.try_place(size, moving).expect("safety sums guarantee space after compaction")
    }

    fn try_place(&self, size: u64, moving: Option<u64>) -> Option<u64> {
        let mut obstacles: Vec<(u64, u64)> = self
            .lanes
            .values()
            .filter(|l| l.size_bytes > 0 && Some(l.id) != moving)
            .map(|l| (l.base_offset, l.size_bytes))
            .collect();
        obstacles.sort_unstable_by_key(|&(base, _)| std::cmp::Reverse(base));
        let mut ceiling = self.capacity;
        for (base, s) in obstacles {
            if ceiling - (base + s) >= size {
                return Some(ceiling - size);
            }
            ceiling = base;
        }
        if ceiling >= self.persistent_total && ceiling - self.persistent_total >= size {
            return Some(ceiling - size);
        }
        None
    }

    /// Slide every lane (except `skip`, which is being re-placed) up against
    /// the one above it, top lane against capacity. Relative order kept.
    fn compact_up(&mut self, skip: Option<u64>) {
        let mut order: Vec<u64> = self
            .lanes
            .values()
            .filter(|l| Some(l.id) != skip)
            .map(|l| l.id)
            .collect();
        order.sort_by_key(|id| {
            let l = &self.lanes[id];
            (std::cmp::Reverse(l.base_offset), l.id)
        });
        let mut ceiling = self.capacity;
        for id in order {
            let lane = self.lanes.get_mut(&id).expect("lane exists");
            let new_base = ceiling - lane.size_bytes;
            if new_base != lane.base_offset {
                let from = lane.base_offset;
                lane.base_offset = new_base;
                self.events.push(LaneEvent::Moved { lane: id, from, to: new_base });
            }
            ceiling = new_base;
        }
    }

    /// Admitting persistent bytes can raise the region boundary past a
    /// low-sitting lane; compaction restores the layout invariant.
    fn keep_lanes_above_boundary(&mut self) {
        if self.lanes.values().any(|l| l.base_offset < self.persistent_total) {
            self.compact_up(None);
        }
    }

    /// Decrement the lane ref count and release the job's persistent bytes.
    /// Deleting an emptied lane reprocesses the pending queue; a surviving
    /// lane shrinks to its remaining occupants' max E (top edge fixed).
    pub fn job_finish(&mut self, id: u64) -> Result<()> {
        let deleted = self.detach(id)?.2;
        if deleted {
            self.process_requests();
        }
        Ok(())
    }

    /// Same release mechanics as [`GpuState::job_finish`] but without queue
    /// processing, for callers that reorder the queue first (eviction).
    /// Returns the job's (persistent, ephemeral) bytes.
    pub fn remove_job(&mut self, id: u64) -> Result<(u64, u64)> {
        let (p, e, _) = self.detach(id)?;
        Ok((p, e))
    }

    fn detach(&mut self, id: u64) -> Result<(u64, u64, bool)> {
        let mem = self.jobs.remove(&id).ok_or(SimError::UnknownJob(id))?;
        self.persistent_total -= mem.p;
        let lane = self.lanes.get_mut(&mem.lane).expect("job's lane exists");
        lane.resident.retain(|&j| j != id);
        self.events.push(LaneEvent::Departed { job: id, lane: mem.lane });
        let mut deleted = false;
        if lane.resident.is_empty() {
            self.lanes.remove(&mem.lane);
            self.events.push(LaneEvent::Deleted { lane: mem.lane });
            deleted = true;
        } else {
            let max_e = lane.resident.iter().map(|j| self.jobs[j].e).max().expect("nonempty");
            if max_e < lane.size_bytes {
                let top = lane.top();
                lane.size_bytes = max_e;
                lane.base_offset = top - max_e;
                self.events.push(LaneEvent::Resized {
                    lane: mem.lane,
                    size: max_e,
                    base: top - max_e,
                });
            }
        }
        Ok((mem.p, mem.e, deleted))
    }

    /// Compact all lanes toward capacity so the free gap between the two
    /// regions is contiguous and maximal. Errors without mutating if a lane
    /// that would move is mid-iteration. Returns moved lane ids.
    pub fn defragment(&mut self) -> Result<Vec<u64>> {
        let mut order: Vec<u64> = self.lanes.keys().copied().collect();
        order.sort_by_key(|id| {
            let l = &self.lanes[id];
            (std::cmp::Reverse(l.base_offset), l.id)
        });
        let mut ceiling = self.capacity;
        let mut moves: Vec<(u64, u64)> = Vec::new();
        for id in &order {
            let lane = &self.lanes[id];
            let new_base = ceiling - lane.size_bytes;
            if new_base != lane.base_offset {
                if lane.busy {
                    return Err(SimError::Contract(format!(
                        "defragment would move lane {id} mid-iteration"
                    )));
                }
                moves.push((*id, new_base));
            }
            ceiling = new_base;
        }
        let moved: Vec<u64> = moves.iter().map(|&(id, _)| id).collect();
        for (id, new_base) in moves {
            let lane = self.lanes.get_mut(&id).expect("lane exists");
            let from = lane.base_offset;
            lane.base_offset = new_base;
            self.events.push(LaneEvent::Moved { lane: id, from, to: new_base });
        }
        if !moved.is_empty() {
            self.process_requests();
        }
        Ok(moved)
    }

    /// Slide one idle lane up against the nearest obstacle above it; the
    /// engine calls this at that lane's iteration boundary. Returns
    /// (from, to) if the lane moved.
    pub fn reclaim_lane(&mut self, id: u64) -> Option<(u64, u64)> {
        let lane = self.lanes.get(&id)?;
        let top = lane.top();
        let ceiling = self
            .lanes
            .values()
            .filter(|l| l.id != id && l.size_bytes > 0 && l.base_offset >= top)
            .map(|l| l.base_offset)
            .min()
            .unwrap_or(self.capacity);
        let new_base = ceiling - lane.size_bytes;
        if new_base == lane.base_offset {
            return None;
        }
        let lane = self.lanes.get_mut(&id).expect("lane exists");
        let from = lane.base_offset;
        lane.base_offset = new_base;
        self.events.push(LaneEvent::Moved { lane: id, from, to: new_base });
        Some((from, new_base))
    }

    /// The safety condition plus the lane-size law: reserved bytes fit under
    /// capacity and every lane is exactly as large as its occupants need.
    pub fn check_safety(&self) -> bool {
        if self.persistent_total + self.lane_reserved_total() > self.capacity {
            return false;
        }
        for lane in self.lanes.values() {
            if lane.resident.is_empty() {
                return false;
            }
            let max_e = lane.resident.iter().filter_map(|j| self.jobs.get(j)).map(|m| m.e).max();
            if max_e != Some(lane.size_bytes) {
                return false;
            }
        }
        // cross-consistency: every admitted job sits in the lane it claims
        self.jobs.iter().all(|(id, m)| {
            self.lanes.get(&m.lane).is_some_and(|l| l.resident.contains(id))
        })
    }

    /// Lane intervals are pairwise disjoint and lie within
    /// [persistent_total, capacity].
    pub fn lanes_disjoint(&self) -> bool {
        let mut intervals: Vec<(u64, u64)> = self
            .lanes
            .values()
            .filter(|l| l.size_bytes > 0)
            .map(|l| (l.base_offset, l.top()))
            .collect();
        intervals.sort_unstable();
        let in_region = self
            .lanes
            .values()
            .all(|l| l.base_offset >= self.persistent_total && l.top() <= self.capacity);
        in_region && intervals.windows(2).all(|w| w[0].1 <= w[1].0)
    }

    /// Consistency check used by tests: no job is both admitted and pending.
    pub fn queues_consistent(&self) -> bool {
        let pending: BTreeSet<u64> = self.pending.iter().map(|&(id, _, _)| id).collect();
        pending.len() == self.pending.len() && self.jobs.keys().all(|id| !pending.contains(id))
    }
}

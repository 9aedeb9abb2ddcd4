//! Intra-layer hybrid CPU-GPU scheduling.
//!
//! Activated experts are split into a GPU queue (resident, heaviest first)
//! and a CPU queue (not resident, lightest first). A greedy simulation then
//! fills three timelines (CPU compute, GPU compute, PCIe transfer) one action
//! at a time, always committing the candidate action that completes first.
//! [`select_plan`] compares that plan against rule variants and the all-CPU
//! and all-GPU plans, then refines the winner's assignment.

mod oracle;
mod validate;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::cost::CostModel;
use crate::model::{Device, ExpertRef, LayerRequest};

pub use oracle::{oracle_assignment, oracle_optimal, OracleError, ORACLE_MAX_EXPERTS};
pub use validate::{check_plan, PlanViolation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineEvent {
    pub device: Device,
    pub expert: ExpertRef,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
}

/// Where an activated expert was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Cpu,
    GpuCached,
    GpuAfterTransfer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulePlan {
    /// Sorted by start time; per-device order is chronological.
    pub events: Vec<TimelineEvent>,
    pub assignment: BTreeMap<ExpertRef, Placement>,
    /// Completion of the last compute event.
    pub makespan: f64,
}

impl SchedulePlan {
    fn from_events(mut events: Vec<TimelineEvent>) -> Self {
        events.sort_by(|a, b| {
            a.start
                .total_cmp(&b.start)
                .then(a.device.cmp(&b.device))
                .then(a.end.total_cmp(&b.end))
        });
        let transferred: HashSet<ExpertRef> = events
            .iter()
            .filter(|e| e.kind == EventKind::Transfer)
            .map(|e| e.expert)
            .collect();
        let mut assignment = BTreeMap::new();
        let mut makespan: f64 = 0.0;
        for e in events.iter().filter(|e| e.kind == EventKind::Compute) {
            let placement = match e.device {
                Device::Cpu => Placement::Cpu,
                _ if transferred.contains(&e.expert) => Placement::GpuAfterTransfer,
                _ => Placement::GpuCached,
            };
            assignment.insert(e.expert, placement);
            makespan = makespan.max(e.end);
        }
        Self {
            events,
            assignment,
            makespan,
        }
    }

    /// Experts moved over PCIe, in transfer order.
    pub fn transfers(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Transfer)
            .map(|e| e.expert)
    }

    pub fn busy_time(&self, device: Device) -> f64 {
        self.events
            .iter()
            .filter(|e| e.device == device)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// End of the last transfer, or 0 when nothing is transferred. PCIe is
    /// idle from here to the makespan.
    pub fn pcie_free_at(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.device == Device::Pcie)
            .map(|e| e.end)
            .fold(0.0, f64::max)
    }

    /// Debug dump: `device,layer,expert,kind,start,end` per event.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Compute => "compute",
                EventKind::Transfer => "transfer",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.device, e.expert.layer, e.expert.expert, kind, e.start, e.end
            );
        }
        out
    }
}

/// Whether an expert is GPU resident when a layer's plan is built.
pub trait Residency {
    fn is_resident(&self, expert: ExpertRef) -> bool;
}

impl Residency for BTreeSet<ExpertRef> {
    fn is_resident(&self, expert: ExpertRef) -> bool {
        self.contains(&expert)
    }
}

impl Residency for HashSet<ExpertRef> {
    fn is_resident(&self, expert: ExpertRef) -> bool {
        self.contains(&expert)
    }
}

impl<R: Residency + ?Sized> Residency for &R {
    fn is_resident(&self, expert: ExpertRef) -> bool {
        (**self).is_resident(expert)
    }
}

/// A residency view with one extra expert added.
pub struct WithExtra<'a, R: ?Sized> {
    pub base: &'a R,
    pub extra: ExpertRef,
}

impl<R: Residency + ?Sized> Residency for WithExtra<'_, R> {
    fn is_resident(&self, expert: ExpertRef) -> bool {
        expert == self.extra || self.base.is_resident(expert)
    }
}

/// Nothing is resident.
pub struct ColdCache;

impl Residency for ColdCache {
    fn is_resident(&self, _: ExpertRef) -> bool {
        false
    }
}

/// Everything is resident.
pub struct WarmCache;

impl Residency for WarmCache {
    fn is_resident(&self, _: ExpertRef) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub expert: ExpertRef,
    pub load: u32,
}

fn by_load_desc(a: &Job, b: &Job) -> std::cmp::Ordering {
    b.load.cmp(&a.load).then(a.expert.cmp(&b.expert))
}

fn by_load_asc(a: &Job, b: &Job) -> std::cmp::Ordering {
    a.load.cmp(&b.load).then(a.expert.cmp(&b.expert))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queues {
    /// Resident experts, load descending.
    pub gpu: Vec<Job>,
    /// Non-resident experts, load ascending.
    pub cpu: Vec<Job>,
}

pub fn build_queues(request: &LayerRequest, cache: &impl Residency) -> Queues {
    let (mut gpu, mut cpu): (Vec<Job>, Vec<Job>) = request
        .activated
        .iter()
        .map(|&i| Job {
            expert: request.expert(i),
            load: request.loads[i],
        })
        .partition(|j| cache.is_resident(j.expert));
    gpu.sort_by(by_load_desc);
    cpu.sort_by(by_load_asc);
    Queues { gpu, cpu }
}

struct GpuEntry {
    job: Job,
    ready: f64,
}

/// Greedy three-timeline fill.
///
/// Each step evaluates the next action of every lane and commits the one that
/// finishes first (ties: PCIe, then GPU, then CPU). A transfer counts as
/// finishing when the GPU would complete the moved expert:
/// - GPU: the heaviest entry of the GPU queue that is ready at the GPU clock,
///   or else the earliest-arriving transferred entry.
/// - CPU: the lightest non-resident expert not being transferred; once none
///   remain it takes the lightest ready entry from the tail of the GPU queue.
/// - PCIe: the heaviest non-resident expert not yet claimed or in flight. On
///   arrival it joins the GPU queue in load order and leaves the CPU queue.
///
/// Every expert is computed exactly once. Panics if the queues share an
/// expert.
pub fn simulate_schedule(gpu_queue: &[Job], cpu_queue: &[Job], cost: &CostModel) -> SchedulePlan {
    simulate_with_rules(gpu_queue, cpu_queue, cost, GreedyRules::default())
}

/// Variations of the greedy fill. The default ranks a transfer by when the
/// GPU would finish the moved expert and lets the CPU begin on its own queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GreedyRules {
    /// Rank a transfer by its arrival instead.
    pub rank_transfer_by_arrival: bool,
    /// Let the first CPU job be the lightest ready resident expert when it is
    /// lighter than the CPU queue head.
    pub cpu_warm_start: bool,
}

impl GreedyRules {
    pub const ALL: [GreedyRules; 4] = [
        GreedyRules {
            rank_transfer_by_arrival: false,
            cpu_warm_start: false,
        },
        GreedyRules {
            rank_transfer_by_arrival: true,
            cpu_warm_start: false,
        },
        GreedyRules {
            rank_transfer_by_arrival: false,
            cpu_warm_start: true,
        },
        GreedyRules {
            rank_transfer_by_arrival: true,
            cpu_warm_start: true,
        },
    ];
}

pub fn simulate_with_rules(
    gpu_queue: &[Job],
    cpu_queue: &[Job],
    cost: &CostModel,
    rules: GreedyRules,
) -> SchedulePlan {
    let mut ids: Vec<ExpertRef> = gpu_queue
        .iter()
        .chain(cpu_queue)
        .map(|j| j.expert)
        .collect();
    ids.sort_unstable();
    let total = ids.len();
    ids.dedup();
    assert!(ids.len() == total, "gpu and cpu queues must be disjoint");
    let id = |e: ExpertRef| ids.binary_search(&e).expect("queued expert");
    let transfer = cost.transfer_time();

    let mut gpu: Vec<GpuEntry> = gpu_queue
        .iter()
        .map(|&job| GpuEntry { job, ready: 0.0 })
        .collect();
    gpu.sort_by(|a, b| by_load_desc(&a.job, &b.job));
    let mut cpu: Vec<Job> = cpu_queue.to_vec();
    cpu.sort_by(by_load_asc);
    let mut transfer_queue: Vec<Job> = cpu.clone();
    transfer_queue.sort_by(by_load_desc);

    let mut in_flight = vec![false; total];
    let mut claimed = vec![false; total];
    let mut claimed_count = 0;
    let (mut cpu_clock, mut gpu_clock, mut pcie_clock) = (0.0f64, 0.0f64, 0.0f64);
    let mut burst = 0usize;
    let mut events = Vec::with_capacity(total * 2);

    enum Action {
        Transfer(usize),
        Gpu(usize),
        CpuOwn(usize),
        CpuSteal(usize),
    }

    while claimed_count < total {
        let mut best: Option<(f64, f64, f64, Action)> = None;
        let mut offer = |rank: f64, start: f64, end: f64, action: Action| {
            if best.as_ref().is_none_or(|(b, ..)| rank < *b) {
                best = Some((rank, start, end, action));
            }
        };

        // Offered in tie-break order; later offers need a strictly earlier end.
        if let Some(i) = transfer_queue
            .iter()
            .position(|j| !claimed[id(j.expert)] && !in_flight[id(j.expert)])
        {
            let arrival = pcie_clock + transfer;
            let rank = if rules.rank_transfer_by_arrival {
                arrival
            } else {
                gpu_clock.max(arrival) + cost.gpu_time(transfer_queue[i].load)
            };
            offer(rank, pcie_clock, arrival, Action::Transfer(i));
        }

        let ready_now = gpu.iter().position(|e| e.ready <= gpu_clock);
        let gpu_pick = ready_now.or_else(|| {
            gpu.iter()
                .enumerate()
                .min_by(|(ia, a), (ib, b)| a.ready.total_cmp(&b.ready).then(ia.cmp(ib)))
                .map(|(i, _)| i)
        });
        if let Some(i) = gpu_pick {
            let start = gpu_clock.max(gpu[i].ready);
            let end = start + cost.gpu_time(gpu[i].job.load);
            offer(end, start, end, Action::Gpu(i));
        }

        let own = cpu.iter().position(|j| !in_flight[id(j.expert)]);
        let warm = if rules.cpu_warm_start && burst == 0 {
            gpu.iter().rposition(|e| e.ready <= cpu_clock)
        } else {
            None
        };
        let own = match (own, warm) {
            (Some(i), Some(w)) if gpu[w].job.load < cpu[i].load => None,
            (o, _) => o,
        };
        if let Some(i) = own {
            let end = cpu_clock + cost.cpu_time(cpu[i].load, burst);
            offer(end, cpu_clock, end, Action::CpuOwn(i));
        } else {
            let steal = gpu.iter().rposition(|e| e.ready <= cpu_clock).or_else(|| {
                gpu.iter()
                    .enumerate()
                    .rev()
                    .min_by(|(_, a), (_, b)| a.ready.total_cmp(&b.ready))
                    .map(|(i, _)| i)
            });
            if let Some(i) = steal {
                let start = cpu_clock.max(gpu[i].ready);
                let end = start + cost.cpu_time(gpu[i].job.load, burst);
                offer(end, start, end, Action::CpuSteal(i));
            }
        }

        let (_, start, end, action) = best.expect("an unclaimed expert always has a next action");
        match action {
            Action::Transfer(i) => {
                let job = transfer_queue.remove(i);
                in_flight[id(job.expert)] = true;
                events.push(TimelineEvent {
                    device: Device::Pcie,
                    expert: job.expert,
                    kind: EventKind::Transfer,
                    start,
                    end,
                });
                pcie_clock = end;
                cpu.retain(|j| j.expert != job.expert);
                let pos = gpu
                    .iter()
                    .position(|e| by_load_desc(&job, &e.job).is_lt())
                    .unwrap_or(gpu.len());
                gpu.insert(pos, GpuEntry { job, ready: end });
            }
            Action::Gpu(i) => {
                let entry = gpu.remove(i);
                claimed[id(entry.job.expert)] = true;
                claimed_count += 1;
                events.push(TimelineEvent {
                    device: Device::Gpu,
                    expert: entry.job.expert,
                    kind: EventKind::Compute,
                    start,
                    end,
                });
                gpu_clock = end;
            }
            Action::CpuOwn(i) => {
                let job = cpu.remove(i);
                claimed[id(job.expert)] = true;
                claimed_count += 1;
                transfer_queue.retain(|j| j.expert != job.expert);
                events.push(cpu_event(job.expert, start, end));
                cpu_clock = end;
                burst += 1;
            }
            Action::CpuSteal(i) => {
                let entry = gpu.remove(i);
                claimed[id(entry.job.expert)] = true;
                claimed_count += 1;
                events.push(cpu_event(entry.job.expert, start, end));
                cpu_clock = end;
                burst += 1;
            }
        }
    }
    SchedulePlan::from_events(events)
}

fn cpu_event(expert: ExpertRef, start: f64, end: f64) -> TimelineEvent {
    TimelineEvent {
        device: Device::Cpu,
        expert,
        kind: EventKind::Compute,
        start,
        end,
    }
}

/// Plan for a fixed assignment: CPU jobs run back to back lightest first;
/// the GPU runs resident jobs heaviest first, then transferred jobs in
/// transfer order (heaviest first), each after its transfer lands.
pub fn assignment_plan(
    cpu_jobs: &[Job],
    gpu_resident: &[Job],
    gpu_transferred: &[Job],
    cost: &CostModel,
) -> SchedulePlan {
    let mut events = Vec::new();
    let mut cpu = cpu_jobs.to_vec();
    cpu.sort_by(by_load_asc);
    let mut t = 0.0;
    for (pos, j) in cpu.iter().enumerate() {
        let end = t + cost.cpu_time(j.load, pos);
        events.push(cpu_event(j.expert, t, end));
        t = end;
    }

    let mut resident = gpu_resident.to_vec();
    resident.sort_by(by_load_desc);
    let mut moved = gpu_transferred.to_vec();
    moved.sort_by(by_load_desc);
    let transfer = cost.transfer_time();
    let mut gpu_clock = 0.0;
    for j in &resident {
        let end = gpu_clock + cost.gpu_time(j.load);
        events.push(TimelineEvent {
            device: Device::Gpu,
            expert: j.expert,
            kind: EventKind::Compute,
            start: gpu_clock,
            end,
        });
        gpu_clock = end;
    }
    let mut pcie_clock = 0.0;
    for j in &moved {
        let arrival = pcie_clock + transfer;
        events.push(TimelineEvent {
            device: Device::Pcie,
            expert: j.expert,
            kind: EventKind::Transfer,
            start: pcie_clock,
            end: arrival,
        });
        pcie_clock = arrival;
        let start = gpu_clock.max(arrival);
        let end = start + cost.gpu_time(j.load);
        events.push(TimelineEvent {
            device: Device::Gpu,
            expert: j.expert,
            kind: EventKind::Compute,
            start,
            end,
        });
        gpu_clock = end;
    }
    SchedulePlan::from_events(events)
}

/// Every activated expert on the CPU, lightest first.
pub fn all_cpu_plan(queues: &Queues, cost: &CostModel) -> SchedulePlan {
    let jobs: Vec<Job> = queues.gpu.iter().chain(&queues.cpu).copied().collect();
    assignment_plan(&jobs, &[], &[], cost)
}

/// Every activated expert on the GPU, loading misses on demand.
pub fn all_gpu_plan(queues: &Queues, cost: &CostModel) -> SchedulePlan {
    assignment_plan(&[], &queues.gpu, &queues.cpu, cost)
}

/// The minimum-makespan plan reachable from the greedy plans under every
/// rule variant, all-CPU, all-GPU and resident-only GPU, each refined by local moves between
/// CPU and GPU while they strictly shorten the makespan. Ties keep the
/// default greedy plan.
pub fn select_plan(
    request: &LayerRequest,
    cache: &impl Residency,
    cost: &CostModel,
) -> SchedulePlan {
    let queues = build_queues(request, cache);
    select_from_queues(&queues, cost)
}

pub fn select_from_queues(queues: &Queues, cost: &CostModel) -> SchedulePlan {
    let greedy = simulate_schedule(&queues.gpu, &queues.cpu, cost);
    let variants = GreedyRules::ALL
        .iter()
        .skip(1)
        .map(|&r| simulate_with_rules(&queues.gpu, &queues.cpu, cost, r));
    let starts: Vec<SchedulePlan> = variants
        .chain([
            all_cpu_plan(queues, cost),
            all_gpu_plan(queues, cost),
            assignment_plan(&queues.cpu, &queues.gpu, &[], cost),
        ])
        .collect();

    let space = AssignmentSpace::new(queues, cost);
    let mut best = greedy;
    let mut visited: HashSet<Vec<bool>> = HashSet::new();
    let mut best_mask: Option<Vec<bool>> = None;
    for start in std::iter::once(&best.clone()).chain(&starts) {
        if start.makespan < best.makespan {
            best = start.clone();
            best_mask = None;
        }
        let Some((ms, reached)) = space.climb(space.mask_of(start), &mut visited) else {
            continue;
        };
        let bar = best_mask
            .as_ref()
            .map_or(best.makespan, |m| space.makespan(m));
        if ms < bar {
            best_mask = Some(reached);
        }
    }
    match best_mask {
        Some(mask) => space.plan(&mask),
        None => best,
    }
}

/// Largest layer for which refinement also tries moving two experts at once.
/// Beyond it the quadratic neighbourhood costs more than it finds.
pub const PAIR_MOVE_LIMIT: usize = 12;

/// The activated experts of one layer with their costs precomputed, for
/// evaluating CPU/GPU assignments in the fixed order of [`assignment_plan`]
/// without building plans.
struct AssignmentSpace<'a> {
    jobs: Vec<(Job, bool)>,
    /// Job indices, lightest first.
    asc: Vec<usize>,
    /// Job indices, heaviest first.
    desc: Vec<usize>,
    cpu_first: Vec<f64>,
    cpu_rest: Vec<f64>,
    gpu: Vec<f64>,
    transfer: f64,
    cost: &'a CostModel,
}

impl<'a> AssignmentSpace<'a> {
    fn new(queues: &Queues, cost: &'a CostModel) -> Self {
        let jobs: Vec<(Job, bool)> = queues
            .gpu
            .iter()
            .map(|&j| (j, true))
            .chain(queues.cpu.iter().map(|&j| (j, false)))
            .collect();
        let mut asc: Vec<usize> = (0..jobs.len()).collect();
        asc.sort_by(|&a, &b| by_load_asc(&jobs[a].0, &jobs[b].0));
        let mut desc: Vec<usize> = (0..jobs.len()).collect();
        desc.sort_by(|&a, &b| by_load_desc(&jobs[a].0, &jobs[b].0));
        Self {
            cpu_first: jobs.iter().map(|(j, _)| cost.cpu_time(j.load, 0)).collect(),
            cpu_rest: jobs.iter().map(|(j, _)| cost.cpu_time(j.load, 1)).collect(),
            gpu: jobs.iter().map(|(j, _)| cost.gpu_time(j.load)).collect(),
            transfer: cost.transfer_time(),
            jobs,
            asc,
            desc,
            cost,
        }
    }

    fn mask_of(&self, plan: &SchedulePlan) -> Vec<bool> {
        self.jobs
            .iter()
            .map(|(j, _)| plan.assignment.get(&j.expert) == Some(&Placement::Cpu))
            .collect()
    }

    /// Same arithmetic as `assignment_plan(..).makespan`.
    fn makespan(&self, on_cpu: &[bool]) -> f64 {
        let mut cpu_clock = 0.0f64;
        let mut first = true;
        for &i in &self.asc {
            if on_cpu[i] {
                cpu_clock += if first {
                    self.cpu_first[i]
                } else {
                    self.cpu_rest[i]
                };
                first = false;
            }
        }
        let mut gpu_clock = 0.0f64;
        for &i in &self.desc {
            if !on_cpu[i] && self.jobs[i].1 {
                gpu_clock += self.gpu[i];
            }
        }
        let mut pcie_clock = 0.0f64;
        for &i in &self.desc {
            if !on_cpu[i] && !self.jobs[i].1 {
                pcie_clock += self.transfer;
                gpu_clock = gpu_clock.max(pcie_clock) + self.gpu[i];
            }
        }
        cpu_clock.max(gpu_clock)
    }

    /// Steepest descent over single moves between CPU and GPU, falling back
    /// to moving two experts at once when no single move helps. Returns
    /// `None` on reaching a state an earlier descent already passed through,
    /// since the rest of the path is the same.
    fn climb(
        &self,
        mut on_cpu: Vec<bool>,
        visited: &mut HashSet<Vec<bool>>,
    ) -> Option<(f64, Vec<bool>)> {
        let n = on_cpu.len();
        let mut current = self.makespan(&on_cpu);
        loop {
            if !visited.insert(on_cpu.clone()) {
                return None;
            }
            let mut improved: Option<((usize, Option<usize>), f64)> = None;
            let mut consider = |mv: (usize, Option<usize>), improved: &mut Option<_>| {
                flip(&mut on_cpu, mv);
                let ms = self.makespan(&on_cpu);
                flip(&mut on_cpu, mv);
                if ms < improved.map_or(current, |(_, b)| b) {
                    *improved = Some((mv, ms));
                }
            };
            for i in 0..n {
                consider((i, None), &mut improved);
            }
            if improved.is_none() && n <= PAIR_MOVE_LIMIT {
                for i in 0..n {
                    for j in i + 1..n {
                        consider((i, Some(j)), &mut improved);
                    }
                }
            }
            match improved {
                Some((mv, ms)) => {
                    flip(&mut on_cpu, mv);
                    current = ms;
                }
                None => return Some((current, on_cpu)),
            }
        }
    }

    fn plan(&self, on_cpu: &[bool]) -> SchedulePlan {
        let (mut c, mut r, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for (&(job, cached), &cpu) in self.jobs.iter().zip(on_cpu) {
            match (cpu, cached) {
                (true, _) => c.push(job),
                (false, true) => r.push(job),
                (false, false) => t.push(job),
            }
        }
        assignment_plan(&c, &r, &t, self.cost)
    }
}

fn flip(on_cpu: &mut [bool], (i, j): (usize, Option<usize>)) {
    on_cpu[i] = !on_cpu[i];
    if let Some(j) = j {
        on_cpu[j] = !on_cpu[j];
    }
}

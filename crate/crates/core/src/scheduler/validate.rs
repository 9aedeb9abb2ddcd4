use std::collections::{HashMap, HashSet};
use std::fmt;

use super::{EventKind, Placement, Queues, SchedulePlan};
use crate::model::{Device, ExpertRef};

#[derive(Debug, Clone, PartialEq)]
pub enum PlanViolation {
    MalformedEvent {
        expert: ExpertRef,
        reason: &'static str,
    },
    Overlap {
        device: Device,
        first: ExpertRef,
        second: ExpertRef,
    },
    ComputeCount {
        expert: ExpertRef,
        count: usize,
    },
    UnknownExpert {
        expert: ExpertRef,
    },
    ComputeBeforeTransfer {
        expert: ExpertRef,
    },
    MissingTransfer {
        expert: ExpertRef,
    },
    ResidentTransferred {
        expert: ExpertRef,
    },
    AssignmentMismatch {
        expert: ExpertRef,
    },
    Makespan {
        reported: f64,
        actual: f64,
    },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Checks a plan against the layer it was built for. Returns every
/// violation of: per-device non-overlap in start order, exactly one compute
/// per activated expert, transfer-before-compute for non-resident GPU work,
/// and makespan equal to the latest event end.
pub fn check_plan(plan: &SchedulePlan, queues: &Queues) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let resident: HashSet<ExpertRef> = queues.gpu.iter().map(|j| j.expert).collect();
    let activated: HashSet<ExpertRef> = resident
        .iter()
        .copied()
        .chain(queues.cpu.iter().map(|j| j.expert))
        .collect();

    for e in &plan.events {
        if !(e.end >= e.start) || e.start < 0.0 {
            out.push(PlanViolation::MalformedEvent {
                expert: e.expert,
                reason: "end before start",
            });
        }
        if (e.device == Device::Pcie) != (e.kind == EventKind::Transfer) {
            out.push(PlanViolation::MalformedEvent {
                expert: e.expert,
                reason: "transfers must run on pcie and only there",
            });
        }
        if !activated.contains(&e.expert) {
            out.push(PlanViolation::UnknownExpert { expert: e.expert });
        }
    }

    for device in Device::ALL {
        let lane: Vec<_> = plan.events.iter().filter(|e| e.device == device).collect();
        for pair in lane.windows(2) {
            if pair[1].start < pair[0].end {
                out.push(PlanViolation::Overlap {
                    device,
                    first: pair[0].expert,
                    second: pair[1].expert,
                });
            }
        }
    }

    let mut computes: HashMap<ExpertRef, Vec<_>> = HashMap::new();
    let mut transfers: HashMap<ExpertRef, f64> = HashMap::new();
    for e in &plan.events {
        match e.kind {
            EventKind::Compute => computes.entry(e.expert).or_default().push(e),
            EventKind::Transfer => {
                if resident.contains(&e.expert) {
                    out.push(PlanViolation::ResidentTransferred { expert: e.expert });
                }
                transfers.insert(e.expert, e.end);
            }
        }
    }

    let mut sorted: Vec<_> = activated.iter().copied().collect();
    sorted.sort();
    for expert in sorted {
        let events = computes.get(&expert).map(Vec::as_slice).unwrap_or(&[]);
        if events.len() != 1 {
            out.push(PlanViolation::ComputeCount {
                expert,
                count: events.len(),
            });
            continue;
        }
        let c = events[0];
        if c.device == Device::Gpu && !resident.contains(&expert) {
            match transfers.get(&expert) {
                Some(&arrival) if c.start < arrival => {
                    out.push(PlanViolation::ComputeBeforeTransfer { expert })
                }
                Some(_) => {}
                None => out.push(PlanViolation::MissingTransfer { expert }),
            }
        }
        let expected = match (c.device, resident.contains(&expert)) {
            (Device::Cpu, _) => Placement::Cpu,
            (_, true) => Placement::GpuCached,
            (_, false) => Placement::GpuAfterTransfer,
        };
        if plan.assignment.get(&expert) != Some(&expected) {
            out.push(PlanViolation::AssignmentMismatch { expert });
        }
    }

    let actual = plan.events.iter().map(|e| e.end).fold(0.0, f64::max);
    if plan.makespan != actual {
        out.push(PlanViolation::Makespan {
            reported: plan.makespan,
            actual,
        });
    }
    out
}

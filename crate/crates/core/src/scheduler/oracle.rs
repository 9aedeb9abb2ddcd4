use thiserror::Error;

use super::{build_queues, by_load_asc, by_load_desc, Job, Residency};
use crate::cost::CostModel;
use crate::model::{ExpertRef, LayerRequest};

/// Exhaustive enumeration is refused above this many activated experts.
pub const ORACLE_MAX_EXPERTS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{found} activated experts exceeds the oracle limit of {limit}")]
    TooLarge { found: usize, limit: usize },
}

/// Minimum makespan over all 2^n CPU/GPU assignments of the activated
/// experts, each evaluated in closed form under the priority orders (CPU
/// lightest first, resident GPU work heaviest first, transfers heaviest
/// first with compute after arrival).
pub fn oracle_optimal(
    request: &LayerRequest,
    cache: &impl Residency,
    cost: &CostModel,
) -> Result<f64, OracleError> {
    oracle_assignment(request, cache, cost).map(|(makespan, _)| makespan)
}

/// Like [`oracle_optimal`], also returning the CPU-side experts of the first
/// optimal assignment in enumeration order (lowest mask first).
pub fn oracle_assignment(
    request: &LayerRequest,
    cache: &impl Residency,
    cost: &CostModel,
) -> Result<(f64, Vec<ExpertRef>), OracleError> {
    let queues = build_queues(request, cache);
    let mut jobs: Vec<(Job, bool)> = queues.gpu.iter().map(|&j| (j, true)).collect();
    jobs.extend(queues.cpu.iter().map(|&j| (j, false)));
    let n = jobs.len();
    if n > ORACLE_MAX_EXPERTS {
        return Err(OracleError::TooLarge {
            found: n,
            limit: ORACLE_MAX_EXPERTS,
        });
    }
    let transfer = cost.transfer_time();
    let mut best = f64::INFINITY;
    let mut best_mask = 0u32;
    let mut on_cpu = Vec::with_capacity(n);
    let mut resident = Vec::with_capacity(n);
    let mut moved = Vec::with_capacity(n);
    for mask in 0u32..(1 << n) {
        on_cpu.clear();
        resident.clear();
        moved.clear();
        for (bit, &(job, cached)) in jobs.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                on_cpu.push(job);
            } else if cached {
                resident.push(job);
            } else {
                moved.push(job);
            }
        }
        on_cpu.sort_by(by_load_asc);
        let cpu_end: f64 = on_cpu
            .iter()
            .enumerate()
            .map(|(pos, j)| cost.cpu_time(j.load, pos))
            .sum();
        let mut gpu_end: f64 = resident.iter().map(|j| cost.gpu_time(j.load)).sum();
        moved.sort_by(by_load_desc);
        for (k, j) in moved.iter().enumerate() {
            let arrival = (k + 1) as f64 * transfer;
            gpu_end = gpu_end.max(arrival) + cost.gpu_time(j.load);
        }
        let makespan = cpu_end.max(gpu_end);
        if makespan < best {
            best = makespan;
            best_mask = mask;
        }
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut cpu_side: Vec<ExpertRef> = (0..n)
        .filter(|bit| best_mask & (1 << bit) != 0)
        .map(|bit| jobs[bit].0.expert)
        .collect();
    cpu_side.sort();
    Ok((best, cpu_side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::tests::toy_cost;
    use crate::scheduler::{ColdCache, WarmCache};

    fn request(loads: &[u32]) -> LayerRequest {
        let n = loads.len();
        LayerRequest::new(0, loads.to_vec(), vec![1.0 / n as f64; n])
    }

    #[test]
    fn single_cached_expert_is_gpu_time() {
        let cost = toy_cost(1.0, 2.0, 1.0, 3.0);
        assert_eq!(
            oracle_optimal(&request(&[1]), &WarmCache, &cost).unwrap(),
            1.0
        );
    }

    #[test]
    fn two_cached_experts_by_hand() {
        // Loads 2 and 4, gpu 1, cpu slope 0.5, no penalty.
        // Assignments: both GPU -> 2; lighter on CPU -> max(1, 1) = 1;
        // heavier on CPU -> max(2, 1) = 2; both CPU -> 3.
        let cost = toy_cost(1.0, 0.5, 1.0, 3.0);
        assert_eq!(
            oracle_optimal(&request(&[2, 4]), &WarmCache, &cost).unwrap(),
            1.0
        );
        // With slow CPU, both on GPU wins.
        let slow = toy_cost(1.0, 5.0, 1.0, 3.0);
        assert_eq!(
            oracle_optimal(&request(&[2, 4]), &WarmCache, &slow).unwrap(),
            2.0
        );
    }

    #[test]
    fn cold_single_expert_takes_cheaper_route() {
        let cost = toy_cost(1.0, 0.5, 1.0, 3.0);
        assert_eq!(
            oracle_optimal(&request(&[2]), &ColdCache, &cost).unwrap(),
            1.0
        );
        let slow = toy_cost(1.0, 2.5, 1.0, 3.0);
        assert_eq!(
            oracle_optimal(&request(&[2]), &ColdCache, &slow).unwrap(),
            4.0
        );
    }

    #[test]
    fn refuses_large_instances() {
        let cost = toy_cost(1.0, 0.5, 1.0, 3.0);
        let err = oracle_optimal(&request(&[1; 13]), &ColdCache, &cost).unwrap_err();
        assert_eq!(
            err,
            OracleError::TooLarge {
                found: 13,
                limit: 12
            }
        );
    }
}

use std::collections::BTreeSet;

use moesim::cache::{CacheState, MrsState, PolicyKind};
use moesim::cost::{CostModel, HardwareProfile};
use moesim::model::{ExpertRef, LayerRequest, ModelConfig};
use moesim::scheduler::{
    all_cpu_plan, all_gpu_plan, build_queues, check_plan, oracle_optimal, select_plan,
};
use moesim::tracegen::io::{parse_trace, trace_to_string};
use moesim::tracegen::{generate_trace, GenParams};
use proptest::prelude::*;

fn cost(cpu_slope: f64, transfer: f64, penalty: f64) -> CostModel {
    CostModel::new(
        HardwareProfile {
            gpu_time_per_expert: 1.0,
            gpu_saturation_load: 256,
            gpu_slope: 0.0,
            cpu_slope,
            cpu_first_expert_penalty: penalty,
            transfer_bandwidth: 1.0,
            transfer_latency: transfer,
            shared_expert_time: 0.0,
            non_expert_time: 0.0,
        },
        0,
    )
}

fn layer() -> impl Strategy<Value = (LayerRequest, BTreeSet<ExpertRef>)> {
    prop::collection::vec((1u32..=64, any::<bool>()), 1..=10).prop_map(|jobs| {
        let n = jobs.len();
        let cached = jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| j.1)
            .map(|(i, _)| ExpertRef::new(0, i))
            .collect();
        let loads = jobs.into_iter().map(|j| j.0).collect();
        (LayerRequest::new(0, loads, vec![1.0 / n as f64; n]), cached)
    })
}

proptest! {
    #[test]
    fn selected_plans_are_valid_and_dominant(
        (req, cached) in layer(),
        slope in 0.01f64..2.0,
        transfer in 0.1f64..10.0,
        penalty in 1.0f64..2.0,
    ) {
        let cost = cost(slope, transfer, penalty);
        let plan = select_plan(&req, &cached, &cost);
        let queues = build_queues(&req, &cached);
        prop_assert!(check_plan(&plan, &queues).is_empty());
        prop_assert!(plan.makespan <= all_cpu_plan(&queues, &cost).makespan);
        prop_assert!(plan.makespan <= all_gpu_plan(&queues, &cost).makespan);
        let opt = oracle_optimal(&req, &cached, &cost).unwrap();
        prop_assert!(plan.makespan >= opt - 1e-9);
        prop_assert_eq!(plan, select_plan(&req, &cached, &cost));
    }

    #[test]
    fn degenerate_plans_are_valid((req, cached) in layer(), transfer in 0.1f64..10.0) {
        let cost = cost(0.3, transfer, 1.4);
        let queues = build_queues(&req, &cached);
        prop_assert!(check_plan(&all_cpu_plan(&queues, &cost), &queues).is_empty());
        prop_assert!(check_plan(&all_gpu_plan(&queues, &cost), &queues).is_empty());
    }

    #[test]
    fn score_aware_victim_has_the_lowest_score(
        scores in prop::collection::vec(0.0f64..1.0, 8),
        pinned in 0usize..4,
    ) {
        let mut mrs = MrsState::new(1, 8, 0.5, 4);
        for (i, &s) in scores.iter().enumerate() {
            mrs.set_score(ExpertRef::new(0, i), s);
        }
        let mut cache = CacheState::new(PolicyKind::Mrs, 6, mrs.clone());
        for i in 0..6 {
            cache.insert(ExpertRef::new(0, i)).unwrap();
        }
        for i in 0..pinned {
            cache.pin(ExpertRef::new(0, i));
        }
        let victim = cache.insert(ExpertRef::new(0, 7)).unwrap().unwrap();
        let lowest = (pinned..6)
            .map(|i| ExpertRef::new(0, i))
            .min_by(|a, b| mrs.score(*a).total_cmp(&mrs.score(*b)).then(a.cmp(b)))
            .unwrap();
        prop_assert_eq!(victim, lowest);
    }

    #[test]
    fn generated_traces_round_trip(seed in 0u64..1000, steps in 1usize..6) {
        let cfg = ModelConfig::mixtral();
        let t = generate_trace(&cfg, &GenParams::calibrated(&cfg, seed), 8, steps).unwrap();
        let text = trace_to_string(&t);
        prop_assert_eq!(parse_trace(&text).unwrap(), t);
    }
}

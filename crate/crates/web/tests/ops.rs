use moesim_web::{cache_curve_value, schedule_layer_value, trace_stats_value, CURVE_RATIOS};

#[test]
fn layer_plan_beats_both_extremes() {
    let v = schedule_layer_value("2,3,5,6,1", "3,4", 0.5, 3.0, 2.0).unwrap();
    let makespan = v["plan"]["makespan"].as_f64().unwrap();
    assert_eq!(makespan, v["optimum"].as_f64().unwrap());
    assert!(makespan <= v["all_cpu"].as_f64().unwrap());
    assert!(makespan <= v["all_gpu"].as_f64().unwrap());
    assert!(!v["plan"]["events"].as_array().unwrap().is_empty());
    assert_eq!(v["plan"]["placement"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_layer_input_is_explained() {
    assert!(schedule_layer_value("", "", 0.5, 3.0, 2.0).is_err());
    assert!(schedule_layer_value("4,x", "", 0.5, 3.0, 2.0)
        .unwrap_err()
        .contains("'x'"));
    assert!(schedule_layer_value("4,5", "2", 0.5, 3.0, 2.0).is_err());
    assert!(schedule_layer_value("4,5", "", -1.0, 3.0, 2.0).is_err());
}

#[test]
fn curves_cover_every_policy_and_rise_with_capacity() {
    let v = cache_curve_value("mixtral", 1, 40).unwrap();
    for kind in ["mrs", "lru", "lfu"] {
        let rates: Vec<f64> = serde_json::from_value(v["hit_rate"][kind].clone()).unwrap();
        assert_eq!(rates.len(), CURVE_RATIOS.len());
        assert!(
            rates.windows(2).all(|w| w[1] >= w[0] - 1e-9),
            "{kind}: {rates:?}"
        );
    }
}

#[test]
fn stats_include_the_reference() {
    let v = trace_stats_value("deepseek", 0, 30).unwrap();
    assert_eq!(v["reference_cdf"].as_array().unwrap().len(), 10);
    assert_eq!(v["reuse_by_decile"].as_array().unwrap().len(), 10);
    assert!(trace_stats_value("gpt", 0, 30).is_err());
    assert!(trace_stats_value("qwen2", 0, 10_000).is_err());
}

use pvdta::simulate::{
    apply_detector, generate_ground_truth, run_end_to_end, DetectorConfig, Range, SimConfig,
};

fn cfg(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        city_cols: 4,
        city_rows: 4,
        cities_per_dept: 8,
        installations_per_city: Range { min: 40, max: 60 },
        ..Default::default()
    }
}

#[test]
fn perfect_detector_closes_the_loop() {
    let (gt, out) = run_end_to_end(&cfg(3)).unwrap();
    let overall = out.filtered.overall.as_ref().unwrap();
    eprintln!("{overall:?}");
    assert_eq!(overall.k, overall.k_hat);
    assert!(overall.mape_pct <= 1e-4);
    assert!(out.filtered.cities.iter().all(|c| c.ratio == 1.0));
    assert!(out
        .filtered
        .cities
        .iter()
        .all(|c| c.ape <= 1e-6 && c.aipe.unwrap().abs() <= 1e-6));
    assert_eq!(out.filtered.cities.len(), gt.cities.len());
    let e = out.truth_errors.unwrap();
    assert_eq!(e.n_pairs, gt.installations.len());
    assert!(e.mape_pct < 1e-6);
}

#[test]
fn identical_seeds_identical_outcomes() {
    let a = run_end_to_end(&cfg(9)).unwrap();
    let b = run_end_to_end(&cfg(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn recall_count_is_binomial() {
    let c = SimConfig {
        detector: DetectorConfig {
            recall: 0.7,
            ..Default::default()
        },
        ..cfg(5)
    };
    let gt = generate_ground_truth(&c).unwrap();
    let n = gt.installations.len() as f64;
    let kept = apply_detector(&gt, &c).unwrap().len() as f64;
    let sd = (n * 0.7 * 0.3).sqrt();
    assert!((kept - 0.7 * n).abs() <= 4.0 * sd, "kept {kept} of {n}");
}

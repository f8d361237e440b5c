use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeflow::cohort::{simulate, SimConfig};
use shapeflow::deformation::{shape_at, steps_for, Geodesic};
use shapeflow::estimation::Observation;
use shapeflow::mesh::dice;
use shapeflow::pipeline::{
    evaluate, mann_whitney_normal, mann_whitney_u, predict, EvalRow, EvalTable, MethodSpec, PredictConfig,
    PredictionTask,
};
use shapeflow::timewarp::ScoreSeries;
use shapeflow::Error;

fn reference() -> Geodesic {
    let config = SimConfig {
        n_subjects: 1,
        visits: 2,
        subdivisions: 1,
        ..SimConfig::default()
    };
    simulate(&config).unwrap().reference
}

fn method(s: &str) -> MethodSpec {
    s.parse().unwrap()
}

#[test]
fn method_names_round_trip() {
    for s in ["naive", "extrapolate", "exp_parallel+raw", "geod_parallel+reparam"] {
        assert_eq!(method(s).to_string(), s);
    }
    assert_eq!(method("exp"), method("exp_parallel+raw"));
    for bad in ["naive+reparam", "extrapolate+reparam", "exp+later", "spline"] {
        assert!(matches!(bad.parse::<MethodSpec>(), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn naive_repeats_the_last_visit() {
    let g = reference();
    let learning = [
        Observation::new(71.0, shape_at(&g, 71.0, 6).unwrap()),
        Observation::new(70.0, g.template.clone()),
    ];
    let task = PredictionTask {
        method: MethodSpec::NAIVE,
        learning: &learning,
        scores: None,
        reference: None,
        target_times: vec![72.0, 75.5],
    };
    let p = predict(&task, &PredictConfig::default()).unwrap();
    assert_eq!(p.samples.len(), 2);
    for (t, s) in &p.samples {
        assert!(*t == 72.0 || *t == 75.5);
        assert_eq!(s, &learning[0].shape);
    }
}

#[test]
fn transfer_of_the_reference_onto_itself() {
    let g = reference();
    let config = PredictConfig::default();
    // a subject whose baseline is the reference template, seen 10 years earlier
    let learning = [Observation::new(g.t_ref - 10.0, g.template.clone())];
    let task = PredictionTask {
        method: method("exp_parallel+raw"),
        learning: &learning,
        scores: None,
        reference: Some(&g),
        target_times: vec![g.t_ref - 8.0, g.t_ref - 7.0],
    };
    let p = predict(&task, &config).unwrap();
    assert!(!p.flagged);
    for (t, s) in &p.samples {
        let u = t + 10.0;
        let on_reference = shape_at(&g, u, steps_for(u - g.t_ref, 6.0)).unwrap();
        let d = dice(s, &on_reference, 0.5).unwrap();
        assert!(d >= 0.98, "age {t}: dice {d}");
    }
}

#[test]
fn reparametrized_transfer_needs_scores() {
    let g = reference();
    let learning = [Observation::new(70.0, g.template.clone())];
    let task = PredictionTask {
        method: method("geod_parallel+reparam"),
        learning: &learning,
        scores: None,
        reference: Some(&g),
        target_times: vec![71.0],
    };
    assert!(matches!(predict(&task, &PredictConfig::default()), Err(Error::Config(_))));
    let no_reference = PredictionTask {
        method: method("exp_parallel+raw"),
        reference: None,
        ..task.clone()
    };
    assert!(matches!(predict(&no_reference, &PredictConfig::default()), Err(Error::Config(_))));
    let scores = ScoreSeries::new(vec![(70.0, 0.2), (71.0, 0.3)]).unwrap();
    let empty = PredictionTask {
        method: MethodSpec::NAIVE,
        learning: &[],
        scores: Some(&scores),
        ..task
    };
    assert!(predict(&empty, &PredictConfig::default()).is_err());
}

#[test]
fn evaluation_pairs_by_age() {
    let g = reference();
    let a = g.template.clone();
    let b = shape_at(&g, g.t_ref + 3.0, 18).unwrap();
    let observed = vec![(70.0, a.clone()), (71.0, b.clone())];
    let d = evaluate(&[(71.0, b.clone()), (70.03, a.clone())], &observed, 0.5).unwrap();
    assert_eq!(d, vec![1.0, 1.0]);
    assert!(matches!(evaluate(&[(70.5, a)], &observed, 0.5), Err(Error::Pairing(_))));
}

fn row(subject: &str, method: &str, h: i64, dice: f64) -> EvalRow {
    EvalRow {
        subject: subject.into(),
        method: method.into(),
        horizon_months: h,
        age: 70.0 + h as f64 / 12.0,
        dice,
        flagged: false,
    }
}

#[test]
fn table_cells_and_summary() {
    let rows = vec![
        row("s2", "naive", 12, 0.8),
        row("s1", "naive", 12, 0.9),
        row("s1", "naive", 24, 0.7),
        row("s1", "exp_parallel+raw", 12, 0.95),
        row("s2", "exp_parallel+raw", 12, 0.85),
    ];
    let table = EvalTable::new(rows).unwrap();
    assert_eq!(table.horizons(), vec![12, 24]);
    assert_eq!(table.cell("naive", 12), vec![0.9, 0.8]);
    assert!((table.mean("naive", 12).unwrap() - 0.85).abs() < 1e-15);
    assert!((table.mean("exp_parallel+raw", 12).unwrap() - 0.9).abs() < 1e-15);
    assert_eq!(table.mean("naive", 36), None);
    let summary = table.summarize("naive");
    let cell = summary.iter().find(|c| c.method == "exp_parallel+raw").unwrap();
    assert_eq!(cell.n, 2);
    assert_eq!(cell.u, Some(3.0));
    assert!(summary.iter().filter(|c| c.method == "naive").all(|c| c.p_vs_baseline.is_none()));
    assert!(EvalTable::new(vec![row("s1", "naive", 12, 1.5)]).is_err());
}

/// Two-sided permutation p-value by enumerating every split of the pooled sample.
fn brute_force_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u_of = |xs: &[f64], ys: &[f64]| -> f64 {
        xs.iter()
            .flat_map(|x| ys.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
            .sum()
    };
    let mean = (a.len() * b.len()) as f64 / 2.0;
    let u = u_of(a, b);
    let (mut extreme, mut total) = (0usize, 0usize);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (xs, ys): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
        let xs: Vec<f64> = xs.into_iter().map(|p| p.1).collect();
        let ys: Vec<f64> = ys.into_iter().map(|p| p.1).collect();
        total += 1;
        if (u_of(&xs, &ys) - mean).abs() >= (u - mean).abs() - 1e-9 {
            extreme += 1;
        }
    }
    (u, extreme as f64 / total as f64)
}

#[test]
fn exact_mann_whitney_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..30 {
        let na = rng.random_range(1..7);
        let nb = rng.random_range(1..7);
        // coarse values so that ties occur
        let mut draw = |shift: f64| ((rng.random::<f64>() + shift) * 4.0).round() / 4.0;
        let a: Vec<f64> = (0..na).map(|_| draw(0.3)).collect();
        let b: Vec<f64> = (0..nb).map(|_| draw(0.0)).collect();
        let got = mann_whitney_u(&a, &b).unwrap();
        let (u, p) = brute_force_p(&a, &b);
        assert!(got.exact);
        assert_eq!(got.u, u, "case {case}");
        assert!((got.p - p).abs() < 1e-12, "case {case}: {} vs {p}", got.p);
    }
}

#[test]
fn mann_whitney_examples() {
    let a = [1.0, 2.0, 3.0];
    let b = [4.0, 5.0, 6.0];
    let t = mann_whitney_u(&a, &b).unwrap();
    assert_eq!(t.u, 0.0);
    assert!((t.p - 0.1).abs() < 1e-12);
    let same = mann_whitney_u(&a, &a).unwrap();
    assert_eq!(same.u, 4.5);
    assert_eq!(same.p, 1.0);
    assert!(mann_whitney_u(&[], &b).is_err());
    assert!(mann_whitney_u(&[f64::NAN], &b).is_err());
}

#[test]
fn normal_approximation_is_close_at_fifteen() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let shift = rng.random_range(0.0..1.5);
        let a: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + shift).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() * 1.5).collect();
        let exact = mann_whitney_u(&a, &b).unwrap();
        let normal = mann_whitney_normal(&a, &b).unwrap();
        assert!(exact.exact && !normal.exact);
        assert!((exact.p - normal.p).abs() <= 0.02, "{} vs {}", exact.p, normal.p);
        let swapped = mann_whitney_u(&b, &a).unwrap();
        assert_eq!(swapped.u, 225.0 - exact.u);
        assert!((swapped.p - exact.p).abs() < 1e-12);
    }
}

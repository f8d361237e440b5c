use shapeflow::cohort::{simulate, SimConfig};
use shapeflow::deformation::integration_count;
use shapeflow::estimation::Observation;
use shapeflow::pipeline::{predict, MethodSpec, PredictConfig, PredictionTask};

#[test]
fn naive_prediction_integrates_nothing() {
    let config = SimConfig {
        n_subjects: 1,
        visits: 3,
        subdivisions: 1,
        ..SimConfig::default()
    };
    let cohort = simulate(&config).unwrap();
    let visits = &cohort.subjects[0].visits;
    let learning: Vec<Observation> = visits[..2].iter().map(|v| Observation::new(v.age, v.shape.clone())).collect();
    let task = PredictionTask {
        method: MethodSpec::NAIVE,
        learning: &learning,
        scores: None,
        reference: Some(&cohort.reference),
        target_times: vec![visits[2].age],
    };
    let before = integration_count();
    let p = predict(&task, &PredictConfig::default()).unwrap();
    assert_eq!(integration_count(), before);
    assert_eq!(p.samples[0].1, visits[1].shape);
}

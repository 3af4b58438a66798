use std::time::Instant;

use hgformer::losses::Betas;
use hgformer::model::{gradcheck_model, toy_batch, toy_model_config, ModelState};

#[test]
fn toy_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let config = toy_model_config();
    let state = ModelState::new(config.clone(), 7).unwrap();
    let batch = toy_batch(&config, 7).unwrap();
    assert_eq!(batch.samples(), 2);
    let report = gradcheck_model(&state, &batch, Betas::default(), None).unwrap();
    for g in &report.groups {
        println!(
            "{:<40} {:>5} {:e} {}",
            g.name,
            g.numel,
            g.max_relative_error,
            if g.zero_gradient { "zero" } else { "" }
        );
    }
    println!("worst {:e} in {:?}", report.worst(), start.elapsed());
    assert!(report.passed(), "offending: {:?}", report.offending());
    // each hyperedge's weight cancels against its own degree, so the
    // weight network never reaches the loss
    for g in report
        .groups
        .iter()
        .filter(|g| g.name.starts_with("quantizer.edge_weight"))
    {
        assert!(g.zero_gradient, "{}", g.name);
    }
    let live = report.groups.iter().filter(|g| !g.zero_gradient).count();
    assert!(live * 2 > report.groups.len(), "most groups should carry gradient");
}

#[test]
fn corrupted_gradient_is_detected_by_name() {
    let config = toy_model_config();
    let state = ModelState::new(config.clone(), 7).unwrap();
    let batch = toy_batch(&config, 7).unwrap();
    let report = gradcheck_model(&state, &batch, Betas::default(), Some(("unit3.spatial.key", 1.01))).unwrap();
    let names: Vec<_> = report.offending().iter().map(|g| g.name.clone()).collect();
    assert_eq!(names, vec!["unit3.spatial.key".to_string()]);
    assert!(gradcheck_model(&state, &batch, Betas::default(), Some(("nope", 2.0))).is_err());
}

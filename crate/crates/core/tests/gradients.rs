use guicoder::gradcheck::{run_all, LAYER_TOLERANCE, MODEL_TOLERANCE};

#[test]
fn every_backward_pass_matches_finite_differences() {
    let results = run_all(0);
    let names: Vec<&str> = results.iter().map(|r| r.name).collect();
    for r in &results {
        println!("{r}");
        assert!(r.checked > 0, "{} checked nothing", r.name);
        assert!(r.passed(), "{r}");
    }
    assert!(names.contains(&"model"), "{names:?}");
    let model = results.iter().find(|r| r.name == "model").unwrap();
    assert_eq!(model.tolerance, MODEL_TOLERANCE);
    assert!(results.iter().filter(|r| r.name != "model").all(|r| r.tolerance == LAYER_TOLERANCE));
}

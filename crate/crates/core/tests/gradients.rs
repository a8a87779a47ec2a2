use oabtg::training::{parameter_group, GradCheckFixture};

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let fixture = GradCheckFixture::new(seed).unwrap();
        let report = fixture.run(1e-5, 1e-4).unwrap();
        for g in &report.groups {
            println!("{:<48} {:<28} rel {:.2e} abs {:.2e}", g.name, parameter_group(&g.name), g.max_rel_error, g.max_abs_error);
        }
        assert!(report.passed(), "offending: {:?}", report.offending());
    }
}

use c2r_model::gradcheck::gradient_check;

#[test]
fn analytic_gradients_match_central_differences() {
    let report = gradient_check(3, 32).unwrap();
    for p in &report.probes {
        println!("{:<28} {:>6} {:>14.6e} {:>14.6e} {:.2e}", p.param, p.index, p.analytic, p.numeric, p.rel_error);
    }
    assert_eq!(report.probes.len(), 32);
    assert!(report.max_rel_error <= 1e-3, "max relative error {}", report.max_rel_error);
}

use crfd::gradcheck::{op_checks, render_loss_checks};

fn assert_all(reports: Vec<(String, crfd::gradcheck::GradCheckReport)>) {
    let failed: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(name, r)| format!("{name}: {:.3e} at {:?}", r.max_rel_err, r.worst))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(reports.iter().all(|(_, r)| r.checked > 0));
}

#[test]
fn every_op_matches_central_differences() {
    let reports = op_checks().unwrap();
    assert!(reports.len() >= 3 * 35);
    assert_all(reports);
}

#[test]
fn render_loss_matches_central_differences() {
    assert_all(render_loss_checks().unwrap());
}

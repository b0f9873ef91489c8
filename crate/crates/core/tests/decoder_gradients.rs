mod common;

use common::{gradient_ok, shifts_keys, TinyDecoder};

#[test]
fn tiny_decoder_matches_finite_differences() {
    let tiny = TinyDecoder::new(11).unwrap();
    let reports = tiny.gradient_reports().unwrap();
    assert!(reports.len() > 20);
    for (name, r) in &reports {
        assert!(
            gradient_ok(name, r, 1e-4),
            "{name}: {} at {} ({} vs {})",
            r.max_rel_error,
            r.worst,
            r.analytic[r.worst],
            r.numeric[r.worst]
        );
    }
}

#[test]
fn every_checked_tensor_receives_gradient() {
    let tiny = TinyDecoder::new(12).unwrap();
    let reports = tiny.gradient_reports().unwrap();
    let silent: Vec<&str> = reports
        .iter()
        .filter(|(n, r)| !shifts_keys(n) && r.analytic.iter().all(|&g| g == 0.0))
        .map(|(n, _)| n.as_str())
        .collect();
    assert!(silent.is_empty(), "{silent:?}");
}

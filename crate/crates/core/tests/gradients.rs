use infinet::gradcheck::{finite_difference_check, GradCheckConfig};
use infinet::gradsuite::{check_op, run_check, OP_NAMES};
use infinet::*;

#[test]
fn every_op_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for op in OP_NAMES {
        let s = run_check(op, 3, &cfg).unwrap();
        assert!(s.passed, "{s:?}");
        assert!(s.max_rel_error < 1e-4, "{s:?}");
        assert!(s.checked > 0, "{op} checked nothing");
    }
}

#[test]
fn composed_net_checks_almost_every_element() {
    let r = check_op("infinet", 0, &GradCheckConfig::default()).unwrap();
    assert!(r.passed);
    assert!(
        r.skipped() * 100 < r.checked(),
        "{} skipped of {}",
        r.skipped(),
        r.checked()
    );
}

#[test]
fn conv_gdl_composite_is_stable_across_step_sizes() {
    let x = Tensor::from_vec(
        Shape::new(1, 2, 4, 4),
        (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
    )
    .unwrap();
    let k = Tensor::from_vec(
        Shape::new(3, 2, 3, 3),
        (0..54).map(|i| ((i * 5 % 13) as f64 - 6.0) / 10.0).collect(),
    )
    .unwrap();
    let bias = Tensor::from_vec(Shape::vector(3), vec![0.1, -0.2, 0.05]).unwrap();
    let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
    let target = infinet::sampler::one_hot(&labels, Shape::new(1, 1, 4, 4), 3).cast::<f64>();
    let opts = GdlOptions::new(vec![1.0, 2.0, 3.0]);
    for h in [1e-4, 1e-5] {
        let cfg = GradCheckConfig {
            h,
            ..GradCheckConfig::default()
        };
        let r = finite_difference_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                let p = t.softmax_channels(y)?;
                t.gdl_loss(p, &target, &opts)
            },
            &[x.clone(), k.clone(), bias.clone()],
            &[true, true, true],
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "h = {h}: {r:?}");
    }
}

#[cfg(feature = "negative-control")]
#[test]
fn broken_gradient_is_caught() {
    let s = run_check(infinet::gradsuite::BROKEN_OP, 1, &GradCheckConfig::default()).unwrap();
    assert!(!s.passed);
    assert!(s.max_rel_error > 1e-2);
}

use infinet::phantom::{class_counts, class_frequencies, generate_phantom, generate_phantom_with_fields, PhantomSpec};
use infinet::volume::{extract_slice, read_volume, stack_slices, write_volume, Axis};

/// Complementary error function, Numerical Recipes `erfcc` (|rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Log-likelihood of an observed intensity under `clamp(mu + sigma * z, 0, 1)`.
fn log_lik(v: f64, mu: f64, sigma: f64) -> f64 {
    if v <= 0.0 {
        normal_cdf((0.0 - mu) / sigma).max(1e-300).ln()
    } else if v >= 1.0 {
        (1.0 - normal_cdf((1.0 - mu) / sigma)).max(1e-300).ln()
    } else {
        let z = (v - mu) / sigma;
        -0.5 * z * z
    }
}

#[test]
fn erfc_reference_values() {
    assert!((erfc(0.0) - 1.0).abs() < 1e-7);
    assert!((erfc(1.0) - 0.157_299_207_050_285_1).abs() < 1e-7);
    assert!((erfc(-0.5) - 1.520_499_877_813_046_5).abs() < 1e-7);
}

#[test]
fn joint_bayes_classifier_beats_either_modality() {
    let spec = PhantomSpec::default();
    assert!(spec.is_iso_intense());
    let (vol, fields) = generate_phantom_with_fields(&spec, 7).unwrap();
    let prior: Vec<f64> = class_frequencies(&vol.labels, 4).iter().map(|f| f.ln()).collect();
    let sigma = spec.noise_std;
    let mut correct = [0usize; 3];
    for i in 0..vol.voxels() {
        let (v1, v2) = (f64::from(vol.t1[i]), f64::from(vol.t2[i]));
        let mut best = [(f64::NEG_INFINITY, 0usize); 3];
        for l in 0..4 {
            let a = log_lik(v1, spec.contrast_t1[l] * fields.t1[i], sigma);
            let b = log_lik(v2, spec.contrast_t2[l] * fields.t2[i], sigma);
            for (k, score) in [prior[l] + a, prior[l] + b, prior[l] + a + b].into_iter().enumerate() {
                if score > best[k].0 {
                    best[k] = (score, l);
                }
            }
        }
        for k in 0..3 {
            correct[k] += usize::from(best[k].1 == usize::from(vol.labels[i]));
        }
    }
    let acc: Vec<f64> = correct.iter().map(|&c| c as f64 / vol.voxels() as f64).collect();
    assert!(acc[2] > acc[0], "joint {} vs T1 {}", acc[2], acc[0]);
    assert!(acc[2] > acc[1], "joint {} vs T2 {}", acc[2], acc[1]);
}

#[test]
fn default_frequencies_match_direct_counting() {
    let vol = generate_phantom(&PhantomSpec::default(), 3).unwrap();
    let f = class_frequencies(&vol.labels, 4);
    let mut direct = [0u64; 4];
    for &l in &vol.labels {
        direct[usize::from(l)] += 1;
    }
    assert_eq!(class_counts(&vol.labels, 4), direct.to_vec());
    for l in 0..4 {
        assert_eq!(f[l], direct[l] as f64 / vol.voxels() as f64);
        assert!(f[l] > 0.0);
    }
    assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_class_volume_gives_indicator() {
    assert_eq!(class_frequencies(&[2, 2, 2], 4), vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(class_frequencies(&[0, 1, 2, 3], 4), vec![0.25; 4]);
}

#[test]
fn default_phantom_file_round_trip_and_slicing() {
    let spec = PhantomSpec::iso_intense([16, 24, 32]);
    let vol = generate_phantom(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ivol");
    write_volume(&vol, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), vol);
    for axis in Axis::ALL {
        let (count, h, w) = axis.slice_geometry(vol.dims);
        let slices: Vec<_> = (0..count).map(|i| extract_slice(&vol, axis, i).unwrap()).collect();
        assert!(slices.iter().all(|s| s.height == h && s.width == w));
        assert_eq!(stack_slices(&vol, axis, &slices).unwrap(), vol);
    }
}

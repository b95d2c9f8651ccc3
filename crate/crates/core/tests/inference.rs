use infinet::inference::{aggregate_views, argmax_labels, segment_view, DiceReport, InferenceError, ProbabilityVolume};
use infinet::phantom::{generate_phantom, PhantomSpec};
use infinet::volume::{extract_slice, label_slice, Axis};
use infinet::*;

fn setup() -> (InfiNet<f32>, infinet::volume::LabeledVolume) {
    let net = build_infinet::<f32>(InfiNetConfig::default().with_base_channels(4), 2).unwrap();
    let vol = generate_phantom(&PhantomSpec::iso_intense([16, 24, 8]), 4).unwrap();
    (net, vol)
}

#[test]
fn restacked_slices_equal_standalone_forward() {
    let (net, vol) = setup();
    for axis in Axis::ALL {
        let p = segment_view(&net, &vol, axis, 3).unwrap();
        let (count, h, w) = axis.slice_geometry(vol.dims);
        for j in 0..count {
            let s = extract_slice(&vol, axis, j).unwrap();
            let shape = Shape::new(1, 1, h, w);
            let single = net
                .predict(
                    &Tensor::from_vec(shape, s.t1).unwrap(),
                    &Tensor::from_vec(shape, s.t2).unwrap(),
                )
                .unwrap();
            for l in 0..4 {
                let restacked = label_slice_f32(p.class_map(l), vol.dims, axis, j);
                let direct = single.plane(0, l);
                assert!(
                    restacked.iter().zip(direct).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{axis} slice {j} class {l}"
                );
            }
        }
    }
}

fn label_slice_f32(map: &[f32], dims: [usize; 3], axis: Axis, index: usize) -> Vec<f32> {
    let (_, h, w) = axis.slice_geometry(dims);
    (0..h * w).map(|k| map[axis.voxel(dims, index, k / w, k % w)]).collect()
}

#[test]
fn probabilities_are_normalized_everywhere() {
    let (net, vol) = setup();
    let p = segment_view(&net, &vol, Axis::Coronal, 8).unwrap();
    assert!(p.max_normalization_error() < 1e-5);
    assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(p, segment_view(&net, &vol, Axis::Coronal, 5).unwrap());
}

#[test]
fn incompatible_volume_is_rejected() {
    let (net, _) = setup();
    let vol = generate_phantom(&PhantomSpec::iso_intense([16, 16, 16]), 1).unwrap();
    // Same voxel count, but axial slices are 4x64.
    let mut odd = vol.clone();
    odd.dims = [16, 4, 64];
    assert!(matches!(
        segment_view(&net, &odd, Axis::Axial, 4),
        Err(InferenceError::Incompatible(_))
    ));
    let mut three = vol;
    three.num_classes = 3;
    assert!(segment_view(&net, &three, Axis::Axial, 4).is_err());
}

#[test]
fn one_hot_maps_recover_labels() {
    let (_, vol) = setup();
    let v = vol.voxels();
    let mut p = ProbabilityVolume::zeros(4, vol.dims);
    for (i, &l) in vol.labels.iter().enumerate() {
        p.data[usize::from(l) * v + i] = 1.0;
    }
    assert_eq!(argmax_labels(&p), vol.labels);
    let agg = aggregate_views(&[&p, &p, &p]).unwrap();
    assert_eq!(argmax_labels(&agg), vol.labels);
    let r = DiceReport::compute(&argmax_labels(&p), &vol.labels, 4).unwrap();
    assert!(r.classes.iter().all(|c| c.dice == 1.0));
    assert_eq!(r.mean_dice, 1.0);
    assert_eq!(label_slice(&vol.labels, vol.dims, Axis::Axial, 0).len(), 24 * 8);
}

#[test]
fn report_renders_and_rejects_mismatch() {
    let r = DiceReport::compute(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0], &[1, 1, 1, 0, 1, 1, 1, 0, 0, 0], 4).unwrap();
    assert_eq!(r.dice(1), Some(0.6));
    let table = r.to_table();
    assert!(table.lines().count() == 6);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["classes"][1]["dice"], 0.6);
    assert!(DiceReport::compute(&[0, 1], &[0], 4).is_err());
    assert!(DiceReport::compute(&[7], &[0], 4).is_err());
}

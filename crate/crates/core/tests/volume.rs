use dcadose::phantom::{generate, random_spec, DEFAULT_VOXEL_DIMS_MM};
use dcadose::volume::{
    assemble_input, augment, load_dose, load_patient, write_dose, write_patient, AugmentParams, Grid, Patient,
    Structure,
};
use proptest::prelude::*;

fn phantom(seed: u64, size: usize) -> Patient {
    generate(&random_spec(format!("p{seed}"), [size; 3], DEFAULT_VOXEL_DIMS_MM, seed)).unwrap()
}

#[test]
fn dropped_structure_does_not_reappear() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = phantom(3, 8);
    write_patient(&p, dir.path()).unwrap();
    let first = *p.structures.keys().next().unwrap();
    p.structures.remove(&first);
    write_patient(&p, dir.path()).unwrap();
    assert_eq!(load_patient(dir.path()).unwrap(), p);
}

#[test]
fn assembled_channels_follow_vocabulary() {
    let p = phantom(5, 8).prepare();
    let x = assemble_input(&p);
    assert_eq!(x.shape(), &[12, 8, 8, 8]);
    let n = 512;
    for s in Structure::ALL {
        let ch = &x.data()[s.channel() * n..(s.channel() + 1) * n];
        match p.structures.get(&s) {
            Some(m) => assert_eq!(ch, m.to_f64().as_slice()),
            None => assert!(ch.iter().all(|&v| v == 0.0)),
        }
    }
    assert_eq!(&x.data()[11 * n..], p.possible_dose_mask.to_f64().as_slice());
    assert_eq!(&x.data()[..n], p.ct.grid().data());
}

#[test]
fn augmentation_is_deterministic() {
    let p = phantom(1, 8).prepare();
    for seed in 0..20 {
        assert_eq!(augment(&p, seed), augment(&p, seed));
    }
}

#[test]
fn flip_on_first_axis_reverses_rows() {
    let p = phantom(2, 8).prepare();
    let seed = (0..10_000u64)
        .find(|&s| {
            let a = AugmentParams::sample(s);
            a.flip == [true, false, false]
                && a.shear.is_none()
                && a.zoom.is_none()
                && a.smooth_sigma.is_none()
                && a.contrast_gamma.is_none()
        })
        .expect("some seed flips only the first axis");
    let q = augment(&p, seed);
    for i in 0..8 {
        for j in 0..8 {
            for k in 0..8 {
                assert_eq!(q.dose.get(i, j, k), p.dose.get(7 - i, j, k));
                assert_eq!(q.ct.grid().get(i, j, k), p.ct.grid().get(7 - i, j, k));
                assert_eq!(q.possible_dose_mask.get(i, j, k), p.possible_dose_mask.get(7 - i, j, k));
                for (s, m) in &q.structures {
                    assert_eq!(m.get(i, j, k), p.structures[s].get(7 - i, j, k));
                }
            }
        }
    }
}

#[test]
fn unit_zoom_and_no_flip_is_identity() {
    let p = phantom(4, 8).prepare();
    let params = AugmentParams {
        zoom: Some(1.0),
        ..Default::default()
    };
    assert_eq!(params.apply(&p), p);
    assert!(AugmentParams::default().is_identity());
}

#[test]
fn standalone_dose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::from_fn([3, 4, 5], |i, j, k| if (i + j + k) % 3 == 0 { 0.0 } else { (i * j) as f64 + 0.1 * k as f64 });
    let path = dir.path().join("pred").join("dose.csv");
    write_dose(&path, &g).unwrap();
    assert_eq!(load_dose(&path, [3, 4, 5]).unwrap(), g);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn write_then_load_is_bit_exact(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut p = phantom(seed, 8);
        // Non-round values exercise full float formatting.
        for v in p.dose.data_mut() {
            *v *= 1.0 + 1e-9 * std::f64::consts::PI;
        }
        write_patient(&p, dir.path()).unwrap();
        let q = load_patient(dir.path()).unwrap();
        prop_assert_eq!(&q, &p);
        let bits = |g: &Grid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&q.dose), bits(&p.dose));
        prop_assert_eq!(bits(&q.ct.0), bits(&p.ct.0));
    }

    #[test]
    fn augmented_masks_stay_binary_and_dose_nonnegative(seed in any::<u64>()) {
        let p = phantom(seed % 7, 8).prepare();
        let q = augment(&p, seed);
        prop_assert!(q.dose.data().iter().all(|&d| d >= 0.0));
        prop_assert!(q.ct.grid().data().iter().all(|v| v.is_finite()));
        prop_assert_eq!(q.structures.len(), p.structures.len());
        prop_assert_eq!(q.shape(), p.shape());
    }
}

use super::*;
use crate::divergence::{layer_divergence, LayerStats, DEFAULT_FLOOR};

fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        ..Default::default()
    }
}

#[test]
fn samples_are_pure_functions_of_seed_and_id() {
    let ds = gen_dataset(&small_spec(), 5, 42).unwrap();
    let again = gen_dataset(&small_spec(), 5, 42).unwrap();
    for i in 0..5 {
        let (a, b) = (ds.sample(i).unwrap(), again.sample(i).unwrap());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image_a), bits(&b.image_a));
        assert_eq!(bits(&a.image_b), bits(&b.image_b));
        assert_eq!(bits(&a.mask), bits(&b.mask));
    }
    // A larger dataset with the same seed shares its prefix.
    let longer = gen_dataset(&small_spec(), 9, 42).unwrap();
    assert_eq!(longer.sample(3).unwrap(), ds.sample(3).unwrap());
    assert_ne!(ds.sample(0).unwrap().mask, ds.sample(1).unwrap().mask);
    let other = gen_dataset(&small_spec(), 5, 43).unwrap();
    assert_ne!(other.sample(0).unwrap().image_a, ds.sample(0).unwrap().image_a);
}

#[test]
fn sample_invariants() {
    let ds = gen_dataset(&small_spec(), 20, 1).unwrap();
    let mut overlap = false;
    for s in ds.iter() {
        let s = s.unwrap();
        assert_eq!(s.image_a.shape(), &[3, 32, 32]);
        assert_eq!(s.image_b.shape(), &[1, 32, 32]);
        assert_eq!(s.mask.shape(), &[7, 32, 32]);
        for t in [&s.image_a, &s.image_b] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let m = s.mask.data();
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        let hw = 32 * 32;
        for p in 0..hw {
            let fg: f64 = (1..7).map(|c| m[c * hw + p]).sum();
            assert_eq!(m[p], if fg > 0.0 { 0.0 } else { 1.0 });
            overlap |= fg > 1.0;
        }
    }
    assert!(overlap, "foreground classes should sometimes overlap");
}

#[test]
fn degenerate_shift_gives_luminance() {
    let spec = SceneSpec {
        appearance: AppearanceShift::identity(),
        ..small_spec()
    };
    let s = gen_dataset(&spec, 1, 7).unwrap().sample(0).unwrap();
    let hw = 32 * 32;
    let a = s.image_a.data();
    for p in 0..hw {
        let luma = 0.299 * a[p] + 0.587 * a[hw + p] + 0.114 * a[2 * hw + p];
        assert!((s.image_b.data()[p] - luma).abs() < 1e-15);
    }
}

#[test]
fn class_frequency_matches_spec() {
    let spec = SceneSpec {
        frequencies: vec![0.3, 0.005],
        ..SceneSpec::default()
    };
    let ds = gen_dataset(&spec, 200, 3).unwrap();
    let freq = empirical_frequencies(&ds, 200).unwrap();
    assert!((freq[1] - 0.3).abs() < 0.05, "{freq:?}");
    assert!(freq[2] < 0.02, "{freq:?}");
}

#[test]
fn default_frequencies_within_tolerance() {
    let spec = SceneSpec::default();
    let ds = gen_dataset(&spec, 200, 11).unwrap();
    let freq = empirical_frequencies(&ds, 200).unwrap();
    for (k, &f) in spec.frequencies.iter().enumerate() {
        assert!((freq[k + 1] - f).abs() < 0.05, "class {} {freq:?}", k + 1);
    }
}

#[test]
fn frequency_edge_cases() {
    let none = SceneSpec {
        frequencies: vec![0.0, 0.0],
        ..small_spec()
    };
    let freq = empirical_frequencies(&gen_dataset(&none, 3, 0).unwrap(), 3).unwrap();
    assert_eq!(&freq[1..], &[0.0, 0.0]);
    let full = SceneSpec {
        frequencies: vec![1.0, 0.0],
        ..small_spec()
    };
    let freq = empirical_frequencies(&gen_dataset(&full, 3, 0).unwrap(), 3).unwrap();
    assert_eq!(freq, vec![0.0, 1.0, 0.0]);
}

#[test]
fn invalid_specs_rejected() {
    let over = SceneSpec {
        frequencies: vec![0.6, 0.5, 0.001],
        ..small_spec()
    };
    assert!(matches!(gen_dataset(&over, 1, 0), Err(Error::Config(_))));
    let no_rare = SceneSpec {
        frequencies: vec![0.2, 0.1],
        ..small_spec()
    };
    assert!(gen_dataset(&no_rare, 1, 0).is_err());
    assert!(gen_dataset(&small_spec(), 0, 0).is_err());
}

#[test]
fn modalities_differ_at_the_input() {
    let ds = gen_dataset(&SceneSpec::default(), 16, 5).unwrap();
    let mut a = LayerStats::new("input", 3);
    let mut b = LayerStats::new("input", 3);
    for s in ds.iter() {
        let s = s.unwrap();
        a.accumulate(&Tensor::stack(&[s.input(Modality::A)]).unwrap()).unwrap();
        b.accumulate(&Tensor::stack(&[s.input(Modality::B)]).unwrap()).unwrap();
    }
    let d = layer_divergence(&a, &b, DEFAULT_FLOOR).unwrap().value;
    assert!(d > 0.1, "{d}");
}

#[test]
fn batches_and_modality_b_input() {
    let ds = gen_dataset(&small_spec(), 5, 2).unwrap();
    let s = ds.sample(0).unwrap();
    let x = s.input(Modality::B);
    assert_eq!(&x.data()[..1024], s.image_b.data());
    assert_eq!(&x.data()[2048..], s.image_b.data());
    let batches = ds.input_batches(Modality::A, 2).unwrap();
    assert_eq!(batches.iter().map(|b| b.shape()[0]).collect::<Vec<_>>(), vec![2, 2, 1]);
    let (x, y) = make_batch(&[s.clone(), s], Modality::A).unwrap();
    assert_eq!((x.shape(), y.shape()), (&[2, 3, 32, 32][..], &[2, 7, 32, 32][..]));
}

#[test]
fn export_round_trip() {
    let ds = gen_dataset(&small_spec(), 3, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.classes(), 7);
    for i in 0..3 {
        let (a, b) = (ds.sample(i).unwrap(), back.sample(i).unwrap());
        assert_eq!(a.mask, b.mask);
        assert_eq!((a.id, a.seed), (b.id, b.seed));
        assert!(a.image_a.max_abs_diff(&b.image_a).unwrap() < 1e-7);
    }
    // Re-exporting the imported copy reproduces the files byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    export_dataset(&back, dir2.path()).unwrap();
    for name in ["manifest.txt", "sample_000002/imageA", "sample_000001/mask"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(dir2.path().join(name)).unwrap()
        );
    }
    assert!(import_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn modality_parsing() {
    assert_eq!("B".parse::<Modality>().unwrap(), Modality::B);
    assert_eq!(Modality::A.other(), Modality::B);
    assert!("C".parse::<Modality>().is_err());
}

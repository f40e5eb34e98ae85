use exconsist::data::{load_dataset, save_dataset, shift_domain, split_limited, synth_generate, SynthParams};

#[test]
fn save_load_save_is_stable() {
    let ds = synth_generate(4, 32, 48, &SynthParams::default(), 3).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_dataset(&ds, a.path()).unwrap();
    let once = load_dataset(a.path(), 32, 48).unwrap();
    // synthetic pixels are already on the 8-bit grid, so nothing is lost
    assert_eq!(once.ids(), ds.ids());
    for (x, y) in once.items.iter().zip(&ds.items) {
        assert_eq!(x.mask, y.mask);
        let err = x.image.iter().zip(&y.image).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
        assert!(err < 1e-6);
    }
    save_dataset(&once, b.path()).unwrap();
    let twice = load_dataset(b.path(), 32, 48).unwrap();
    assert_eq!(twice.items, once.items);
}

#[test]
fn resizing_on_load_keeps_masks_binary() {
    let ds = synth_generate(2, 64, 64, &SynthParams::default(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let small = load_dataset(dir.path(), 32, 32).unwrap();
    assert_eq!((small.height, small.width), (32, 32));
    assert!(small.items.iter().all(|it| it.mask.as_ref().unwrap().len() == 32 * 32));
    assert!(small.items.iter().all(|it| it.image.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn unlabeled_directories_load_without_masks() {
    let ds = synth_generate(3, 32, 32, &SynthParams::default(), 6).unwrap().without_masks();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert!(!dir.path().join("masks").exists());
    let back = load_dataset(dir.path(), 32, 32).unwrap();
    assert!(back.items.iter().all(|it| it.mask.is_none()));
}

#[test]
fn orphan_and_missing_masks_are_errors() {
    let ds = synth_generate(2, 32, 32, &SynthParams::default(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("masks").join(format!("{}.png", ds.items[0].id))).unwrap();
    let err = load_dataset(dir.path(), 32, 32).unwrap_err().to_string();
    assert!(err.contains(&ds.items[0].id), "{err}");

    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images").join(format!("{}.png", ds.items[1].id))).unwrap();
    let err = load_dataset(dir.path(), 32, 32).unwrap_err().to_string();
    assert!(err.contains(&ds.items[1].id), "{err}");
}

#[test]
fn limited_split_is_seeded_and_disjoint() {
    let ds = synth_generate(10, 16, 16, &SynthParams::default(), 8).unwrap();
    let (l1, u1) = split_limited(&ds, 3, 42).unwrap();
    let (l2, u2) = split_limited(&ds, 3, 42).unwrap();
    assert_eq!((l1.ids(), u1.ids()), (l2.ids(), u2.ids()));
    assert_eq!((l1.len(), u1.len()), (3, 7));
    assert!(l1.is_fully_labeled());
    assert!(u1.items.iter().all(|it| it.mask.is_none()));
    assert!(l1.ids().iter().all(|id| !u1.ids().contains(id)));
}

#[test]
fn domain_shift_keeps_masks_and_changes_colors() {
    let ds = synth_generate(2, 16, 16, &SynthParams::default(), 9).unwrap();
    let shifted = shift_domain(&ds);
    for (a, b) in ds.items.iter().zip(&shifted.items) {
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image, b.image);
    }
}

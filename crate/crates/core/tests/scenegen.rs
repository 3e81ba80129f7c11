use std::collections::HashSet;
use std::fs;

use wedepth_core::scenegen::{generate, read_sample, verify_sample, Dataset, SceneConfig, Split};
use wedepth_core::train::load_split;
use wedepth_core::Error;

fn tiny() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    }
}

#[test]
fn a_thousand_seeds_give_a_thousand_scenes() {
    let cfg = tiny();
    let sums: HashSet<String> = (0..1000).map(|s| generate(s, &cfg).unwrap().checksum()).collect();
    assert_eq!(sums.len(), 1000);
}

#[test]
fn valid_pixels_lie_inside_the_range() {
    let cfg = tiny();
    for seed in 0..50 {
        let s = generate(seed, &cfg).unwrap();
        assert!(s.valid_fraction() > 0.85, "seed {seed}: {}", s.valid_fraction());
        for (d, &v) in s.depth.data().iter().zip(&s.valid) {
            if v {
                assert!((cfg.depth.min as f32..=cfg.depth.max as f32).contains(d));
            } else {
                assert_eq!(*d, 0.0);
            }
        }
        assert!(s.rgb.data().iter().all(|c| (0.0..=1.0).contains(c)));
    }
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = Dataset::generate(dir.path(), &cfg, 100, 3, 2).unwrap();
    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.index, reopened.index);
    assert_eq!(reopened.entries(Split::Train).len(), 3);
    assert_eq!(reopened.entries(Split::Test).len(), 2);
    let test = reopened.load(Split::Test).unwrap();
    assert_eq!(test[0], generate(103, &cfg).unwrap());
    for e in &reopened.index.samples {
        assert!(verify_sample(&dir.path().join(&e.dir)).unwrap());
    }
    assert_eq!(load_split(dir.path(), Split::Train).unwrap().len(), 3);
}

#[test]
fn damaged_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::generate(dir.path(), &tiny(), 7, 2, 0).unwrap();
    let sample = dir.path().join("00000");
    let rgb = sample.join("rgb.wtns");
    let mut bytes = fs::read(&rgb).unwrap();
    bytes[0] = b'Q';
    fs::write(&rgb, &bytes).unwrap();
    assert!(matches!(read_sample(&sample), Err(Error::Format { .. })));

    // A readable but altered buffer fails verification instead.
    let other = dir.path().join("00001");
    let depth = other.join("depth.wtns");
    let mut bytes = fs::read(&depth).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&depth, &bytes).unwrap();
    assert!(!verify_sample(&other).unwrap());
}

#[test]
fn missing_index_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(Error::Io { .. })));
}

use std::collections::BTreeSet;
use std::sync::Arc;

use num_complex::Complex32;
use proptest::prelude::*;
use rfssl::config::{ExperimentConfig, Profile};
use rfssl::datastore::{make_splits, read_npy, stratified_frame_indices, write_npy, FrameSet, Manifest, SplitSpec};
use rfssl::iq::ComplexMatrix;
use rfssl::sigsynth::{synthesize_dataset, synthesize_recordings, DatasetGrid, Modulation, RecordingMeta};
use rfssl_numerics::Exec;

fn smoke_grid() -> DatasetGrid {
    ExperimentConfig::for_profile(Profile::Smoke).dataset.grid
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn npy_round_trip_is_bitwise_exact(
        rows in 1usize..6,
        cols in 1usize..300,
        bits in proptest::collection::vec(any::<u32>(), 2 * 6 * 300),
    ) {
        // Any finite bit pattern, subnormals and negative zero included.
        let finite = |b: u32| {
            let x = f32::from_bits(b);
            if x.is_finite() { x } else { f32::from_bits(b & 0xff7f_ffff) }
        };
        let data: Vec<Complex32> = (0..rows * cols)
            .map(|i| Complex32::new(finite(bits[2 * i]), finite(bits[2 * i + 1])))
            .collect();
        let m = ComplexMatrix::new(rows, cols, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        write_npy(&path, &m).unwrap();
        let back = read_npy(&path).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.data().iter().zip(m.data()) {
            prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
            prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }
}

#[test]
fn non_finite_samples_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = ComplexMatrix::new(1, 2, vec![Complex32::new(0.0, f32::NAN), Complex32::new(1.0, 0.0)]).unwrap();
    assert!(write_npy(&dir.path().join("nan.npy"), &m).is_err());
}

#[test]
fn dev_and_test_recordings_never_overlap() {
    let metas: Vec<RecordingMeta> = (0..300)
        .map(|i| RecordingMeta {
            azimuth_deg: DatasetGrid::even_angles(5)[i % 5],
            elevation_deg: DatasetGrid::even_angles(5)[(i / 5) % 5],
            modulation: Modulation::from_index((i / 25) % 6).unwrap(),
            snr_db: 10.0,
            seed: i as u64,
        })
        .collect();
    for seed in 0..100 {
        let spec = SplitSpec {
            seed,
            label_ratio: 0.1,
            ..SplitSpec::default()
        };
        let s = make_splits(&metas, &spec).unwrap();
        let dev: BTreeSet<usize> = s.dev.iter().copied().collect();
        let test: BTreeSet<usize> = s.test.iter().copied().collect();
        assert!(dev.is_disjoint(&test), "seed {seed}");
        assert_eq!(dev.len() + test.len(), metas.len());
        assert!(s.labeled.iter().all(|i| dev.contains(i)));
        s.check_leak_free().unwrap();
    }
}

#[test]
fn rerun_reproduces_files_and_checksum() {
    let grid = smoke_grid();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synthesize_dataset(&grid, 1, a.path(), Exec::default()).unwrap();
    let mb = synthesize_dataset(&grid, 1, b.path(), Exec::Sequential).unwrap();
    assert_eq!(ma.checksum().unwrap(), mb.checksum().unwrap());
    assert_eq!(ma.len(), grid.num_cells());
    for e in &ma.entries {
        let x = std::fs::read(a.path().join(&e.path)).unwrap();
        let y = std::fs::read(b.path().join(&e.path)).unwrap();
        assert_eq!(x, y, "{}", e.path);
    }
    let read = Manifest::read(&a.path().join(Manifest::FILE_NAME)).unwrap();
    assert_eq!(read, ma);
    let loaded = read.load_recordings(a.path(), Exec::default()).unwrap();
    let direct = synthesize_recordings(&grid, 1, Exec::default()).unwrap();
    assert_eq!(loaded, direct);
}

#[test]
fn per_cell_scales_counts_and_keeps_balance() {
    let grid = smoke_grid();
    for per_cell in [1, 2] {
        let configs = grid.configs(per_cell).unwrap();
        assert_eq!(configs.len(), grid.num_cells() * per_cell);
        for m in &grid.modulations {
            let n = configs.iter().filter(|c| c.modulation == *m).count();
            assert_eq!(n, configs.len() / grid.modulations.len());
        }
    }
    let mut empty = grid.clone();
    empty.azimuths_deg.clear();
    assert!(empty.configs(1).is_err());
}

#[test]
fn frame_subsets_are_balanced_and_nested_in_the_pool() {
    let grid = smoke_grid();
    let recs = Arc::new(synthesize_recordings(&grid, 1, Exec::default()).unwrap());
    let ids: Vec<usize> = (0..recs.len()).collect();
    let frames = FrameSet::new(recs, &ids, 512).unwrap();
    let idx = stratified_frame_indices(&frames, 0.1, 4).unwrap();
    assert_eq!(idx.len(), (frames.len() as f64 * 0.1).ceil() as usize);
    assert!(idx.windows(2).all(|w| w[0] < w[1]) && *idx.last().unwrap() < frames.len());
    let mods: BTreeSet<Modulation> = idx.iter().map(|&i| frames.labels(i).modulation).collect();
    assert_eq!(mods.len(), grid.modulations.len());
    assert!(stratified_frame_indices(&frames, 0.0, 4).is_err());
}

use std::fs;

use difftomo::dataio::{self, DatasetSpec, Split};
use difftomo::forward::AcquisitionGeometry;

#[test]
fn desk_scale_dataset_passes_re_reader() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        seed: 11,
        ..DatasetSpec::default()
    };
    let manifest = dataio::generate_dataset(&spec, dir.path(), false).unwrap();
    let reread = dataio::validate_dataset(dir.path()).unwrap();
    assert_eq!(manifest, reread);
    assert_eq!(reread.examples.len(), 60);
    assert_eq!(
        (
            reread.entries(Split::Train).count(),
            reread.entries(Split::Validation).count(),
            reread.entries(Split::Test).count()
        ),
        (50, 5, 5)
    );

    let geom = AcquisitionGeometry::default();
    let stack_bytes = 32 + 8 * geom.layers * geom.grid.len();
    let meas_bytes = 32 + 8 * 22 * geom.grid.len();
    for e in &reread.examples {
        let len = |p: &str| fs::metadata(dir.path().join(p)).unwrap().len() as usize;
        assert_eq!(len(&e.truth), stack_bytes);
        assert_eq!(len(&e.approximant), stack_bytes);
        assert_eq!(len(&e.measurements), meas_bytes);
    }
    // test-split renders: truth and approximant, one image per layer
    let renders = fs::read_dir(dir.path().join("renders"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(renders, 5 * 2 * geom.layers);

    let ex = dataio::load_example(dir.path(), &reread.examples[0]).unwrap();
    assert_eq!(ex.meta.cost_history.len(), 9);
    assert!(ex.meta.noise_seed.is_some());
}

use std::fs;
use std::path::Path;

use introspect_core::detector::{
    ActivationBundle, Detection, DetectorConfig, GridConfig, PillarDetector,
};
use introspect_core::errorset::{
    build_error_dataset, label_frame, read_detections, read_error_dataset, ErrorSetConfig,
    FrameDetector, Label, Split, INDEX_FILE,
};
use introspect_core::scene::{generate_dataset, PointCloudScene, SceneConfig};
use introspect_core::Result;
use introspect_nn::{Rng64, Tensor};

/// Returns boxes chosen by `f` with the activations of an untrained
/// backbone.
struct Scripted<F> {
    backbone: PillarDetector,
    f: F,
}

impl<F: Fn(&PointCloudScene) -> Vec<Detection>> FrameDetector for Scripted<F> {
    fn grid(&self) -> &GridConfig {
        self.backbone.grid()
    }

    fn detect(
        &self,
        scene: &PointCloudScene,
        ppc: &Tensor,
    ) -> Result<(Vec<Detection>, ActivationBundle)> {
        let (_, bundle) = self.backbone.forward(ppc, true, &scene.scene_id)?;
        Ok(((self.f)(scene), bundle.unwrap()))
    }
}

fn scripted<F: Fn(&PointCloudScene) -> Vec<Detection>>(f: F) -> Scripted<F> {
    Scripted {
        backbone: PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 3).unwrap(),
        f,
    }
}

fn scenes(root: &Path, n: usize) -> SceneConfig {
    let cfg = SceneConfig::default();
    generate_dataset(&cfg, n, 500, root).unwrap();
    cfg
}

#[test]
fn silent_detector_labels_everything_error() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(&tmp.path().join("scenes"), 12);
    let det = scripted(|_| Vec::new());
    let ds = build_error_dataset(
        &tmp.path().join("scenes"),
        &det,
        &ErrorSetConfig::default(),
        1,
        &tmp.path().join("es"),
        |_, _| {},
    )
    .unwrap();
    assert_eq!(ds.records.len(), 12);
    for r in &ds.records {
        assert!(r.n_gt >= 1);
        assert_eq!((r.label, r.n_missed), (1, r.n_gt));
    }
}

#[test]
fn ground_truth_echo_labels_everything_noerror() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(&tmp.path().join("scenes"), 12);
    let det = scripted(|s| {
        s.gt_boxes
            .iter()
            .map(|b| Detection {
                bbox: *b,
                score: 1.0,
            })
            .collect()
    });
    let ds = build_error_dataset(
        &tmp.path().join("scenes"),
        &det,
        &ErrorSetConfig::default(),
        1,
        &tmp.path().join("es"),
        |_, _| {},
    )
    .unwrap();
    assert!(ds.records.iter().all(|r| r.label == 0 && r.n_missed == 0));
    assert_eq!(ds.class_counts(), (0, 12));
}

/// Shifts each box by a seeded offset so some frames match and some miss.
fn jittered(s: &PointCloudScene) -> Vec<Detection> {
    let mut rng = Rng64::new(s.seed);
    s.gt_boxes
        .iter()
        .map(|b| {
            let mut bbox = *b;
            bbox.cx += rng.uniform_range(-0.5, 0.5);
            bbox.cy += rng.uniform_range(-0.3, 0.3);
            Detection { bbox, score: 0.8 }
        })
        .collect()
}

#[test]
fn stored_labels_equal_relabelled_detections() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(&tmp.path().join("scenes"), 40);
    let cfg = ErrorSetConfig::default();
    let out = tmp.path().join("es");
    build_error_dataset(
        &tmp.path().join("scenes"),
        &scripted(jittered),
        &cfg,
        9,
        &out,
        |_, _| {},
    )
    .unwrap();
    let ds = read_error_dataset(&out).unwrap();
    let dets = read_detections(&out).unwrap();
    assert_eq!(ds.records.len(), dets.len());
    for (r, d) in ds.records.iter().zip(&dets) {
        assert_eq!(r.frame_id, d.frame_id);
        let (label, missed) = label_frame(&d.gt, &d.detections, &cfg.rule);
        assert_eq!((label.as_u8(), missed), (r.label, r.n_missed));
        let bundle = ds.load_bundle(r).unwrap();
        assert_eq!(
            bundle.shapes(),
            [vec![8, 64, 64], vec![128, 16, 16], vec![256, 8, 8]]
        );
    }
    let (n_err, n_ok) = ds.class_counts();
    assert!(
        n_err > 0 && n_ok > 0,
        "jitter should produce both labels: {n_err} / {n_ok}"
    );
    assert_eq!(
        ds.records
            .iter()
            .filter(|r| r.label() == Label::Error)
            .count(),
        n_err
    );
}

#[test]
fn rebuild_is_byte_identical_and_splits_cover_records() {
    let tmp = tempfile::tempdir().unwrap();
    scenes(&tmp.path().join("scenes"), 20);
    let cfg = ErrorSetConfig::default();
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        build_error_dataset(
            &tmp.path().join("scenes"),
            &scripted(jittered),
            &cfg,
            4,
            &out,
            |_, _| {},
        )
        .unwrap();
        texts.push(fs::read_to_string(out.join(INDEX_FILE)).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
    let ds = read_error_dataset(&tmp.path().join("a")).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| ds.split(s).len()).collect();
    assert_eq!(sizes, vec![14, 3, 3]);
}

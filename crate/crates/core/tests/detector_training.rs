use std::borrow::Cow;

use introspect_core::detector::{
    pillarize, prepare_frames, train_detector_streaming, DetectorConfig, DetectorHyper, GridConfig,
    PillarDetector,
};
use introspect_core::errorset::{label_frame, Label, MatchRule};
use introspect_core::scene::{generate_scene, SceneConfig};

fn nonzero_fraction(data: &[f32]) -> f64 {
    data.iter().filter(|v| **v != 0.0).count() as f64 / data.len() as f64
}

#[test]
fn ppc_is_sparse_on_default_scenes() {
    let cfg = SceneConfig::default();
    let grid = GridConfig::default();
    let mut total = 0.0;
    for seed in 0..200 {
        let ppc = pillarize(&generate_scene(&cfg, seed).unwrap(), &grid).unwrap();
        total += nonzero_fraction(ppc.data());
    }
    assert!(total / 200.0 < 0.10, "{}", total / 200.0);
}

/// Trains the default detector briefly, then checks that the loss falls and
/// that frames containing a heavily thinned object are missed more often
/// than the rest.
#[test]
fn default_training_lowers_loss_and_misses_track_point_loss() {
    let cfg = SceneConfig::default();
    let hyper = DetectorHyper {
        epochs: 10,
        ..DetectorHyper::default()
    };
    let mut det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 1).unwrap();
    let probe = det.clone();
    let n = hyper.n_train_scenes as u64;
    let logs = train_detector_streaming(
        &mut det,
        &hyper,
        2,
        |epoch| {
            let scenes: Vec<_> = (0..n)
                .map(|i| generate_scene(&cfg, 10_000 + epoch as u64 * n + i).unwrap())
                .collect();
            Ok(Cow::Owned(prepare_frames(
                &probe,
                &scenes,
                hyper.min_target_points,
            )?))
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(logs.len(), 10);
    assert!(
        logs[9].loss < logs[0].loss,
        "{} vs {}",
        logs[9].loss,
        logs[0].loss
    );

    let rule = MatchRule::default();
    let (mut heavy, mut heavy_miss, mut light, mut light_miss) = (0, 0, 0, 0);
    for seed in 900_000..900_400u64 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let ppc = pillarize(&scene, det.grid()).unwrap();
        let (dets, bundle) = det.forward(&ppc, true, "f").unwrap();
        assert!(bundle.unwrap().all_finite());
        let miss = label_frame(&scene.gt_boxes, &dets, &rule).0 == Label::Error;
        if scene.visibility.iter().any(|&v| v < 0.2) {
            heavy += 1;
            heavy_miss += usize::from(miss);
        } else {
            light += 1;
            light_miss += usize::from(miss);
        }
    }
    let p_heavy = heavy_miss as f64 / heavy as f64;
    let p_light = light_miss as f64 / light as f64;
    assert!(heavy >= 30 && light >= 30, "{heavy} / {light}");
    assert!(
        p_heavy > p_light,
        "P(miss | thinned) {p_heavy} <= P(miss | rest) {p_light}"
    );
}

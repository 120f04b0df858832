use introspect_core::evaluation::{eigen_cam, eigen_cam_map};
use introspect_core::introspector::{Introspector, IntrospectorConfig};
use introspect_core::naps::{NapMode, NapTensor};
use introspect_nn::{Rng64, Tensor};

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `A_c = w_c * M` for a non-negative pattern `M`, optionally with noise.
fn planted(rng: &mut Rng64, c: usize, h: usize, w: usize, noise: f64) -> (Tensor, Vec<f64>) {
    let m: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (-((y - 3.0).powi(2) + (x - 5.0).powi(2)) / 6.0).exp() + 0.3 * rng.uniform()
        })
        .collect();
    let weights: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let mut data = Vec::with_capacity(c * h * w);
    for wc in &weights {
        data.extend(m.iter().map(|mv| (wc * mv + noise * rng.normal()) as f32));
    }
    (Tensor::from_vec(&[c, h, w], data), m)
}

#[test]
fn rank_one_activations_recover_the_pattern() {
    let mut rng = Rng64::new(8);
    for trial in 0..20 {
        let noise = if trial % 2 == 0 { 0.0 } else { 1e-3 };
        let (act, m) = planted(&mut rng, 16, 9, 11, noise);
        let map = eigen_cam_map(&act).unwrap();
        assert_eq!(map.shape(), &[9, 11]);
        let got: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
        let want = min_max(&m);
        assert!(cosine(&got, &want) > 0.999, "trial {trial}");
        if noise == 0.0 {
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn positive_scaling_invariance() {
    let mut rng = Rng64::new(21);
    for _ in 0..20 {
        let data: Vec<f32> = (0..32 * 6 * 6)
            .map(|_| rng.normal().max(0.0) as f32)
            .collect();
        let act = Tensor::from_vec(&[32, 6, 6], data.clone());
        let base = eigen_cam_map(&act).unwrap();
        assert!(base.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for s in [1e-3f32, 0.5, 7.25, 1e3] {
            let scaled = Tensor::from_vec(&[32, 6, 6], data.iter().map(|v| v * s).collect());
            let m = eigen_cam_map(&scaled).unwrap();
            for (a, b) in base.data().iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-6, "scale {s}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn introspector_heatmap_has_input_resolution() {
    let cfg = IntrospectorConfig::new(NapMode::Mla, vec![128, 16, 16], 0.25);
    let model = Introspector::new(cfg, 4).unwrap();
    let mut rng = Rng64::new(4);
    let nap = NapTensor {
        data: Tensor::from_vec(
            &[128, 16, 16],
            (0..128 * 256).map(|_| rng.uniform() as f32).collect(),
        ),
        mode: NapMode::Mla,
        source_frame: "f".into(),
    };
    let (heat, stage) = eigen_cam(&model, &nap).unwrap();
    assert_eq!(heat.shape(), &[16, 16]);
    assert!(stage <= 3);
    assert!(heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let sf = Introspector::new(IntrospectorConfig::new(NapMode::Sf, vec![768], 0.25), 4).unwrap();
    let vec_nap = NapTensor {
        data: Tensor::zeros(&[768]),
        mode: NapMode::Sf,
        source_frame: "f".into(),
    };
    assert!(eigen_cam(&sf, &vec_nap).is_err());
}

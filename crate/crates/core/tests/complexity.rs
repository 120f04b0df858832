use introspect_core::detector::{DetectorConfig, GridConfig, PillarDetector};
use introspect_core::evaluation::{count_flops, count_layers, layer_macs, FlopUnit};
use introspect_core::introspector::{stage_widths, Introspector, IntrospectorConfig, ResNet18};
use introspect_core::naps::NapMode;
use introspect_nn::{LayerInfo, LayerOp, Module, Rng64, Summarize};

/// Trainable parameters of the 18-layer residual network: convolutions
/// without bias, two affine scalars per batch-norm channel, 1x1 projection
/// shortcuts where the shape changes, and a biased linear head.
fn resnet18_params(in_ch: usize, widths: [usize; 4], n_classes: usize) -> usize {
    let conv_bn = |k: usize, i: usize, o: usize| k * k * i * o + 2 * o;
    let mut n = conv_bn(7, in_ch, widths[0]);
    let mut prev = widths[0];
    for (s, &c) in widths.iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        n += conv_bn(3, prev, c) + conv_bn(3, c, c);
        if stride != 1 || prev != c {
            n += conv_bn(1, prev, c);
        }
        n += 2 * conv_bn(3, c, c);
        prev = c;
    }
    n + prev * n_classes + n_classes
}

#[test]
fn full_width_parameter_count() {
    let net = ResNet18::new(3, 1.0, 2, &mut Rng64::new(0));
    assert_eq!(resnet18_params(3, [64, 128, 256, 512], 2), 11_177_538);
    assert_eq!(net.num_parameters(), 11_177_538);
}

#[test]
fn slim_parameter_counts_follow_formula() {
    for (in_ch, w) in [(8, 0.25), (128, 0.25), (392, 0.5), (256, 0.125)] {
        let widths = stage_widths(w);
        let net = ResNet18::new(in_ch, w, 2, &mut Rng64::new(1));
        assert_eq!(
            net.num_parameters(),
            resnet18_params(in_ch, widths, 2),
            "in {in_ch} w {w}"
        );
    }
}

fn mode_macs() -> Vec<(NapMode, u64)> {
    let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 0).unwrap();
    let [ppc, mla, lla] = det.tap_shapes();
    NapMode::ALL
        .iter()
        .map(|&mode| {
            let shape = mode.input_shape(ppc, mla, lla);
            let model =
                Introspector::new(IntrospectorConfig::new(mode, shape.clone(), 0.25), 0).unwrap();
            (mode, count_flops(&model, &shape, FlopUnit::Macs).unwrap())
        })
        .collect()
}

#[test]
fn flops_ordering_across_modes() {
    let m: std::collections::HashMap<NapMode, u64> = mode_macs().into_iter().collect();
    let (ppc, mla, lla, cat) = (
        m[&NapMode::Ppc],
        m[&NapMode::Mla],
        m[&NapMode::Lla],
        m[&NapMode::Concat],
    );
    assert!(
        ppc > mla && mla > cat && cat > lla,
        "{ppc} {mla} {cat} {lla}"
    );
    assert!((cat as f64 / lla as f64) < (mla as f64 / lla as f64));
    assert!(m[&NapMode::Sf] < lla);
}

#[test]
fn flop_toggle_doubles_macs() {
    let shape = vec![128, 16, 16];
    let model = Introspector::new(
        IntrospectorConfig::new(NapMode::Mla, shape.clone(), 0.25),
        0,
    )
    .unwrap();
    let macs = count_flops(&model, &shape, FlopUnit::Macs).unwrap();
    assert_eq!(
        count_flops(&model, &shape, FlopUnit::Flops).unwrap(),
        2 * macs
    );
}

fn conv(i: usize, o: usize, k: usize, h: usize, w: usize) -> LayerInfo {
    LayerInfo {
        name: "c".into(),
        op: LayerOp::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            bias: false,
        },
        input: vec![i, h, w],
        output: vec![o, h, w],
    }
}

#[test]
fn per_layer_formula() {
    assert_eq!(layer_macs(&conv(1, 1, 3, 8, 8)).unwrap(), 576);
    let lin = LayerInfo {
        name: "fc".into(),
        op: LayerOp::Linear {
            in_features: 100,
            out_features: 2,
            bias: true,
        },
        input: vec![100],
        output: vec![2],
    };
    assert_eq!(layer_macs(&lin).unwrap(), 200);
    for (i, o, k) in [(3, 16, 3), (16, 32, 1), (8, 8, 7)] {
        let small = count_layers(&[conv(i, o, k, 10, 12)]).unwrap();
        assert_eq!(count_layers(&[conv(i, o, k, 20, 24)]).unwrap(), 4 * small);
    }
    let opaque = LayerInfo {
        name: "x".into(),
        op: LayerOp::Opaque("Lstm".into()),
        input: vec![1],
        output: vec![1],
    };
    assert!(count_layers(&[conv(1, 1, 3, 8, 8), opaque]).is_err());
}

#[test]
fn detector_summary_is_countable() {
    let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 0).unwrap();
    let layers = det.summary(&[8, 64, 64]);
    assert_eq!(layers.last().unwrap().output, vec![5, 8, 8]);
    assert!(count_layers(&layers).unwrap() > 0);
}

use std::time::Instant;

use introspect_nn::{LayerInfo, LayerOp, Summarize};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::naps::NapMode;

/// How operation counts are reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopUnit {
    /// Multiply-accumulates, one per MAC.
    #[default]
    Macs,
    /// Two floating point operations per MAC.
    Flops,
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

/// MACs of one layer: `Kh*Kw*Cin*Cout*Hout*Wout` for convolutions,
/// `in*out` for linear layers, one per element for normalisation,
/// activations and additions, and one per input element for pooling.
pub fn layer_macs(layer: &LayerInfo) -> Result<u64> {
    Ok(match &layer.op {
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let spatial: u64 = layer.output[1..].iter().map(|&d| d as u64).product();
            (kernel.0 * kernel.1 * in_channels * out_channels) as u64 * spatial
        }
        LayerOp::Linear {
            in_features,
            out_features,
            ..
        } => (*in_features as u64) * (*out_features as u64),
        LayerOp::BatchNorm2d | LayerOp::Relu | LayerOp::Add => numel(&layer.output),
        LayerOp::MaxPool2d { .. } | LayerOp::GlobalAvgPool => numel(&layer.input),
        LayerOp::Opaque(kind) => {
            return Err(Error::UnsupportedLayer {
                name: layer.name.clone(),
                kind: kind.clone(),
            })
        }
    })
}

/// Analytic operation count of a model for one sample of `input_shape`.
pub fn count_flops(model: &dyn Summarize, input_shape: &[usize], unit: FlopUnit) -> Result<u64> {
    let macs = count_layers(&model.summary(input_shape))?;
    Ok(match unit {
        FlopUnit::Macs => macs,
        FlopUnit::Flops => 2 * macs,
    })
}

pub fn count_layers(layers: &[LayerInfo]) -> Result<u64> {
    layers.iter().map(layer_macs).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iterations: usize,
    pub warmup_excluded: usize,
}

impl LatencyStats {
    pub fn samples(&self) -> usize {
        self.iterations - self.warmup_excluded
    }
}

/// Times `iterations` calls of `f` on a monotonic clock. The first
/// `min(warmup, iterations - 1)` calls are dropped; mean and population
/// standard deviation of the rest are reported in milliseconds.
pub fn benchmark_latency(
    iterations: usize,
    warmup: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(Error::Invalid(
            "benchmark needs at least one iteration".into(),
        ));
    }
    let warmup = warmup.min(iterations - 1);
    let mut times = Vec::with_capacity(iterations - warmup);
    for i in 0..iterations {
        let t0 = Instant::now();
        f()?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            times.push(ms);
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        iterations,
        warmup_excluded: warmup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub mode: NapMode,
    pub input_shape: Vec<usize>,
    pub params: usize,
    /// Multiply-accumulate count.
    pub flops: u64,
    pub latency_mean_ms: f64,
    pub latency_std_ms: f64,
    pub iterations: usize,
    pub warmup_excluded: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use introspect_nn::layers::{Conv2d, Linear};
    use introspect_nn::Rng64;

    #[test]
    fn formula_examples() {
        let mut rng = Rng64::new(0);
        let conv = Conv2d::new("c", 1, 1, 3, 1, 1, false, &mut rng);
        assert_eq!(layer_macs(&conv.info(&[1, 8, 8])).unwrap(), 576);
        let lin = Linear::new("l", 100, 2, &mut rng);
        assert_eq!(layer_macs(&lin.info(&[100])).unwrap(), 200);
        let a = layer_macs(&conv.info(&[1, 16, 16])).unwrap();
        assert_eq!(a, 4 * 576);
    }

    #[test]
    fn opaque_layer_is_rejected() {
        let l = LayerInfo {
            name: "mystery".into(),
            op: LayerOp::Opaque("Upsample".into()),
            input: vec![1],
            output: vec![1],
        };
        match count_layers(&[l]) {
            Err(Error::UnsupportedLayer { name, .. }) => assert_eq!(name, "mystery"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn latency_bookkeeping() {
        let s = benchmark_latency(1, 100, || Ok(())).unwrap();
        assert_eq!((s.std_ms, s.samples()), (0.0, 1));
        let s = benchmark_latency(20, 5, || {
            std::hint::black_box((0..1000).sum::<u64>());
            Ok(())
        })
        .unwrap();
        assert_eq!(s.samples(), 15);
        assert!(s.mean_ms > 0.0);
    }
}

use crate::param::{Module, Param};
use crate::summary::{LayerInfo, LayerOp};
use crate::tensor::Tensor;

const EPS: f32 = 1e-5;

/// Per-channel batch normalisation over `N x H x W`.
///
/// Training mode normalises with batch statistics and updates the running
/// estimates (unbiased variance, momentum 0.1); inference uses the running
/// estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: (usize, usize, usize, usize),
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.weight"), &[channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.bias"), &[channels], vec![0.0; channels]),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                &[channels],
                vec![0.0; channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                &[channels],
                vec![1.0; channels],
            ),
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels());
        let hw = h * w;
        let mut out = x.clone();
        let d = out.data_mut();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for b in 0..n {
                let s = &mut d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                s.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels());
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut xhat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; c];
        let mut out = Tensor::zeros(x.shape());
        let xd = x.data();
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                sum += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for b in 0..n {
                sq += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + EPS as f64).sqrt();
            inv_std[ch] = inv as f32;
            let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = ((xd[i] as f64 - mean) * inv) as f32;
                    xhat[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean.value[ch] =
                (1.0 - mo) * self.running_mean.value[ch] + mo * mean as f32;
            self.running_var.value[ch] =
                (1.0 - mo) * self.running_var.value[ch] + mo * unbiased as f32;
        }
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            shape: (n, c, h, w),
        });
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = cache.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let gd = grad.data();
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    sum_dy += gd[i] as f64;
                    sum_dy_xhat += (gd[i] * cache.xhat[i]) as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let k = self.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / m;
            for b in 0..n {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    let v = k * (m * gd[i] as f64 - sum_dy - cache.xhat[i] as f64 * sum_dy_xhat);
                    dx.data_mut()[i] = v as f32;
                }
            }
        }
        dx
    }

    pub fn info(&self, name: &str, input: &[usize]) -> LayerInfo {
        LayerInfo {
            name: name.to_string(),
            op: LayerOp::BatchNorm2d,
            input: input.to_vec(),
            output: input.to_vec(),
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    #[test]
    fn training_output_is_standardised() {
        let mut rng = Rng64::new(2);
        let x = Tensor::from_vec(
            &[4, 3, 2, 2],
            (0..48).map(|_| (rng.normal() * 3.0 + 1.0) as f32).collect(),
        );
        let mut bn = BatchNorm2d::new("bn", 3);
        let y = bn.forward(&x);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 4..(b * 3 + ch + 1) * 4].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng64::new(9);
        let x = Tensor::from_vec(
            &[3, 2, 2, 2],
            (0..24).map(|_| rng.normal() as f32).collect(),
        );
        let g = Tensor::from_vec(
            &[3, 2, 2, 2],
            (0..24).map(|_| rng.normal() as f32).collect(),
        );
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.5, 0.7];
        let objective = |x: &Tensor| -> f64 {
            let mut b = bn.clone();
            b.forward(x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut probe = bn.clone();
        probe.forward(&x);
        let dx = probe.backward(&g);
        let eps = 1e-3;
        for idx in 0..24 {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data()[idx] as f64).abs() < 5e-3,
                "{idx}: {fd} vs {}",
                dx.data()[idx]
            );
        }
    }
}

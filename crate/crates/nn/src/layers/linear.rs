use crate::gemm::sgemm;
use crate::param::{Module, Param};
use crate::rng::Rng64;
use crate::summary::{LayerInfo, LayerOp};
use crate::tensor::Tensor;

/// Fully connected layer on `[N, in]` batches. Weight is stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor>,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialisation for weight and bias.
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng64) -> Self {
        assert!(in_features > 0 && out_features > 0);
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = (0..in_features * out_features)
            .map(|_| rng.uniform_range(-bound, bound) as f32)
            .collect();
        let b = (0..out_features)
            .map(|_| rng.uniform_range(-bound, bound) as f32)
            .collect();
        Self {
            weight: Param::new(format!("{name}.weight"), &[out_features, in_features], w),
            bias: Param::new(format!("{name}.bias"), &[out_features], b),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let (n, d) = x.dims2();
        assert_eq!(
            d, self.in_features,
            "{}: expected {} features, got {d}",
            self.weight.name, self.in_features
        );
        let mut out = Tensor::zeros(&[n, self.out_features]);
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        sgemm(
            n,
            d,
            self.out_features,
            1.0,
            x.data(),
            false,
            &self.weight.value,
            true,
            1.0,
            out.data_mut(),
        );
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("Linear::backward without forward");
        let (n, d) = x.dims2();
        sgemm(
            self.out_features,
            n,
            d,
            1.0,
            grad.data(),
            true,
            x.data(),
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in grad.data().chunks(self.out_features) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&[n, d]);
        sgemm(
            n,
            self.out_features,
            d,
            1.0,
            grad.data(),
            false,
            &self.weight.value,
            false,
            0.0,
            dx.data_mut(),
        );
        dx
    }

    pub fn info(&self, input: &[usize]) -> LayerInfo {
        LayerInfo {
            name: self.weight.name.trim_end_matches(".weight").to_string(),
            op: LayerOp::Linear {
                in_features: self.in_features,
                out_features: self.out_features,
                bias: true,
            },
            input: input.to_vec(),
            output: vec![self.out_features],
        }
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_backward_by_hand() {
        let mut rng = Rng64::new(0);
        let mut l = Linear::new("fc", 2, 1, &mut rng);
        l.weight.value = vec![2.0, -1.0];
        l.bias.value = vec![0.5];
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 3.0, 2.0]);
        assert_eq!(l.forward(&x).data(), &[1.5, 4.5]);
        let dx = l.backward(&Tensor::from_vec(&[2, 1], vec![1.0, 2.0]));
        assert_eq!(l.weight.grad, vec![7.0, 5.0]);
        assert_eq!(l.bias.grad, vec![3.0]);
        assert_eq!(dx.data(), &[2.0, -1.0, 4.0, -2.0]);
    }
}

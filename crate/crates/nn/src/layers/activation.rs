use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Self::infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("Relu::backward without forward");
        let mut dx = grad.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        dx
    }
}

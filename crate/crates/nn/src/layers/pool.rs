use crate::summary::{LayerInfo, LayerOp};
use crate::tensor::Tensor;

/// Square max pooling with implicit `-inf` padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn apply(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0usize; out.numel()];
        let xd = x.data();
        let pad = self.padding as isize;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        (out, arg)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.apply(x).0
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (out, arg) = self.apply(x);
        self.cache = Some((arg, x.shape().to_vec()));
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (arg, shape) = self
            .cache
            .take()
            .expect("MaxPool2d::backward without forward");
        let mut dx = Tensor::zeros(&shape);
        for (g, &i) in grad.data().iter().zip(&arg) {
            dx.data_mut()[i] += g;
        }
        dx
    }

    pub fn info(&self, name: &str, input: &[usize]) -> LayerInfo {
        let (oh, ow) = self.output_hw(input[1], input[2]);
        LayerInfo {
            name: name.to_string(),
            op: LayerOp::MaxPool2d {
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            },
            input: input.to_vec(),
            output: vec![input[0], oh, ow],
        }
    }
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn infer(x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        Tensor::from_vec(&[n, c], data)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.shape = Some(x.shape().to_vec());
        Self::infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self
            .shape
            .take()
            .expect("GlobalAvgPool::backward without forward");
        let hw = shape[2] * shape[3];
        let mut dx = Tensor::zeros(&shape);
        for (plane, g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
            let v = g / hw as f32;
            plane.iter_mut().for_each(|d| *d = v);
        }
        dx
    }

    pub fn info(name: &str, input: &[usize]) -> LayerInfo {
        LayerInfo {
            name: name.to_string(),
            op: LayerOp::GlobalAvgPool,
            input: input.to_vec(),
            output: vec![input[0]],
        }
    }
}

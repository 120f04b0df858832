use crate::gemm::sgemm;
use crate::param::{Module, Param};
use crate::rng::Rng64;
use crate::summary::{LayerInfo, LayerOp};
use crate::tensor::Tensor;

/// 2-D convolution over NCHW batches, implemented as im2col followed by a
/// single matrix product per sample.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Kaiming-normal initialised convolution (fan-out mode, ReLU gain).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng64,
    ) -> Self {
        assert!(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0);
        let fan_out = (out_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_out).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let w: Vec<f32> = (0..n).map(|_| (rng.normal() * std) as f32).collect();
        let weight = Param::new(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            w,
        );
        let bias = bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                &[out_channels],
                vec![0.0; out_channels],
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        let s = self.stride;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - pad;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        let s = self.stride;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> (usize, usize, usize, usize) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(
            c, self.in_channels,
            "{}: expected {} input channels, got {c}",
            self.weight.name, self.in_channels
        );
        (n, c, h, w)
    }

    fn apply(&self, x: &Tensor, keep_cols: bool) -> (Tensor, Vec<f32>) {
        let (n, _, h, w) = self.check_input(x);
        let (oh, ow) = self.output_hw(h, w);
        let p = oh * ow;
        let kl = self.patch_len();
        let per_in = self.in_channels * h * w;
        let per_out = self.out_channels * p;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut cols = vec![0.0; if keep_cols { n * kl * p } else { kl * p }];
        for i in 0..n {
            let col = if keep_cols {
                &mut cols[i * kl * p..(i + 1) * kl * p]
            } else {
                &mut cols[..]
            };
            self.im2col(&x.data()[i * per_in..(i + 1) * per_in], h, w, oh, ow, col);
            let y = &mut out.data_mut()[i * per_out..(i + 1) * per_out];
            sgemm(
                self.out_channels,
                kl,
                p,
                1.0,
                &self.weight.value,
                false,
                col,
                false,
                0.0,
                y,
            );
            if let Some(b) = &self.bias {
                for (co, bv) in b.value.iter().enumerate() {
                    y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        (out, cols)
    }

    /// Inference without caching; safe for shared use.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.apply(x, false).0
    }

    /// Training-mode forward; caches the unfolded input for [`Conv2d::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = self.check_input(x);
        let (out, cols) = self.apply(x, true);
        self.cache = Some(ConvCache {
            cols,
            in_shape: (n, c, h, w),
            out_hw: self.output_hw(h, w),
        });
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("Conv2d::backward without forward");
        let (n, c, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let p = oh * ow;
        let kl = self.patch_len();
        let per_out = self.out_channels * p;
        let per_in = c * h * w;
        assert_eq!(grad.shape(), &[n, self.out_channels, oh, ow]);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dcols = vec![0.0; kl * p];
        for i in 0..n {
            let dy = &grad.data()[i * per_out..(i + 1) * per_out];
            let col = &cache.cols[i * kl * p..(i + 1) * kl * p];
            sgemm(
                self.out_channels,
                p,
                kl,
                1.0,
                dy,
                false,
                col,
                true,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(b) = &mut self.bias {
                for (co, g) in b.grad.iter_mut().enumerate() {
                    *g += dy[co * p..(co + 1) * p].iter().sum::<f32>();
                }
            }
            sgemm(
                kl,
                self.out_channels,
                p,
                1.0,
                &self.weight.value,
                true,
                dy,
                false,
                0.0,
                &mut dcols,
            );
            self.col2im(
                &dcols,
                h,
                w,
                oh,
                ow,
                &mut dx.data_mut()[i * per_in..(i + 1) * per_in],
            );
        }
        dx
    }

    pub fn info(&self, input: &[usize]) -> LayerInfo {
        let (oh, ow) = self.output_hw(input[1], input[2]);
        LayerInfo {
            name: self.weight.name.trim_end_matches(".weight").to_string(),
            op: LayerOp::Conv2d {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: (self.kernel, self.kernel),
                stride: self.stride,
                padding: self.padding,
                bias: self.bias.is_some(),
            },
            input: input.to_vec(),
            output: vec![self.out_channels, oh, ow],
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

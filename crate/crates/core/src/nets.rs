//! Composite layers shared by the detector and the introspector.

use introspect_nn::layers::{BatchNorm2d, Conv2d, Relu};
use introspect_nn::{LayerInfo, LayerOp, Module, Param, Rng64, Tensor};

/// Bias-free convolution followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    name: String,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng64,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
            name: name.to_string(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.bn.infer(&self.conv.infer(x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.conv.forward(x);
        self.bn.forward(&y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.bn.backward(grad);
        self.conv.backward(&g)
    }

    /// Appends conv and norm layer descriptions; returns the output shape.
    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerInfo>) -> Vec<usize> {
        let conv = self.conv.info(input);
        let shape = conv.output.clone();
        out.push(conv);
        out.push(self.bn.info(&format!("{}.bn", self.name), &shape));
        shape
    }
}

impl Module for ConvBn {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Conv + BN + ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub inner: ConvBn,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng64,
    ) -> Self {
        Self {
            inner: ConvBn::new(name, in_ch, out_ch, kernel, stride, kernel / 2, rng),
            relu: Relu::default(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        Relu::infer(&self.inner.infer(x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.inner.forward(x);
        self.relu.forward(&y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        self.inner.backward(&g)
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerInfo>) -> Vec<usize> {
        let shape = self.inner.describe(input, out);
        out.push(relu_info(&format!("{}.relu", self.inner.name), &shape));
        shape
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.inner.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.inner.visit_mut(f)
    }
}

pub fn relu_info(name: &str, shape: &[usize]) -> LayerInfo {
    LayerInfo {
        name: name.to_string(),
        op: LayerOp::Relu,
        input: shape.to_vec(),
        output: shape.to_vec(),
    }
}

/// Looks up parameters by name and overwrites their values.
pub fn load_named<M: Module + ?Sized>(
    model: &mut M,
    tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<(), String> {
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.get(&p.name) {
            Some((shape, data)) if *shape == p.shape => p.value.copy_from_slice(data),
            Some((shape, _)) => {
                err = Some(format!(
                    "parameter `{}` has shape {shape:?}, expected {:?}",
                    p.name, p.shape
                ))
            }
            None => err = Some(format!("checkpoint lacks parameter `{}`", p.name)),
        }
    });
    err.map_or(Ok(()), Err)
}

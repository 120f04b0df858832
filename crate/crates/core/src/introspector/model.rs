use introspect_nn::layers::{GlobalAvgPool, Linear, MaxPool2d, Relu};
use introspect_nn::{LayerInfo, LayerOp, Module, Param, Rng64, Summarize, Tensor};

use crate::nets::{relu_info, ConvBn, ConvBnRelu};

/// Residual basic block: two 3x3 conv-BN pairs with an identity or 1x1
/// projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: ConvBnRelu,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
    relu: Relu,
    name: String,
}

impl BasicBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng64) -> Self {
        let downsample = (stride != 1 || in_ch != out_ch).then(|| {
            ConvBn::new(
                &format!("{name}.downsample"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                rng,
            )
        });
        Self {
            conv1: ConvBnRelu::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, rng),
            conv2: ConvBn::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
            downsample,
            relu: Relu::default(),
            name: name.to_string(),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv2.infer(&self.conv1.infer(x));
        match &self.downsample {
            Some(d) => y.add_assign(&d.infer(x)),
            None => y.add_assign(x),
        }
        Relu::infer(&y)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(x);
        let mut y = self.conv2.forward(&h);
        match &mut self.downsample {
            Some(d) => y.add_assign(&d.forward(x)),
            None => y.add_assign(x),
        }
        self.relu.forward(&y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let mut dx = self.conv1.backward(&self.conv2.backward(&g));
        match &mut self.downsample {
            Some(d) => dx.add_assign(&d.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn describe(&self, input: &[usize], out: &mut Vec<LayerInfo>) -> Vec<usize> {
        let h = self.conv1.describe(input, out);
        let y = self.conv2.describe(&h, out);
        if let Some(d) = &self.downsample {
            d.describe(input, out);
        }
        out.push(LayerInfo {
            name: format!("{}.add", self.name),
            op: LayerOp::Add,
            input: y.clone(),
            output: y.clone(),
        });
        out.push(relu_info(&format!("{}.relu", self.name), &y));
        y
    }
}

impl Module for BasicBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        if let Some(d) = &self.downsample {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(d) = &mut self.downsample {
            d.visit_mut(f);
        }
    }
}

/// Stage widths for a width multiplier: `round(64 w * {1, 2, 4, 8})`, at least 1.
pub fn stage_widths(width_multiplier: f64) -> [usize; 4] {
    [1.0, 2.0, 4.0, 8.0].map(|m| ((64.0 * width_multiplier * m).round() as usize).max(1))
}

/// 18-layer residual network: 7x7/2 stem, 3x3/2 max pool, four stages of
/// two basic blocks, global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct ResNet18 {
    stem: ConvBnRelu,
    pool: MaxPool2d,
    stages: Vec<Vec<BasicBlock>>,
    gap: GlobalAvgPool,
    fc: Linear,
    in_channels: usize,
}

impl ResNet18 {
    pub fn new(
        in_channels: usize,
        width_multiplier: f64,
        n_classes: usize,
        rng: &mut Rng64,
    ) -> Self {
        let widths = stage_widths(width_multiplier);
        let stem = ConvBnRelu::new("stem", in_channels, widths[0], 7, 2, rng);
        let mut prev = widths[0];
        let mut stages = Vec::new();
        for (si, &w) in widths.iter().enumerate() {
            let stride = if si == 0 { 1 } else { 2 };
            let blocks = vec![
                BasicBlock::new(&format!("layer{}.0", si + 1), prev, w, stride, rng),
                BasicBlock::new(&format!("layer{}.1", si + 1), w, w, 1, rng),
            ];
            prev = w;
            stages.push(blocks);
        }
        Self {
            stem,
            pool: MaxPool2d::new(3, 2, 1),
            stages,
            gap: GlobalAvgPool::default(),
            fc: Linear::new("fc", prev, n_classes, rng),
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Logits plus the output of every stage, first to last.
    pub fn infer_with_stages(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut cur = self.pool.infer(&self.stem.infer(x));
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for b in stage {
                cur = b.infer(&cur);
            }
            outs.push(cur.clone());
        }
        (self.fc.infer(&GlobalAvgPool::infer(&cur)), outs)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = self.pool.infer(&self.stem.infer(x));
        for b in self.stages.iter().flatten() {
            cur = b.infer(&cur);
        }
        self.fc.infer(&GlobalAvgPool::infer(&cur))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = self.stem.forward(x);
        cur = self.pool.forward(&cur);
        for b in self.stages.iter_mut().flatten() {
            cur = b.forward(&cur);
        }
        let pooled = self.gap.forward(&cur);
        self.fc.forward(&pooled)
    }

    pub fn backward(&mut self, grad: &Tensor) {
        let mut g = self.gap.backward(&self.fc.backward(grad));
        for b in self.stages.iter_mut().flatten().rev() {
            g = b.backward(&g);
        }
        g = self.pool.backward(&g);
        self.stem.backward(&g);
    }
}

impl Module for ResNet18 {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        for b in self.stages.iter().flatten() {
            b.visit(f);
        }
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        for b in self.stages.iter_mut().flatten() {
            b.visit_mut(f);
        }
        self.fc.visit_mut(f);
    }
}

impl Summarize for ResNet18 {
    fn summary(&self, input: &[usize]) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let s = self.stem.describe(input, &mut out);
        let pool = self.pool.info("maxpool", &s);
        let mut shape = pool.output.clone();
        out.push(pool);
        for b in self.stages.iter().flatten() {
            shape = b.describe(&shape, &mut out);
        }
        let gap = GlobalAvgPool::info("avgpool", &shape);
        let flat = gap.output.clone();
        out.push(gap);
        out.push(self.fc.info(&flat));
        out
    }
}

/// Multi-layer perceptron over statistical feature vectors.
#[derive(Clone, Debug)]
pub struct SfMlp {
    layers: Vec<Linear>,
    relus: Vec<Relu>,
}

impl SfMlp {
    pub fn new(in_dim: usize, hidden: &[usize], n_classes: usize, rng: &mut Rng64) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(&format!("mlp.{i}"), prev, h, rng));
            prev = h;
        }
        layers.push(Linear::new("mlp.out", prev, n_classes, rng));
        Self {
            relus: vec![Relu::default(); hidden.len()],
            layers,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.infer(&cur);
            if i < last {
                cur = Relu::infer(&cur);
            }
        }
        cur
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            cur = self.layers[i].forward(&cur);
            if i < last {
                cur = self.relus[i].forward(&cur);
            }
        }
        cur
    }

    pub fn backward(&mut self, grad: &Tensor) {
        let mut g = grad.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g = self.relus[i].backward(&g);
            }
            g = self.layers[i].backward(&g);
        }
    }
}

impl Module for SfMlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl Summarize for SfMlp {
    fn summary(&self, input: &[usize]) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut shape = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let info = l.info(&shape);
            shape = info.output.clone();
            out.push(info);
            if i < last {
                out.push(relu_info(&format!("mlp.{i}.relu"), &shape));
            }
        }
        out
    }
}

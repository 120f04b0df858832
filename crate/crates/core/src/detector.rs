//! Miniature pillar detector with activation taps.
//!
//! ```text
//! points -> pillarize -> PPC (C_ppc x H0 x W0)
//!        -> block 1 .. block n (conv+BN+ReLU, first conv of each block has stride 2)
//!              mid tap = MLA, last block output = LLA
//!        -> 1x1 head: [objectness, dx, dy, log w, log l] per LLA cell
//!        -> decode + NMS -> detections
//! ```
//!
//! Training loss: binary cross-entropy on objectness (positives weighted by
//! `pos_weight`, mean over non-ignored cells) plus `reg_weight` times the L1
//! error of the four box residuals averaged over positive cells. A ground
//! truth box whose centre falls in an LLA cell makes that cell positive when
//! at least `min_target_points` points lie inside the box; boxes with fewer
//! points mark their cell as ignored.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use introspect_nn::layers::Conv2d;
use introspect_nn::optim::{Adam, Optimizer, Sgd};
use introspect_nn::{LayerInfo, Module, Param, Rng64, Summarize, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::errorset::iou_unchecked;
use crate::nets::{load_named, ConvBnRelu};
use crate::scene::{BevBox, Bounds, PointCloudScene};
use crate::store::{read_bundle, write_bundle, TensorRecord};

/// Number of hand-crafted pillar features available to [`pillarize`].
pub const PILLAR_FEATURES: usize = 8;
/// Point count that maps to feature value 1.0.
const COUNT_NORM: f32 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cell_size: f64,
    /// Cells along x.
    pub grid_h: usize,
    /// Cells along y.
    pub grid_w: usize,
    pub feature_channels: usize,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            grid_h: 64,
            grid_w: 64,
            feature_channels: PILLAR_FEATURES,
            origin_x: 0.0,
            origin_y: -16.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        if !(4..=PILLAR_FEATURES).contains(&self.feature_channels) {
            return Err(Error::Config(format!(
                "feature_channels must be in 4..={PILLAR_FEATURES}, got {}",
                self.feature_channels
            )));
        }
        Ok(())
    }

    pub fn covers(&self, b: &Bounds) -> bool {
        let eps = 1e-9;
        self.origin_x <= b.x_min + eps
            && self.origin_y <= b.y_min + eps
            && self.origin_x + self.grid_h as f64 * self.cell_size >= b.x_max - eps
            && self.origin_y + self.grid_w as f64 * self.cell_size >= b.y_max - eps
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x - self.origin_x) / self.cell_size;
        let fj = (y - self.origin_y) / self.cell_size;
        if fi < 0.0 || fj < 0.0 || fi > self.grid_h as f64 || fj > self.grid_w as f64 {
            return None;
        }
        Some((
            (fi as usize).min(self.grid_h - 1),
            (fj as usize).min(self.grid_w - 1),
        ))
    }
}

/// Builds the pseudo-image. Channel order: normalised point count, mean
/// intensity, mean x and y offset from the cell centre (in cell units), max
/// intensity, std of the x and y offsets, occupancy. The first
/// `feature_channels` of these are emitted; empty cells are all zero.
pub fn pillarize(scene: &PointCloudScene, grid: &GridConfig) -> Result<Tensor> {
    grid.validate()?;
    let (h, w) = (grid.grid_h, grid.grid_w);
    // count, sum_i, sum_dx, sum_dy, max_i, sum_dx2, sum_dy2
    let mut acc = vec![[0.0f64; 7]; h * w];
    for p in &scene.points {
        let (x, y) = (p[0] as f64, p[1] as f64);
        let Some((i, j)) = grid.cell_of(x, y) else {
            continue;
        };
        let dx = (x - grid.origin_x) / grid.cell_size - i as f64 - 0.5;
        let dy = (y - grid.origin_y) / grid.cell_size - j as f64 - 0.5;
        let a = &mut acc[i * w + j];
        a[0] += 1.0;
        a[1] += p[2] as f64;
        a[2] += dx;
        a[3] += dy;
        a[4] = a[4].max(p[2] as f64);
        a[5] += dx * dx;
        a[6] += dy * dy;
    }
    let c = grid.feature_channels;
    let mut out = Tensor::zeros(&[c, h, w]);
    let plane = h * w;
    let data = out.data_mut();
    for (cell, a) in acc.iter().enumerate() {
        let n = a[0];
        if n == 0.0 {
            continue;
        }
        let mx = a[2] / n;
        let my = a[3] / n;
        let feats = [
            n as f32 / COUNT_NORM,
            (a[1] / n) as f32,
            mx as f32,
            my as f32,
            a[4] as f32,
            (a[5] / n - mx * mx).max(0.0).sqrt() as f32,
            (a[6] / n - my * my).max(0.0).sqrt() as f32,
            1.0,
        ];
        for (ch, v) in feats.iter().take(c).enumerate() {
            data[ch * plane + cell] = *v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BevBox,
    pub score: f64,
}

/// Greedy non-maximum suppression in descending score order (ties keep
/// input order). A detection survives when its IoU with every previously
/// kept box is at most `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept
            .iter()
            .all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// The three tapped tensors of one frame, each `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBundle {
    pub ppc: Tensor,
    pub mla: Tensor,
    pub lla: Tensor,
    pub frame_id: String,
}

impl ActivationBundle {
    pub fn shapes(&self) -> [Vec<usize>; 3] {
        [
            self.ppc.shape().to_vec(),
            self.mla.shape().to_vec(),
            self.lla.shape().to_vec(),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.ppc.all_finite() && self.mla.all_finite() && self.lla.all_finite()
    }

    pub fn write(&self, dir: &Path, mut attributes: BTreeMap<String, String>) -> Result<()> {
        attributes.insert("frame_id".into(), self.frame_id.clone());
        let records = [("ppc", &self.ppc), ("mla", &self.mla), ("lla", &self.lla)]
            .into_iter()
            .map(|(n, t)| TensorRecord::new(n, t.shape(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        write_bundle(&records, &attributes, dir)
    }

    /// Reads `ppc`, `mla` and `lla` from a bundle directory. The frame id
    /// comes from the `frame_id` attribute, falling back to the directory name.
    pub fn read(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let mut b = read_bundle(dir)?;
        let frame_id = b
            .attr("frame_id")
            .map(str::to_string)
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_default();
        let mut take = |name: &str| -> Result<Tensor> {
            let t = b.take(name).ok_or_else(|| {
                Error::Invalid(format!("frame {frame_id}: bundle has no `{name}` tensor"))
            })?;
            if t.shape.len() != 3 {
                return Err(Error::Shape(format!(
                    "frame {frame_id}: `{name}` has shape {:?}, expected C x H x W",
                    t.shape
                )));
            }
            Ok(Tensor::from_vec(&t.shape, t.data))
        };
        let bundle = ActivationBundle {
            ppc: take("ppc")?,
            mla: take("mla")?,
            lla: take("lla")?,
            frame_id: frame_id.clone(),
        };
        Ok((bundle, b.attributes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub convs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub blocks: Vec<BlockSpec>,
    /// Block whose output is the MLA tap. Defaults to the second block when
    /// three or more blocks are configured and to the first otherwise.
    pub mid_tap: Option<usize>,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            blocks: vec![
                BlockSpec {
                    channels: 32,
                    convs: 2,
                },
                BlockSpec {
                    channels: 128,
                    convs: 2,
                },
                BlockSpec {
                    channels: 256,
                    convs: 1,
                },
            ],
            mid_tap: None,
            score_threshold: 0.5,
            nms_iou: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn mid_tap_index(&self) -> usize {
        self.mid_tap
            .unwrap_or(if self.blocks.len() >= 3 { 1 } else { 0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.channels == 0 || b.convs == 0) {
            return Err(Error::Config(format!(
                "invalid backbone blocks {:?}",
                self.blocks
            )));
        }
        if self.mid_tap_index() >= self.blocks.len() {
            return Err(Error::Config(format!(
                "mid_tap {} out of range",
                self.mid_tap_index()
            )));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "score_threshold and nms_iou must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    /// `momentum` only applies to SGD.
    pub fn build(self, lr: f64, momentum: f64, weight_decay: f64) -> Optimizer {
        match self {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr, momentum, weight_decay)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, weight_decay)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorHyper {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of the epochs after which the learning rate drops tenfold.
    pub lr_step_fraction: f64,
    pub pos_weight: f64,
    pub reg_weight: f64,
    pub min_target_points: usize,
    /// Scenes generated for detector training (separate seeds from the
    /// introspection data).
    pub n_train_scenes: usize,
    /// Draw a new set of `n_train_scenes` for every epoch instead of
    /// reusing one set. A small fixed set overfits badly.
    pub resample_each_epoch: bool,
    /// Held-out scenes used to report the frame miss rate after training.
    pub n_eval_scenes: usize,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            epochs: 48,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            lr_step_fraction: 0.75,
            pos_weight: 4.0,
            reg_weight: 2.0,
            min_target_points: 3,
            n_train_scenes: 600,
            resample_each_epoch: true,
            n_eval_scenes: 300,
        }
    }
}

const HEAD_CHANNELS: usize = 5;

#[derive(Clone, Debug)]
pub struct PillarDetector {
    grid: GridConfig,
    config: DetectorConfig,
    blocks: Vec<Vec<ConvBnRelu>>,
    head: Conv2d,
}

/// Per-frame training targets on the LLA grid.
#[derive(Clone, Debug)]
pub struct FrameTargets {
    /// 1 = object, 0 = background, -1 = ignored.
    pub objectness: Vec<f32>,
    pub residuals: Vec<[f32; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

impl PillarDetector {
    pub fn new(grid: GridConfig, config: DetectorConfig, seed: u64) -> Result<Self> {
        grid.validate()?;
        config.validate()?;
        let mut rng = Rng64::derive(seed, 0xDE7E);
        let mut in_ch = grid.feature_channels;
        let mut blocks = Vec::new();
        for (bi, spec) in config.blocks.iter().enumerate() {
            let mut units = Vec::new();
            for ci in 0..spec.convs {
                let stride = if ci == 0 { 2 } else { 1 };
                units.push(ConvBnRelu::new(
                    &format!("block{}.{ci}", bi + 1),
                    in_ch,
                    spec.channels,
                    3,
                    stride,
                    &mut rng,
                ));
                in_ch = spec.channels;
            }
            blocks.push(units);
        }
        let mut head = Conv2d::new("head", in_ch, HEAD_CHANNELS, 1, 1, 0, true, &mut rng);
        for v in head.weight.value.iter_mut() {
            *v *= 0.1;
        }
        // Objectness prior of about 0.1.
        head.bias.as_mut().expect("head has bias").value[0] = -2.2;
        let det = Self {
            grid,
            config,
            blocks,
            head,
        };
        let [_, _, lla] = det.tap_shapes();
        if lla[1] == 0 || lla[2] == 0 {
            return Err(Error::Config(
                "backbone downsamples the grid to nothing".into(),
            ));
        }
        Ok(det)
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `[ppc, mla, lla]` shapes as `[C, H, W]`.
    pub fn tap_shapes(&self) -> [[usize; 3]; 3] {
        let mut h = self.grid.grid_h;
        let mut w = self.grid.grid_w;
        let mut shapes = Vec::new();
        for (spec, units) in self.config.blocks.iter().zip(&self.blocks) {
            for u in units {
                (h, w) = u.inner.conv.output_hw(h, w);
            }
            shapes.push([spec.channels, h, w]);
        }
        let ppc = [
            self.grid.feature_channels,
            self.grid.grid_h,
            self.grid.grid_w,
        ];
        [
            ppc,
            shapes[self.config.mid_tap_index()],
            *shapes.last().expect("nonempty"),
        ]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [
            self.grid.feature_channels,
            self.grid.grid_h,
            self.grid.grid_w,
        ];
        if x.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "detector expects pseudo-images of shape {want:?}, got {:?}",
                &x.shape()[1..]
            )));
        }
        Ok(())
    }

    /// Batched inference: returns `(head, mla, lla)`.
    pub fn infer_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(x)?;
        let mid = self.config.mid_tap_index();
        let mut cur = x.clone();
        let mut mla = None;
        for (bi, units) in self.blocks.iter().enumerate() {
            for u in units {
                cur = u.infer(&cur);
            }
            if bi == mid {
                mla = Some(cur.clone());
            }
        }
        let head = self.head.infer(&cur);
        Ok((head, mla.expect("mid tap within blocks"), cur))
    }

    /// Runs one frame. With `tap == false` no activation bundle is built.
    pub fn forward(
        &self,
        ppc: &Tensor,
        tap: bool,
        frame_id: &str,
    ) -> Result<(Vec<Detection>, Option<ActivationBundle>)> {
        if ppc.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "expected C x H x W pseudo-image, got {:?}",
                ppc.shape()
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(ppc.shape());
        let x = ppc.clone().reshape(&shape);
        let (head, mla, lla) = self.infer_batch(&x)?;
        let dets = self.decode(head.data());
        let bundle = tap.then(|| ActivationBundle {
            ppc: ppc.clone(),
            mla: squeeze(mla),
            lla: squeeze(lla),
            frame_id: frame_id.to_string(),
        });
        Ok((dets, bundle))
    }

    fn lla_cell(&self) -> (f64, f64, usize, usize) {
        let [_, _, lla] = self.tap_shapes();
        let lx = self.grid.cell_size * self.grid.grid_h as f64 / lla[1] as f64;
        let ly = self.grid.cell_size * self.grid.grid_w as f64 / lla[2] as f64;
        (lx, ly, lla[1], lla[2])
    }

    /// Decodes one frame's head output (`5 x H x W`) into post-NMS detections.
    pub fn decode(&self, head: &[f32]) -> Vec<Detection> {
        let (lx, ly, h, w) = self.lla_cell();
        let plane = h * w;
        let mut dets = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let cell = r * w + c;
                let score = sigmoid(head[cell] as f64);
                if score <= self.config.score_threshold {
                    continue;
                }
                let ch = |k: usize| head[k * plane + cell] as f64;
                let cx = self.grid.origin_x + (r as f64 + 0.5) * lx + ch(1) * lx;
                let cy = self.grid.origin_y + (c as f64 + 0.5) * ly + ch(2) * ly;
                let wv = ch(3).clamp(-4.0, 4.0).exp();
                let lv = ch(4).clamp(-4.0, 4.0).exp();
                dets.push(Detection {
                    bbox: BevBox {
                        cx,
                        cy,
                        w: wv,
                        l: lv,
                        class_id: u32::from(lv > 5.0),
                    },
                    score,
                });
            }
        }
        nms(&dets, self.config.nms_iou)
    }

    pub fn targets(&self, scene: &PointCloudScene, min_points: usize) -> FrameTargets {
        let (lx, ly, h, w) = self.lla_cell();
        let mut objectness = vec![0.0f32; h * w];
        let mut residuals = vec![[0.0f32; 4]; h * w];
        for b in &scene.gt_boxes {
            let r = ((b.cx - self.grid.origin_x) / lx).floor();
            let c = ((b.cy - self.grid.origin_y) / ly).floor();
            if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                continue;
            }
            let cell = r as usize * w + c as usize;
            if objectness[cell] == 1.0 {
                continue;
            }
            let inside = scene
                .points
                .iter()
                .filter(|p| b.contains(p[0] as f64, p[1] as f64))
                .count();
            if inside < min_points {
                objectness[cell] = -1.0;
                continue;
            }
            objectness[cell] = 1.0;
            residuals[cell] = [
                ((b.cx - self.grid.origin_x) / lx - r - 0.5) as f32,
                ((b.cy - self.grid.origin_y) / ly - c - 0.5) as f32,
                b.w.ln() as f32,
                b.l.ln() as f32,
            ];
        }
        FrameTargets {
            objectness,
            residuals,
        }
    }

    fn train_forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for units in &mut self.blocks {
            for u in units {
                cur = u.forward(&cur);
            }
        }
        self.head.forward(&cur)
    }

    fn train_backward(&mut self, grad: &Tensor) {
        let mut g = self.head.backward(grad);
        for units in self.blocks.iter_mut().rev() {
            for u in units.iter_mut().rev() {
                g = u.backward(&g);
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut records = Vec::new();
        let mut err = None;
        self.visit(
            &mut |p| match TensorRecord::new(p.name.clone(), &p.shape, p.value.clone()) {
                Ok(r) => records.push(r),
                Err(e) => err = Some(e),
            },
        );
        if let Some(e) = err {
            return Err(e);
        }
        write_bundle(
            &records,
            &BTreeMap::from([("model".into(), "pillar-detector".into())]),
            dir,
        )?;
        let sidecar = DetectorSidecar {
            grid: self.grid.clone(),
            config: self.config.clone(),
        };
        let path = dir.join(DETECTOR_SIDECAR);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DETECTOR_SIDECAR);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: DetectorSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut model = PillarDetector::new(sidecar.grid, sidecar.config, 0)?;
        let bundle = read_bundle(dir)?;
        let named: HashMap<String, (Vec<usize>, Vec<f32>)> = bundle
            .tensors
            .into_iter()
            .map(|t| (t.name, (t.shape, t.data)))
            .collect();
        load_named(&mut model, &named).map_err(Error::Store)?;
        Ok(model)
    }
}

pub const DETECTOR_SIDECAR: &str = "detector.json";

#[derive(Serialize, Deserialize)]
struct DetectorSidecar {
    grid: GridConfig,
    config: DetectorConfig,
}

impl Module for PillarDetector {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for u in self.blocks.iter().flatten() {
            u.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for u in self.blocks.iter_mut().flatten() {
            u.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl Summarize for PillarDetector {
    fn summary(&self, input: &[usize]) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut shape = input.to_vec();
        for u in self.blocks.iter().flatten() {
            shape = u.describe(&shape, &mut out);
        }
        out.push(self.head.info(&shape));
        out
    }
}

fn squeeze(t: Tensor) -> Tensor {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Objectness BCE + residual L1 over a batch of head outputs. Returns the
/// loss and its gradient with respect to the head output.
pub fn detection_loss(
    head: &Tensor,
    targets: &[&FrameTargets],
    hyper: &DetectorHyper,
) -> (f64, Tensor) {
    let (n, c, h, w) = head.dims4();
    assert_eq!(c, HEAD_CHANNELS);
    let plane = h * w;
    let mut grad = Tensor::zeros(head.shape());
    let counted = targets
        .iter()
        .flat_map(|t| t.objectness.iter())
        .filter(|&&o| o >= 0.0)
        .count()
        .max(1) as f64;
    let positives = targets
        .iter()
        .flat_map(|t| t.objectness.iter())
        .filter(|&&o| o == 1.0)
        .count()
        .max(1) as f64;
    let mut bce = 0.0;
    let mut l1 = 0.0;
    let hd = head.data();
    for (b, t) in targets.iter().enumerate().take(n) {
        let base = b * c * plane;
        for cell in 0..plane {
            let target = t.objectness[cell];
            if target < 0.0 {
                continue;
            }
            let z = hd[base + cell] as f64;
            let y = target as f64;
            let weight = if y == 1.0 { hyper.pos_weight } else { 1.0 };
            bce += weight * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
            grad.data_mut()[base + cell] = (weight * (sigmoid(z) - y) / counted) as f32;
            if y == 1.0 {
                for k in 0..4 {
                    let idx = base + (k + 1) * plane + cell;
                    let diff = hd[idx] as f64 - t.residuals[cell][k] as f64;
                    l1 += diff.abs();
                    grad.data_mut()[idx] = (hyper.reg_weight * diff.signum() / positives) as f32;
                }
            }
        }
    }
    (bce / counted + hyper.reg_weight * l1 / positives, grad)
}

/// Pseudo-image plus targets for one training frame.
#[derive(Clone, Debug)]
pub struct TrainFrame {
    pub ppc: Tensor,
    pub targets: FrameTargets,
}

pub fn prepare_frames(
    model: &PillarDetector,
    scenes: &[PointCloudScene],
    min_points: usize,
) -> Result<Vec<TrainFrame>> {
    scenes
        .iter()
        .map(|s| {
            Ok(TrainFrame {
                ppc: pillarize(s, model.grid())?,
                targets: model.targets(s, min_points),
            })
        })
        .collect()
}

/// Trains the detector in place on a fixed frame set. Zero epochs leave it
/// untouched.
pub fn train_detector(
    model: &mut PillarDetector,
    frames: &[TrainFrame],
    hyper: &DetectorHyper,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if frames.is_empty() {
        return Err(Error::Invalid("detector training set is empty".into()));
    }
    train_detector_streaming(model, hyper, seed, |_| Ok(Cow::Borrowed(frames)), on_epoch)
}

/// Like [`train_detector`], but asks `frames_for_epoch` for the training
/// frames of every epoch (0-based), so each epoch can see fresh scenes.
pub fn train_detector_streaming<'a>(
    model: &mut PillarDetector,
    hyper: &DetectorHyper,
    seed: u64,
    mut frames_for_epoch: impl FnMut(usize) -> Result<Cow<'a, [TrainFrame]>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let batch = hyper.batch_size.max(2);
    let mut opt = hyper.optimizer.build(hyper.lr, hyper.momentum, 0.0);
    let step_epoch = (hyper.epochs as f64 * hyper.lr_step_fraction).round() as usize;
    let mut logs = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        if epoch == step_epoch && epoch > 0 {
            opt.set_lr(opt.lr() * 0.1);
        }
        let frames = frames_for_epoch(epoch)?;
        if frames.is_empty() {
            return Err(Error::Invalid("detector training set is empty".into()));
        }
        let sample_shape = frames[0].ppc.shape().to_vec();
        let mut order: Vec<usize> = (0..frames.len()).collect();
        Rng64::derive(seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| frames[i].ppc.data()).collect();
            let x = Tensor::stack(&inputs, &sample_shape);
            let targets: Vec<&FrameTargets> = chunk.iter().map(|&i| &frames[i].targets).collect();
            let head = model.train_forward(&x);
            let (loss, grad) = detection_loss(&head, &targets, hyper);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "detector loss became {loss} in epoch {}",
                    epoch + 1
                )));
            }
            model.train_backward(&grad);
            opt.step(model);
            total += loss;
            batches += 1;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            loss: total / batches.max(1) as f64,
            lr: opt.lr(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn scene(points: Vec<[f32; 3]>) -> PointCloudScene {
        PointCloudScene {
            scene_id: "t".into(),
            seed: 0,
            points,
            gt_boxes: vec![],
            visibility: vec![],
        }
    }

    fn small_grid() -> GridConfig {
        GridConfig {
            cell_size: 1.0,
            grid_h: 4,
            grid_w: 4,
            feature_channels: 8,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }

    #[test]
    fn empty_scene_pillarizes_to_zero() {
        let t = pillarize(&scene(vec![]), &GridConfig::default()).unwrap();
        assert_eq!(t.shape(), &[8, 64, 64]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_touches_single_cell() {
        let t = pillarize(&scene(vec![[3.3, 1.2, 0.4]]), &GridConfig::default()).unwrap();
        let plane = 64 * 64;
        let nonzero: std::collections::BTreeSet<usize> = t
            .data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i % plane)
            .collect();
        assert_eq!(nonzero.len(), 1);
    }

    #[test]
    fn four_points_match_brute_force_grouping() {
        let pts = vec![
            [0.2, 0.3, 0.5],
            [0.8, 0.1, 1.0],
            [2.5, 3.5, 0.25],
            [3.9, 0.1, 0.75],
        ];
        let grid = small_grid();
        let t = pillarize(&scene(pts.clone()), &grid).unwrap();
        // Oracle: group by explicit floor of coordinates.
        for i in 0..4 {
            for j in 0..4 {
                let members: Vec<&[f32; 3]> = pts
                    .iter()
                    .filter(|p| {
                        (p[0] as f64).floor() as usize == i && (p[1] as f64).floor() as usize == j
                    })
                    .collect();
                let at = |ch: usize| t.data()[ch * 16 + i * 4 + j] as f64;
                if members.is_empty() {
                    assert!((0..8).all(|ch| at(ch) == 0.0));
                    continue;
                }
                let n = members.len() as f64;
                let mean =
                    |f: &dyn Fn(&[f32; 3]) -> f64| members.iter().map(|p| f(p)).sum::<f64>() / n;
                let dx = |p: &[f32; 3]| p[0] as f64 - i as f64 - 0.5;
                let dy = |p: &[f32; 3]| p[1] as f64 - j as f64 - 0.5;
                assert!((at(0) - n / 8.0).abs() < 1e-6);
                assert!((at(1) - mean(&|p| p[2] as f64)).abs() < 1e-6);
                assert!((at(2) - mean(&dx)).abs() < 1e-6);
                assert!((at(3) - mean(&dy)).abs() < 1e-6);
                let mx = members.iter().map(|p| p[2] as f64).fold(0.0, f64::max);
                assert!((at(4) - mx).abs() < 1e-6);
                let sx = (mean(&|p| dx(p).powi(2)) - mean(&dx).powi(2))
                    .max(0.0)
                    .sqrt();
                assert!((at(5) - sx).abs() < 1e-5);
                assert_eq!(at(7), 1.0);
            }
        }
    }

    fn det(cx: f64, cy: f64, score: f64) -> Detection {
        Detection {
            bbox: BevBox {
                cx,
                cy,
                w: 2.0,
                l: 4.0,
                class_id: 0,
            },
            score,
        }
    }

    #[test]
    fn nms_singleton_and_duplicate() {
        let d = det(1.0, 1.0, 0.3);
        assert_eq!(nms(&[d], 0.5), vec![d]);
        let kept = nms(&[det(1.0, 1.0, 0.8), det(1.0, 1.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_matches_exhaustive_reference() {
        // Reference: a detection survives iff no higher-ranked survivor overlaps it;
        // evaluated by repeatedly scanning the full ranked list.
        fn reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
            let mut ranked: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
            });
            let mut alive = vec![true; ranked.len()];
            for i in 0..ranked.len() {
                for j in 0..i {
                    if alive[j]
                        && crate::errorset::iou_bev(&ranked[j].1.bbox, &ranked[i].1.bbox).unwrap()
                            > thr
                    {
                        alive[i] = false;
                    }
                }
            }
            ranked
                .into_iter()
                .zip(alive)
                .filter(|(_, a)| *a)
                .map(|((_, d), _)| d)
                .collect()
        }
        let mut rng = Rng64::new(77);
        for _ in 0..200 {
            let dets: Vec<Detection> = (0..5)
                .map(|_| Detection {
                    bbox: BevBox {
                        cx: rng.uniform_range(0.0, 6.0),
                        cy: rng.uniform_range(0.0, 6.0),
                        w: rng.uniform_range(0.5, 3.0),
                        l: rng.uniform_range(0.5, 3.0),
                        class_id: 0,
                    },
                    score: rng.uniform(),
                })
                .collect();
            let thr = rng.uniform_range(0.05, 0.7);
            let got = nms(&dets, thr);
            assert_eq!(got, reference(&dets, thr));
            assert!(got.windows(2).all(|p| p[0].score >= p[1].score));
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    assert!(iou_unchecked(&a.bbox, &b.bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn bundle_shapes_follow_config() {
        let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 1).unwrap();
        assert_eq!(det.tap_shapes(), [[8, 64, 64], [128, 16, 16], [256, 8, 8]]);
        let s = generate_scene(&SceneConfig::default(), 5).unwrap();
        let ppc = pillarize(&s, det.grid()).unwrap();
        let (_, none) = det.forward(&ppc, false, "f").unwrap();
        assert!(none.is_none());
        let (d1, b1) = det.forward(&ppc, true, "f").unwrap();
        let b1 = b1.unwrap();
        assert_eq!(
            b1.shapes(),
            [vec![8, 64, 64], vec![128, 16, 16], vec![256, 8, 8]]
        );
        assert!(b1.all_finite());
        let (d2, b2) = det.forward(&ppc, true, "f").unwrap();
        assert_eq!(d1, d2);
        assert_eq!(Some(b1), b2);
    }

    #[test]
    fn two_block_backbone_taps_first_block() {
        let cfg = DetectorConfig {
            blocks: vec![
                BlockSpec {
                    channels: 128,
                    convs: 1,
                },
                BlockSpec {
                    channels: 64,
                    convs: 1,
                },
            ],
            ..DetectorConfig::default()
        };
        let det = PillarDetector::new(GridConfig::default(), cfg, 1).unwrap();
        assert_eq!(det.tap_shapes()[1], [128, 32, 32]);
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 1).unwrap();
        let bad = Tensor::zeros(&[8, 32, 32]);
        assert!(matches!(det.forward(&bad, true, "f"), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_inverts_targets() {
        let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 1).unwrap();
        let b = BevBox {
            cx: 13.7,
            cy: -2.2,
            w: 1.6,
            l: 3.9,
            class_id: 0,
        };
        let mut s = scene(
            (0..10)
                .map(|i| [13.0 + 0.1 * i as f32, -2.2, 0.5])
                .collect(),
        );
        s.gt_boxes = vec![b];
        let t = det.targets(&s, 3);
        let plane = 64;
        let mut head = vec![-10.0f32; 5 * plane];
        let cell = t.objectness.iter().position(|&o| o == 1.0).unwrap();
        head[cell] = 10.0;
        for k in 0..4 {
            head[(k + 1) * plane + cell] = t.residuals[cell][k];
        }
        let d = det.decode(&head);
        assert_eq!(d.len(), 1);
        assert!(crate::errorset::iou_bev(&d[0].bbox, &b).unwrap() > 0.999);
    }

    #[test]
    fn zero_epochs_is_noop() {
        let mut det =
            PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 1).unwrap();
        let before = det.snapshot();
        let s = generate_scene(&SceneConfig::default(), 0).unwrap();
        let frames = prepare_frames(&det, &[s.clone(), s], 3).unwrap();
        let hyper = DetectorHyper {
            epochs: 0,
            ..DetectorHyper::default()
        };
        let logs = train_detector(&mut det, &frames, &hyper, 0, |_| {}).unwrap();
        assert!(logs.is_empty());
        assert_eq!(det.snapshot(), before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let det = PillarDetector::new(GridConfig::default(), DetectorConfig::default(), 9).unwrap();
        det.save(dir.path()).unwrap();
        let back = PillarDetector::load(dir.path()).unwrap();
        let s = generate_scene(&SceneConfig::default(), 4).unwrap();
        let ppc = pillarize(&s, det.grid()).unwrap();
        let a = det.forward(&ppc, true, "x").unwrap();
        let b = back.forward(&ppc, true, "x").unwrap();
        assert_eq!(a, b);
    }
}

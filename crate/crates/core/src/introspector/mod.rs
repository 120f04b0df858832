//! Introspection networks and their training loop.
//!
//! Tensor modes use an 18-layer residual network whose first convolution
//! takes the NAP channel count; the SF mode uses a small MLP. Both emit two
//! logits ordered `[NoError, Error]`.

mod loss;
mod model;
mod schedule;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use introspect_nn::optim::Sgd;
use introspect_nn::{LayerInfo, Module, Param, Rng64, Summarize, Tensor};
use serde::{Deserialize, Serialize};

pub use loss::{compute_class_weights, focal_loss, focal_loss_logits, softmax2};
pub use model::{stage_widths, BasicBlock, ResNet18, SfMlp};
pub use schedule::{PlateauSchedule, ScheduleEvent};

use crate::error::{Error, Result};
use crate::errorset::{ErrorDataset, Label, Split};
use crate::naps::{percentile_zeroing, select_nap, NapMode, NapTensor};
use crate::nets::load_named;
use crate::store::{read_bundle, write_bundle, TensorRecord};

pub const N_CLASSES: usize = 2;
pub const INTROSPECTOR_SIDECAR: &str = "introspector.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrospectorConfig {
    pub mode: NapMode,
    /// `[C, H, W]` for tensor modes, `[D]` for SF.
    pub input_shape: Vec<usize>,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: Vec<usize>,
}

fn default_width() -> f64 {
    0.25
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

impl IntrospectorConfig {
    pub fn new(mode: NapMode, input_shape: Vec<usize>, width_multiplier: f64) -> Self {
        Self {
            mode,
            input_shape,
            width_multiplier,
            mlp_hidden: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        let want_rank = if self.mode.is_spatial() { 3 } else { 1 };
        if self.input_shape.len() != want_rank || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "mode {} needs a rank-{want_rank} positive input shape, got {:?}",
                self.mode, self.input_shape
            )));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("mlp hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    /// When non-empty, one model is trained per rate and the lowest
    /// validation loss wins; `lr` is then ignored.
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    pub min_delta: f64,
    pub focal_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(w_noerror, w_error)`; computed from the training split when absent.
    pub class_weights: Option<(f64, f64)>,
    /// Optional percentile zeroing applied to tensor inputs.
    pub zeroing_percentile: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            lr_grid: Vec::new(),
            batch_size: 64,
            max_epochs: 200,
            early_stop_patience: 15,
            lr_decay_factor: 0.7,
            lr_decay_patience: 10,
            min_delta: 1e-6,
            focal_gamma: 5.0,
            momentum: 0.9,
            weight_decay: 0.0,
            class_weights: None,
            zeroing_percentile: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.early_stop_patience == 0 || self.lr_decay_patience == 0 {
            return bad("patience values must be positive");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be >= 0");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor must be in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.lrs().iter().any(|lr| !(*lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if let Some((a, b)) = self.class_weights {
            if !(a > 0.0 && b > 0.0) {
                return bad("class weights must be positive");
            }
        }
        if let Some(p) = self.zeroing_percentile {
            if !(0.0..100.0).contains(&p) {
                return bad("zeroing_percentile must be in [0, 100)");
            }
        }
        Ok(())
    }

    pub fn lrs(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            vec![self.lr]
        } else {
            self.lr_grid.clone()
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Cnn(ResNet18),
    Mlp(SfMlp),
}

#[derive(Clone, Debug)]
pub struct Introspector {
    config: IntrospectorConfig,
    net: Net,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionVerdict {
    pub frame_id: String,
    pub label: Label,
    /// Largest softmax probability, in `[0.5, 1]`.
    pub confidence: f64,
    /// Softmax probability of the Error class.
    pub p_error: f64,
}

/// Turns one pair of logits `[NoError, Error]` into a verdict.
pub fn verdict_from_logits(z: [f64; 2], frame_id: &str) -> IntrospectionVerdict {
    let p = softmax2(z[0], z[1]);
    let label = if p[1] > p[0] {
        Label::Error
    } else {
        Label::NoError
    };
    IntrospectionVerdict {
        frame_id: frame_id.to_string(),
        label,
        confidence: p[0].max(p[1]),
        p_error: p[1],
    }
}

impl Introspector {
    pub fn new(config: IntrospectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng64::derive(seed, 0x1A7E);
        let net = if config.mode.is_spatial() {
            Net::Cnn(ResNet18::new(
                config.input_shape[0],
                config.width_multiplier,
                N_CLASSES,
                &mut rng,
            ))
        } else {
            Net::Mlp(SfMlp::new(
                config.input_shape[0],
                &config.mlp_hidden,
                N_CLASSES,
                &mut rng,
            ))
        };
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &IntrospectorConfig {
        &self.config
    }

    pub fn resnet(&self) -> Option<&ResNet18> {
        match &self.net {
            Net::Cnn(r) => Some(r),
            Net::Mlp(_) => None,
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.config.input_shape.len() + 1
            || x.shape()[1..] != self.config.input_shape[..]
        {
            return Err(Error::Shape(format!(
                "{} introspector expects samples of shape {:?}, got batch {:?}",
                self.config.mode,
                self.config.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode logits for a batch `[N, ..input_shape]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        Ok(match &self.net {
            Net::Cnn(r) => r.infer(x),
            Net::Mlp(m) => m.infer(x),
        })
    }

    fn train_forward(&mut self, x: &Tensor) -> Tensor {
        match &mut self.net {
            Net::Cnn(r) => r.forward(x),
            Net::Mlp(m) => m.forward(x),
        }
    }

    fn train_backward(&mut self, grad: &Tensor) {
        match &mut self.net {
            Net::Cnn(r) => r.backward(grad),
            Net::Mlp(m) => m.backward(grad),
        }
    }

    pub fn predict(&self, nap: &NapTensor) -> Result<IntrospectionVerdict> {
        if nap.mode != self.config.mode {
            return Err(Error::Shape(format!(
                "NAP mode {} does not match introspector mode {}",
                nap.mode, self.config.mode
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(nap.data.shape());
        let z = self.logits(&nap.data.clone().reshape(&shape))?;
        Ok(verdict_from_logits(
            [z.data()[0] as f64, z.data()[1] as f64],
            &nap.source_frame,
        ))
    }

    /// Verdicts for every sample, evaluated in batches.
    pub fn predict_samples(&self, samples: &NapSamples) -> Result<Vec<IntrospectionVerdict>> {
        let mut out = Vec::with_capacity(samples.len());
        for start in (0..samples.len()).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(samples.len())).collect();
            let z = self.logits(&samples.batch(&idx))?;
            for (k, &i) in idx.iter().enumerate() {
                let zz = [z.data()[2 * k] as f64, z.data()[2 * k + 1] as f64];
                out.push(verdict_from_logits(zz, &samples.frame_ids[i]));
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut records = Vec::new();
        let mut err = None;
        self.visit(
            &mut |p| match TensorRecord::new(p.name.clone(), &p.shape, p.value.clone()) {
                Ok(r) => records.push(r),
                Err(e) => err = err.take().or(Some(e)),
            },
        );
        if let Some(e) = err {
            return Err(e);
        }
        let attrs = [("mode".to_string(), self.config.mode.to_string())]
            .into_iter()
            .collect();
        write_bundle(&records, &attrs, dir)?;
        let path = dir.join(INTROSPECTOR_SIDECAR);
        let text = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INTROSPECTOR_SIDECAR);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: IntrospectorConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut model = Introspector::new(config, 0)?;
        let named: HashMap<String, (Vec<usize>, Vec<f32>)> = read_bundle(dir)?
            .tensors
            .into_iter()
            .map(|t| (t.name, (t.shape, t.data)))
            .collect();
        load_named(&mut model, &named).map_err(Error::Store)?;
        Ok(model)
    }
}

impl Module for Introspector {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match &self.net {
            Net::Cnn(r) => r.visit(f),
            Net::Mlp(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.net {
            Net::Cnn(r) => r.visit_mut(f),
            Net::Mlp(m) => m.visit_mut(f),
        }
    }
}

impl Summarize for Introspector {
    fn summary(&self, input: &[usize]) -> Vec<LayerInfo> {
        match &self.net {
            Net::Cnn(r) => r.summary(input),
            Net::Mlp(m) => m.summary(input),
        }
    }
}

/// Introspector inputs for one split, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct NapSamples {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub frame_ids: Vec<String>,
}

impl NapSamples {
    pub fn new(sample_shape: Vec<usize>) -> Self {
        Self {
            sample_shape,
            data: Vec::new(),
            labels: Vec::new(),
            frame_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn push(&mut self, nap: &NapTensor, label: u8) -> Result<()> {
        if nap.data.shape() != self.sample_shape.as_slice() {
            return Err(Error::Shape(format!(
                "frame {}: NAP shape {:?} differs from {:?}",
                nap.source_frame,
                nap.data.shape(),
                self.sample_shape
            )));
        }
        self.data.extend_from_slice(nap.data.data());
        self.labels.push(label);
        self.frame_ids.push(nap.source_frame.clone());
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let rows: Vec<&[f32]> = idx.iter().map(|&i| self.sample(i)).collect();
        Tensor::stack(&rows, &self.sample_shape)
    }
}

/// Builds the NAP input for one record, optionally percentile-zeroed.
pub fn nap_for(
    dataset: &ErrorDataset,
    record: &crate::errorset::ErrorRecord,
    mode: NapMode,
    zeroing: Option<f64>,
) -> Result<NapTensor> {
    let bundle = dataset.load_bundle(record)?;
    let mut nap = select_nap(&bundle, mode)?;
    if let (Some(p), true) = (zeroing, mode.is_spatial()) {
        nap.data = percentile_zeroing(&nap.data, p)?.0;
    }
    Ok(nap)
}

/// Loads every record of `split` as NAP inputs for `mode`.
pub fn load_split(
    dataset: &ErrorDataset,
    mode: NapMode,
    split: Split,
    zeroing: Option<f64>,
) -> Result<NapSamples> {
    let mut samples: Option<NapSamples> = None;
    for r in dataset.split(split) {
        let nap = nap_for(dataset, r, mode, zeroing)?;
        let s = samples.get_or_insert_with(|| NapSamples::new(nap.data.shape().to_vec()));
        s.push(&nap, r.label)?;
    }
    samples.ok_or_else(|| Error::Invalid(format!("{} split is empty", split.as_str())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            h.epoch, h.train_loss, h.val_loss, h.lr
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Introspector,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub lr: f64,
    pub class_weights: (f64, f64),
}

/// Mean focal loss of the model in eval mode over all samples.
pub fn evaluate_loss(
    model: &Introspector,
    samples: &NapSamples,
    gamma: f64,
    weights: (f64, f64),
) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..samples.len()).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(samples.len())).collect();
        let z = model.logits(&samples.batch(&idx))?;
        let labels: Vec<u8> = idx.iter().map(|&i| samples.labels[i]).collect();
        let (l, _) = focal_loss_logits(&loss::logits_f64(&z), &labels, gamma, weights);
        total += l * idx.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains one introspector per learning rate and keeps the run with the
/// lowest best validation loss. Each run returns its best-validation weights.
pub fn train_introspector(
    train: &NapSamples,
    val: &NapSamples,
    config: &IntrospectorConfig,
    hyper: &TrainHyper,
    seed: u64,
    mut on_epoch: impl FnMut(f64, &HistoryRow),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "train and validation splits must be nonempty".into(),
        ));
    }
    let weights = match hyper.class_weights {
        Some(w) => w,
        None => compute_class_weights(&train.labels)?,
    };
    let mut best: Option<TrainOutcome> = None;
    for lr in hyper.lrs() {
        let run = train_once(train, val, config, hyper, lr, weights, seed, &mut on_epoch)?;
        if best
            .as_ref()
            .map_or(true, |b| run.best_val_loss < b.best_val_loss)
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one learning rate"))
}

#[allow(clippy::too_many_arguments)]
fn train_once(
    train: &NapSamples,
    val: &NapSamples,
    config: &IntrospectorConfig,
    hyper: &TrainHyper,
    lr: f64,
    weights: (f64, f64),
    seed: u64,
    on_epoch: &mut impl FnMut(f64, &HistoryRow),
) -> Result<TrainOutcome> {
    let mut model = Introspector::new(config.clone(), seed)?;
    let mut opt = Sgd::new(lr, hyper.momentum, hyper.weight_decay);
    let mut schedule = PlateauSchedule::new(
        hyper.early_stop_patience,
        hyper.lr_decay_patience,
        hyper.lr_decay_factor,
        hyper.min_delta,
    );
    let mut history = Vec::new();
    let mut best_state = model.snapshot();
    let mut best_epoch = 0;
    for epoch in 1..=hyper.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng64::derive(seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train.batch(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
            let z = model.train_forward(&x);
            let (l, g) =
                focal_loss_logits(&loss::logits_f64(&z), &labels, hyper.focal_gamma, weights);
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} introspector loss became {l} in epoch {epoch}",
                    config.mode
                )));
            }
            let grad = Tensor::from_vec(z.shape(), g.iter().map(|&v| v as f32).collect());
            model.train_backward(&grad);
            opt.step(&mut model);
            total += l * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = evaluate_loss(&model, val, hyper.focal_gamma, weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "{} validation loss became {val_loss}",
                config.mode
            )));
        }
        let row = HistoryRow {
            epoch,
            train_loss: total / seen.max(1) as f64,
            val_loss,
            lr: opt.lr,
        };
        on_epoch(lr, &row);
        history.push(row);
        let ev = schedule.observe(val_loss);
        if ev.improved {
            best_state = model.snapshot();
            best_epoch = epoch;
        }
        if ev.decay_lr {
            opt.lr *= hyper.lr_decay_factor;
        }
        if ev.stop {
            break;
        }
    }
    model.restore(&best_state);
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: schedule.best(),
        lr,
        class_weights: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_examples() {
        let v = verdict_from_logits([1.5, 1.5], "f");
        assert_eq!(v.confidence, 0.5);
        let v = verdict_from_logits([3.0, 0.0], "f");
        assert!((v.confidence - 3f64.exp() / (3f64.exp() + 1.0)).abs() < 1e-12);
        assert_eq!(v.label, Label::NoError);
        let shifted = verdict_from_logits([3.0 + 7.0, 7.0], "f");
        assert_eq!(shifted.label, v.label);
    }

    #[test]
    fn config_validation() {
        assert!(Introspector::new(
            IntrospectorConfig::new(NapMode::Lla, vec![256, 8, 8], 0.0),
            0
        )
        .is_err());
        assert!(
            Introspector::new(IntrospectorConfig::new(NapMode::Sf, vec![8, 8, 8], 0.5), 0).is_err()
        );
    }
}

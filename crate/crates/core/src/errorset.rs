//! Frame-level error labels and the on-disk error dataset.
//!
//! Layout under the dataset root:
//!
//! ```text
//! index.jsonl        one ErrorRecord per line, sorted by frame_id
//! bundles/<frame>/   ppc, mla, lla activation bundle
//! detections.jsonl   ground truth and post-NMS detections per frame
//! summary.json       class counts, split sizes, activation sparsity
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use introspect_nn::{Rng64, Tensor};
use serde::{Deserialize, Serialize};

use crate::detector::{pillarize, ActivationBundle, Detection, GridConfig, PillarDetector};
use crate::error::{Error, Result};
use crate::naps::percentile_zeroing;
use crate::scene::{read_index, read_scene, scene_dir, BevBox, PointCloudScene};

pub const INDEX_FILE: &str = "index.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BUNDLES_DIR: &str = "bundles";
const SPLIT_STREAM: u64 = 0x5711;

/// Axis-aligned BEV intersection over union.
pub fn iou_bev(a: &BevBox, b: &BevBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.l > 0.0) {
            return Err(Error::Invalid(format!(
                "box extents must be positive, got w={} l={}",
                bx.w, bx.l
            )));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BevBox, b: &BevBox) -> f64 {
    let (ax0, ax1) = a.x_range();
    let (ay0, ay1) = a.y_range();
    let (bx0, bx1) = b.x_range();
    let (by0, by1) = b.y_range();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NoError,
    Error,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NoError => 0,
            Label::Error => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::NoError),
            1 => Some(Label::Error),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NoError => "NoError",
            Label::Error => "Error",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchRule {
    pub iou_threshold: f64,
    /// Require equal class ids for a prediction to count as a match.
    pub strict_class: bool,
}

impl Default for MatchRule {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            strict_class: false,
        }
    }
}

/// A ground-truth box is missed when no prediction overlaps it with IoU
/// strictly greater than the threshold. Predictions may cover several boxes
/// and unmatched predictions are ignored.
pub fn label_frame(gt: &[BevBox], preds: &[Detection], rule: &MatchRule) -> (Label, usize) {
    let n_missed = gt
        .iter()
        .filter(|g| {
            !preds.iter().any(|p| {
                (!rule.strict_class || p.bbox.class_id == g.class_id)
                    && iou_unchecked(g, &p.bbox) > rule.iou_threshold
            })
        })
        .count();
    let label = if n_missed >= 1 {
        Label::Error
    } else {
        Label::NoError
    };
    (label, n_missed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub frame_id: String,
    /// Bundle directory relative to the dataset root.
    pub bundle_path: String,
    /// 1 = Error, 0 = NoError.
    pub label: u8,
    pub n_gt: usize,
    pub n_missed: usize,
    pub split: Split,
}

impl ErrorRecord {
    pub fn label(&self) -> Label {
        if self.label == 1 {
            Label::Error
        } else {
            Label::NoError
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorDataset {
    pub root: PathBuf,
    pub records: Vec<ErrorRecord>,
}

impl ErrorDataset {
    /// `(n_error, n_noerror)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let n_error = self.records.iter().filter(|r| r.label == 1).count();
        (n_error, self.records.len() - n_error)
    }

    pub fn split(&self, split: Split) -> Vec<&ErrorRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn bundle_dir(&self, record: &ErrorRecord) -> PathBuf {
        self.root.join(&record.bundle_path)
    }

    pub fn load_bundle(&self, record: &ErrorRecord) -> Result<ActivationBundle> {
        let (mut b, _) = ActivationBundle::read(&self.bundle_dir(record))?;
        b.frame_id = record.frame_id.clone();
        Ok(b)
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Deterministic split assignment: ids are sorted, shuffled with a seeded
/// generator and cut into train/val/test by the rounded ratios. The result
/// is aligned with the input order and does not depend on it.
pub fn assign_splits(frame_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    check_ratios(ratios)?;
    let mut order: Vec<usize> = (0..frame_ids.len()).collect();
    order.sort_by(|&a, &b| frame_ids[a].cmp(&frame_ids[b]));
    Rng64::derive(seed, SPLIT_STREAM).shuffle(&mut order);
    let n = frame_ids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Something that turns a scene into detections plus tapped activations.
pub trait FrameDetector {
    fn grid(&self) -> &GridConfig;
    fn detect(
        &self,
        scene: &PointCloudScene,
        ppc: &Tensor,
    ) -> Result<(Vec<Detection>, ActivationBundle)>;
}

impl FrameDetector for PillarDetector {
    fn grid(&self) -> &GridConfig {
        PillarDetector::grid(self)
    }

    fn detect(
        &self,
        scene: &PointCloudScene,
        ppc: &Tensor,
    ) -> Result<(Vec<Detection>, ActivationBundle)> {
        let (dets, bundle) = self.forward(ppc, true, &scene.scene_id)?;
        Ok((dets, bundle.expect("tap requested")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorSetConfig {
    #[serde(flatten)]
    pub rule: MatchRule,
    pub split_ratios: [f64; 3],
    pub exclude_empty_frames: bool,
    /// Percentile used for the sparsity report on LLA.
    pub zeroing_percentile: f64,
}

impl Default for ErrorSetConfig {
    fn default() -> Self {
        Self {
            rule: MatchRule::default(),
            split_ratios: [0.7, 0.15, 0.15],
            exclude_empty_frames: false,
            zeroing_percentile: 65.0,
        }
    }
}

impl ErrorSetConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.rule.iou_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must be in (0, 1), got {t}"
            )));
        }
        if !(0.0..100.0).contains(&self.zeroing_percentile) {
            return Err(Error::Config(
                "zeroing_percentile must be in [0, 100)".into(),
            ));
        }
        check_ratios(self.split_ratios)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: String,
    pub gt: Vec<BevBox>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub ppc_nonzero: f64,
    pub mla_nonzero: f64,
    pub lla_nonzero: f64,
    pub zeroing_percentile: f64,
    /// Mean share of LLA entries altered by percentile zeroing.
    pub lla_zeroing_changed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_records: usize,
    pub n_error: usize,
    pub n_noerror: usize,
    pub n_excluded_empty: usize,
    pub splits: BTreeMap<String, usize>,
    pub split_errors: BTreeMap<String, usize>,
    pub total_gt: usize,
    pub total_missed: usize,
    pub sparsity: SparsityStats,
}

fn nonzero_fraction(t: &Tensor) -> f64 {
    t.data().iter().filter(|v| **v != 0.0).count() as f64 / t.numel().max(1) as f64
}

/// Runs the detector over every indexed scene, labels frames and writes the
/// dataset under `out_dir`.
pub fn build_error_dataset(
    scene_root: &Path,
    detector: &dyn FrameDetector,
    config: &ErrorSetConfig,
    seed: u64,
    out_dir: &Path,
    mut progress: impl FnMut(usize, usize),
) -> Result<ErrorDataset> {
    config.validate()?;
    let index = read_index(scene_root)?;
    if index.is_empty() {
        return Err(Error::Invalid("scene index is empty".into()));
    }
    let grid = detector.grid().clone();
    let cover_x = (
        grid.origin_x,
        grid.origin_x + grid.grid_h as f64 * grid.cell_size,
    );
    let cover_y = (
        grid.origin_y,
        grid.origin_y + grid.grid_w as f64 * grid.cell_size,
    );
    let bundles_root = out_dir.join(BUNDLES_DIR);
    fs::create_dir_all(&bundles_root).map_err(|e| Error::io(&bundles_root, e))?;

    let mut pending = Vec::with_capacity(index.len());
    let mut det_lines = Vec::with_capacity(index.len());
    let mut sparsity = SparsityStats {
        zeroing_percentile: config.zeroing_percentile,
        ..SparsityStats::default()
    };
    let mut excluded = 0usize;
    for (i, entry) in index.iter().enumerate() {
        let scene = read_scene(&scene_dir(scene_root, entry))?;
        let outside = scene.points.iter().any(|p| {
            let (x, y) = (p[0] as f64, p[1] as f64);
            x < cover_x.0 || x > cover_x.1 || y < cover_y.0 || y > cover_y.1
        });
        if outside {
            return Err(Error::Invalid(format!(
                "scene {} has points outside the detector grid; checkpoint and scenes do not match",
                scene.scene_id
            )));
        }
        if config.exclude_empty_frames && scene.gt_boxes.is_empty() {
            excluded += 1;
            continue;
        }
        let ppc = pillarize(&scene, &grid)?;
        let (dets, mut bundle) = detector.detect(&scene, &ppc)?;
        bundle.frame_id = scene.scene_id.clone();
        if !bundle.all_finite() {
            return Err(Error::Invalid(format!(
                "frame {}: non-finite activations",
                scene.scene_id
            )));
        }
        let (label, n_missed) = label_frame(&scene.gt_boxes, &dets, &config.rule);
        sparsity.ppc_nonzero += nonzero_fraction(&bundle.ppc);
        sparsity.mla_nonzero += nonzero_fraction(&bundle.mla);
        sparsity.lla_nonzero += nonzero_fraction(&bundle.lla);
        sparsity.lla_zeroing_changed +=
            percentile_zeroing(&bundle.lla, config.zeroing_percentile)?.1;
        let rel = format!("{BUNDLES_DIR}/{}", scene.scene_id);
        bundle.write(
            &out_dir.join(&rel),
            BTreeMap::from([("label".to_string(), label.as_u8().to_string())]),
        )?;
        det_lines.push(FrameDetections {
            frame_id: scene.scene_id.clone(),
            gt: scene.gt_boxes.clone(),
            detections: dets,
        });
        pending.push((scene.scene_id, rel, label, scene.gt_boxes.len(), n_missed));
        progress(i + 1, index.len());
    }
    if pending.is_empty() {
        return Err(Error::Invalid("no frames left after exclusion".into()));
    }
    let n = pending.len() as f64;
    sparsity.ppc_nonzero /= n;
    sparsity.mla_nonzero /= n;
    sparsity.lla_nonzero /= n;
    sparsity.lla_zeroing_changed /= n;

    let ids: Vec<String> = pending.iter().map(|p| p.0.clone()).collect();
    let splits = assign_splits(&ids, config.split_ratios, seed)?;
    let mut records: Vec<ErrorRecord> = pending
        .into_iter()
        .zip(splits)
        .map(
            |((frame_id, bundle_path, label, n_gt, n_missed), split)| ErrorRecord {
                frame_id,
                bundle_path,
                label: label.as_u8(),
                n_gt,
                n_missed,
                split,
            },
        )
        .collect();
    records.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    det_lines.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));

    write_jsonl(&out_dir.join(DETECTIONS_FILE), &det_lines)?;
    let dataset = ErrorDataset {
        root: out_dir.to_path_buf(),
        records,
    };
    write_dataset(&dataset, excluded, sparsity)?;
    Ok(dataset)
}

/// Writes `index.jsonl` and `summary.json` for a dataset whose bundles are
/// already in place.
pub fn write_dataset(
    dataset: &ErrorDataset,
    n_excluded_empty: usize,
    sparsity: SparsityStats,
) -> Result<DatasetSummary> {
    fs::create_dir_all(&dataset.root).map_err(|e| Error::io(&dataset.root, e))?;
    write_jsonl(&dataset.root.join(INDEX_FILE), &dataset.records)?;
    let (n_error, n_noerror) = dataset.class_counts();
    let mut splits = BTreeMap::new();
    let mut split_errors = BTreeMap::new();
    for s in Split::ALL {
        let recs = dataset.split(s);
        splits.insert(s.as_str().to_string(), recs.len());
        split_errors.insert(
            s.as_str().to_string(),
            recs.iter().filter(|r| r.label == 1).count(),
        );
    }
    let summary = DatasetSummary {
        n_records: dataset.records.len(),
        n_error,
        n_noerror,
        n_excluded_empty,
        splits,
        split_errors,
        total_gt: dataset.records.iter().map(|r| r.n_gt).sum(),
        total_missed: dataset.records.iter().map(|r| r.n_missed).sum(),
        sparsity,
    };
    let path = dataset.root.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub fn read_error_dataset(root: &Path) -> Result<ErrorDataset> {
    let records: Vec<ErrorRecord> = read_jsonl(&root.join(INDEX_FILE))?;
    for r in &records {
        if r.label > 1 || r.n_missed > r.n_gt || (r.label == 1) != (r.n_missed >= 1) && r.n_gt > 0 {
            return Err(Error::Invalid(format!(
                "inconsistent record for frame {}",
                r.frame_id
            )));
        }
    }
    Ok(ErrorDataset {
        root: root.to_path_buf(),
        records,
    })
}

pub fn read_detections(root: &Path) -> Result<Vec<FrameDetections>> {
    read_jsonl(&root.join(DETECTIONS_FILE))
}

pub fn read_summary(root: &Path) -> Result<DatasetSummary> {
    let path = root.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BevBox {
        BevBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            l: x1 - x0,
            w: y1 - y0,
            class_id: 0,
        }
    }

    fn pred(b: BevBox) -> Detection {
        Detection {
            bbox: b,
            score: 0.9,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou_bev(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_bev(&a, &bx(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        let third = iou_bev(&a, &bx(1.0, 0.0, 3.0, 2.0)).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        let mut bad = a;
        bad.w = 0.0;
        assert!(iou_bev(&a, &bad).is_err());
    }

    #[test]
    fn labeling_cases() {
        let rule = MatchRule::default();
        assert_eq!(label_frame(&[], &[], &rule), (Label::NoError, 0));
        let g = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(label_frame(&[g], &[pred(g)], &rule), (Label::NoError, 0));
        // IoU 0.5: overlap 2 of union 4... use a 2x2 box against a 2x4 box containing it.
        let half = bx(0.0, 0.0, 2.0, 4.0);
        assert!((iou_bev(&g, &half).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(label_frame(&[g], &[pred(half)], &rule), (Label::Error, 1));
    }

    #[test]
    fn iou_exactly_at_threshold_is_a_miss() {
        let g = bx(0.0, 0.0, 1.0, 1.0);
        let p = bx(0.0, 0.0, 1.0, 2.0);
        let rule = MatchRule {
            iou_threshold: 0.5,
            strict_class: false,
        };
        assert_eq!(label_frame(&[g], &[pred(p)], &rule).1, 1);
    }

    #[test]
    fn strict_class_requires_agreement() {
        let g = bx(0.0, 0.0, 2.0, 2.0);
        let mut p = g;
        p.class_id = 1;
        assert_eq!(label_frame(&[g], &[pred(p)], &MatchRule::default()).1, 0);
        let strict = MatchRule {
            strict_class: true,
            ..MatchRule::default()
        };
        assert_eq!(label_frame(&[g], &[pred(p)], &strict).1, 1);
    }

    #[test]
    fn one_prediction_may_cover_two_boxes() {
        let g1 = bx(0.0, 0.0, 2.0, 2.0);
        let g2 = bx(0.05, 0.0, 2.05, 2.0);
        let p = bx(0.02, 0.0, 2.02, 2.0);
        assert_eq!(
            label_frame(&[g1, g2], &[pred(p)], &MatchRule::default()).1,
            0
        );
    }

    #[test]
    fn splits_are_order_invariant_and_sized() {
        let ids: Vec<String> = (0..100).map(|i| format!("f{i:03}")).collect();
        let a = assign_splits(&ids, [0.7, 0.15, 0.15], 3).unwrap();
        let mut rev = ids.clone();
        rev.reverse();
        let b = assign_splits(&rev, [0.7, 0.15, 0.15], 3).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let j = rev.iter().position(|r| r == id).unwrap();
            assert_eq!(a[i], b[j]);
        }
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 70);
        assert_eq!(a.iter().filter(|s| **s == Split::Val).count(), 15);
        assert!(assign_splits(&ids, [0.5, 0.2, 0.2], 3).is_err());
    }
}

//! Deterministic synthetic bird's-eye-view LiDAR scenes.
//!
//! The sensor sits at the origin. Objects are axis-aligned boxes (length
//! along x, width along y) whose perimeters are sampled with points; points
//! are thinned with range (`exp(-sparsity_decay * d)` keep probability) and a
//! random subset of objects is occluded, keeping only one short stretch of
//! their outline. Objects are often parked side by side, which crowds the
//! detector. Uniform ground returns and small clutter clusters are added on
//! top. All randomness comes from [`Rng64`] seeded with the scene seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use introspect_nn::Rng64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{read_bundle, write_bundle, TensorRecord};

/// Occluded objects keep one contiguous stretch of their outline covering
/// at most this fraction of the perimeter.
pub const OCCLUDED_KEEP_MAX: f64 = 0.3;
/// Chance that an object is parked beside an already placed one.
const PAIR_PROB: f64 = 0.6;
/// Extra lateral spacing of a parked pair beyond the gap (meters), and the
/// longitudinal offset range between the two (meters).
const PAIR_SPACING: f64 = 0.4;
const PAIR_SHIFT: f64 = 1.0;
/// Objects are not placed closer than this to the sensor (meters).
const MIN_RANGE: f64 = 4.0;
/// Free space kept between neighbouring objects (meters).
const OBJECT_GAP: f64 = 0.5;
const CLUTTER_CLUSTER: usize = 6;
const CLUTTER_RADIUS: f64 = 0.4;

/// Axis-aligned BEV box: centre `(cx, cy)`, width `w` along y and length
/// `l` along x, all in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub class_id: u32,
}

impl BevBox {
    pub fn x_range(&self) -> (f64, f64) {
        (self.cx - self.l / 2.0, self.cx + self.l / 2.0)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.cy - self.w / 2.0, self.cy + self.w / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Closed-box membership test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }

    fn inflated(&self, by: f64) -> BevBox {
        BevBox {
            w: self.w + 2.0 * by,
            l: self.l + 2.0 * by,
            ..*self
        }
    }

    fn intersects(&self, other: &BevBox) -> bool {
        let (ax0, ax1) = self.x_range();
        let (ay0, ay1) = self.y_range();
        let (bx0, bx1) = other.x_range();
        let (by0, by1) = other.y_range();
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub bounds: Bounds,
    /// Inclusive `[min, max]` object count.
    pub n_objects_range: [usize; 2],
    pub points_per_object_base: usize,
    pub ground_points: usize,
    /// Per-meter dropout rate for object points.
    pub sparsity_decay: f64,
    pub occlusion_prob: f64,
    pub clutter_noise_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bounds: Bounds {
                x_min: 0.0,
                x_max: 32.0,
                y_min: -16.0,
                y_max: 16.0,
            },
            n_objects_range: [1, 6],
            points_per_object_base: 80,
            ground_points: 40,
            sparsity_decay: 0.02,
            occlusion_prob: 0.05,
            clutter_noise_points: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let finite = [b.x_min, b.x_max, b.y_min, b.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || b.x_max <= b.x_min || b.y_max <= b.y_min {
            return Err(Error::Config(format!("degenerate scene bounds {b:?}")));
        }
        if self.n_objects_range[0] > self.n_objects_range[1] {
            return Err(Error::Config(format!(
                "n_objects_range {:?} has min > max",
                self.n_objects_range
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!(
                "occlusion_prob {} outside [0, 1]",
                self.occlusion_prob
            )));
        }
        if !(self.sparsity_decay >= 0.0 && self.sparsity_decay.is_finite()) {
            return Err(Error::Config(format!(
                "sparsity_decay {} must be >= 0",
                self.sparsity_decay
            )));
        }
        Ok(())
    }
}

/// One synthetic LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudScene {
    pub scene_id: String,
    pub seed: u64,
    /// `(x, y, intensity)` per point.
    pub points: Vec<[f32; 3]>,
    pub gt_boxes: Vec<BevBox>,
    /// Fraction of each box's base point budget that survived thinning and
    /// occlusion, aligned with `gt_boxes`.
    pub visibility: Vec<f32>,
}

/// Object templates: (length, width, class id).
const TEMPLATES: [(f64, f64, u32); 2] = [(3.9, 1.6, 0), (6.0, 2.4, 1)];

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<PointCloudScene> {
    config.validate()?;
    let mut rng = Rng64::new(seed);
    let b = config.bounds;
    let [lo, hi] = config.n_objects_range;
    let n_objects = lo + rng.below((hi - lo + 1) as u64) as usize;

    let mut boxes: Vec<BevBox> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let (tl, tw, class_id) = if rng.bernoulli(0.25) {
            TEMPLATES[1]
        } else {
            TEMPLATES[0]
        };
        let l = round_f32(tl * rng.uniform_range(0.95, 1.05));
        let w = round_f32(tw * rng.uniform_range(0.95, 1.05));
        let x_lo = (b.x_min + l / 2.0 + OBJECT_GAP).max(MIN_RANGE + l / 2.0);
        let x_hi = b.x_max - l / 2.0 - OBJECT_GAP;
        let y_lo = b.y_min + w / 2.0 + OBJECT_GAP;
        let y_hi = b.y_max - w / 2.0 - OBJECT_GAP;
        // Attempts are always drawn so the stream does not depend on success.
        let mut placed = None;
        let pair = rng.bernoulli(PAIR_PROB) && !boxes.is_empty();
        for _ in 0..20 {
            let mut cx = round_f32(rng.uniform_range(x_lo, x_hi.max(x_lo)));
            let mut cy = round_f32(rng.uniform_range(y_lo, y_hi.max(y_lo)));
            let anchor = rng.below(boxes.len().max(1) as u64) as usize;
            let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            let shift = rng.uniform_range(-PAIR_SHIFT, PAIR_SHIFT);
            let spacing = rng.uniform_range(0.0, PAIR_SPACING);
            if pair {
                let a = &boxes[anchor];
                let dy = a.w / 2.0 + w / 2.0 + OBJECT_GAP + 0.05 + spacing;
                cx = round_f32((a.cx + shift).clamp(x_lo, x_hi.max(x_lo)));
                cy = round_f32((a.cy + side * dy).clamp(y_lo, y_hi.max(y_lo)));
            }
            let cand = BevBox {
                cx,
                cy,
                w,
                l,
                class_id,
            };
            let fits = x_hi >= x_lo && y_hi >= y_lo;
            if placed.is_none()
                && fits
                && !boxes
                    .iter()
                    .any(|o| o.inflated(OBJECT_GAP).intersects(&cand))
            {
                placed = Some(cand);
            }
        }
        if let Some(bx) = placed {
            boxes.push(bx);
        }
    }

    let mut points: Vec<[f32; 3]> = Vec::new();
    let mut visibility = Vec::with_capacity(boxes.len());
    for bx in &boxes {
        let range = bx.cx.hypot(bx.cy);
        let keep_range = (-config.sparsity_decay * range).exp();
        let occluded = rng.bernoulli(config.occlusion_prob);
        let perimeter = 2.0 * (bx.l + bx.w);
        let arc_len = if occluded {
            rng.uniform_range(0.0, OCCLUDED_KEEP_MAX) * perimeter
        } else {
            perimeter
        };
        let arc_start = rng.uniform() * perimeter;
        let mut kept = 0usize;
        for _ in 0..config.points_per_object_base {
            let t = rng.uniform() * perimeter;
            let inset = rng.uniform_range(0.0, 0.1);
            let intensity = rng.uniform();
            let survive =
                rng.uniform() < keep_range && (t - arc_start).rem_euclid(perimeter) < arc_len;
            if !survive {
                continue;
            }
            let (x0, x1) = bx.x_range();
            let (y0, y1) = bx.y_range();
            let (x, y) = if t < bx.l {
                (x0 + t, y0 + inset)
            } else if t < bx.l + bx.w {
                (x1 - inset, y0 + (t - bx.l))
            } else if t < 2.0 * bx.l + bx.w {
                (x1 - (t - bx.l - bx.w), y1 - inset)
            } else {
                (x0 + inset, y1 - (t - 2.0 * bx.l - bx.w))
            };
            let (x, y) = (x.clamp(x0, x1), y.clamp(y0, y1));
            points.push([x as f32, y as f32, intensity as f32]);
            kept += 1;
        }
        let budget = config.points_per_object_base.max(1) as f32;
        visibility.push(kept as f32 / budget);
    }

    for _ in 0..config.ground_points {
        let x = rng.uniform_range(b.x_min, b.x_max);
        let y = rng.uniform_range(b.y_min, b.y_max);
        let intensity = rng.uniform();
        if boxes.iter().any(|bx| bx.contains(x, y)) {
            continue;
        }
        points.push([x as f32, y as f32, intensity as f32]);
    }

    let mut remaining = config.clutter_noise_points;
    while remaining > 0 {
        let cx = rng.uniform_range(b.x_min, b.x_max);
        let cy = rng.uniform_range(b.y_min, b.y_max);
        let k = remaining.min(CLUTTER_CLUSTER);
        for _ in 0..k {
            let x =
                (cx + rng.uniform_range(-CLUTTER_RADIUS, CLUTTER_RADIUS)).clamp(b.x_min, b.x_max);
            let y =
                (cy + rng.uniform_range(-CLUTTER_RADIUS, CLUTTER_RADIUS)).clamp(b.y_min, b.y_max);
            let intensity = rng.uniform();
            if boxes.iter().any(|bx| bx.contains(x, y)) {
                continue;
            }
            points.push([x as f32, y as f32, intensity as f32]);
        }
        remaining -= k;
    }

    Ok(PointCloudScene {
        scene_id: format!("seed_{seed}"),
        seed,
        points,
        gt_boxes: boxes,
        visibility,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneIndexEntry {
    pub scene_id: String,
    pub seed: u64,
    pub n_boxes: usize,
    pub n_points: usize,
    /// Bundle directory relative to the dataset root.
    pub dir: String,
}

pub const SCENE_INDEX_FILE: &str = "index.json";

/// Writes a scene as a tensor-store bundle: `points` (N x 3), `gt_boxes`
/// (M x 5: cx, cy, w, l, class) and `visibility` (M). Tensors with zero rows
/// are omitted; `n_points`/`n_boxes` attributes carry the counts.
pub fn write_scene(scene: &PointCloudScene, dir: &Path) -> Result<()> {
    let mut records = Vec::new();
    if !scene.points.is_empty() {
        let data = scene.points.iter().flatten().copied().collect();
        records.push(TensorRecord::new("points", &[scene.points.len(), 3], data)?);
    }
    if !scene.gt_boxes.is_empty() {
        let data = scene
            .gt_boxes
            .iter()
            .flat_map(|b| {
                [
                    b.cx as f32,
                    b.cy as f32,
                    b.w as f32,
                    b.l as f32,
                    b.class_id as f32,
                ]
            })
            .collect();
        records.push(TensorRecord::new(
            "gt_boxes",
            &[scene.gt_boxes.len(), 5],
            data,
        )?);
        records.push(TensorRecord::new(
            "visibility",
            &[scene.visibility.len()],
            scene.visibility.clone(),
        )?);
    }
    let attributes = BTreeMap::from([
        ("scene_id".to_string(), scene.scene_id.clone()),
        ("seed".to_string(), scene.seed.to_string()),
        ("n_points".to_string(), scene.points.len().to_string()),
        ("n_boxes".to_string(), scene.gt_boxes.len().to_string()),
    ]);
    write_bundle(&records, &attributes, dir)
}

pub fn read_scene(dir: &Path) -> Result<PointCloudScene> {
    let mut bundle = read_bundle(dir)?;
    let scene_id = bundle
        .attr("scene_id")
        .ok_or_else(|| Error::Store(format!("{}: missing scene_id attribute", dir.display())))?
        .to_string();
    let seed = bundle
        .attr("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            Error::Store(format!(
                "{}: missing or invalid seed attribute",
                dir.display()
            ))
        })?;
    let points = match bundle.take("points") {
        Some(t) if t.shape.len() == 2 && t.shape[1] == 3 => {
            t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
        }
        Some(t) => {
            return Err(Error::Shape(format!(
                "points tensor has shape {:?}, expected N x 3",
                t.shape
            )))
        }
        None => Vec::new(),
    };
    let gt_boxes: Vec<BevBox> = match bundle.take("gt_boxes") {
        Some(t) if t.shape.len() == 2 && t.shape[1] == 5 => t
            .data
            .chunks_exact(5)
            .map(|c| BevBox {
                cx: c[0] as f64,
                cy: c[1] as f64,
                w: c[2] as f64,
                l: c[3] as f64,
                class_id: c[4] as u32,
            })
            .collect(),
        Some(t) => {
            return Err(Error::Shape(format!(
                "gt_boxes tensor has shape {:?}, expected M x 5",
                t.shape
            )))
        }
        None => Vec::new(),
    };
    let visibility = bundle
        .take("visibility")
        .map(|t| t.data)
        .unwrap_or_else(|| vec![1.0; gt_boxes.len()]);
    Ok(PointCloudScene {
        scene_id,
        seed,
        points,
        gt_boxes,
        visibility,
    })
}

/// Generates `n` scenes with seeds `base_seed + i` under `out_dir` and writes
/// the JSON index.
pub fn generate_dataset(
    config: &SceneConfig,
    n: usize,
    base_seed: u64,
    out_dir: &Path,
) -> Result<Vec<SceneIndexEntry>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed.wrapping_add(i as u64);
        let mut scene = generate_scene(config, seed)?;
        scene.scene_id = format!("scene_{i:05}");
        let dir = scene.scene_id.clone();
        write_scene(&scene, &out_dir.join(&dir))?;
        index.push(SceneIndexEntry {
            scene_id: scene.scene_id,
            seed,
            n_boxes: scene.gt_boxes.len(),
            n_points: scene.points.len(),
            dir,
        });
    }
    let path = out_dir.join(SCENE_INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<Vec<SceneIndexEntry>> {
    let path = root.join(SCENE_INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn scene_dir(root: &Path, entry: &SceneIndexEntry) -> PathBuf {
    root.join(&entry.dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_in(scene: &PointCloudScene, b: &BevBox) -> usize {
        scene
            .points
            .iter()
            .filter(|p| b.contains(p[0] as f64, p[1] as f64))
            .count()
    }

    #[test]
    fn empty_configuration_gives_empty_scene() {
        let cfg = SceneConfig {
            n_objects_range: [0, 0],
            clutter_noise_points: 0,
            ground_points: 0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.points.is_empty());
        assert!(s.gt_boxes.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(
            generate_scene(&cfg, 17).unwrap(),
            generate_scene(&cfg, 17).unwrap()
        );
        assert_ne!(
            generate_scene(&cfg, 17).unwrap(),
            generate_scene(&cfg, 18).unwrap()
        );
    }

    #[test]
    fn no_thinning_keeps_point_budget() {
        let cfg = SceneConfig {
            sparsity_decay: 0.0,
            occlusion_prob: 0.0,
            ..SceneConfig::default()
        };
        for seed in 0..50 {
            let s = generate_scene(&cfg, seed).unwrap();
            for b in &s.gt_boxes {
                let n = points_in(&s, b);
                assert!(
                    n as f64 >= 0.9 * cfg.points_per_object_base as f64,
                    "seed {seed}: {n}"
                );
            }
        }
    }

    #[test]
    fn everything_inside_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(&cfg, seed).unwrap();
            for p in &s.points {
                assert!(cfg.bounds.contains(p[0] as f64, p[1] as f64));
                assert!((0.0..=1.0).contains(&p[2]));
            }
            for b in &s.gt_boxes {
                let (x0, x1) = b.x_range();
                let (y0, y1) = b.y_range();
                assert!(cfg.bounds.contains(x0, y0) && cfg.bounds.contains(x1, y1));
                assert!(b.w > 0.0 && b.l > 0.0);
            }
            for (i, a) in s.gt_boxes.iter().enumerate() {
                for b in &s.gt_boxes[i + 1..] {
                    assert!(!a.intersects(b));
                }
            }
        }
    }

    #[test]
    fn occlusion_keeps_a_short_stretch() {
        let cfg = SceneConfig {
            sparsity_decay: 0.0,
            occlusion_prob: 1.0,
            ground_points: 0,
            ..SceneConfig::default()
        };
        let budget = cfg.points_per_object_base as f64;
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..50 {
            let s = generate_scene(&cfg, seed).unwrap();
            for (b, v) in s.gt_boxes.iter().zip(&s.visibility) {
                let k = points_in(&s, b);
                assert_eq!(k as f32 / budget as f32, *v);
                assert!((k as f64) < 0.5 * budget, "seed {seed}: {k}");
                total += k as f64;
                n += 1;
            }
        }
        let mean = total / n as f64 / budget;
        assert!((mean - OCCLUDED_KEEP_MAX / 2.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn many_objects_are_parked_in_pairs() {
        let cfg = SceneConfig::default();
        let (mut paired, mut total) = (0, 0);
        for seed in 0..200 {
            let s = generate_scene(&cfg, seed).unwrap();
            for (i, a) in s.gt_boxes.iter().enumerate() {
                total += 1;
                let close = s.gt_boxes.iter().enumerate().any(|(j, b)| {
                    j != i
                        && (a.cx - b.cx).abs() <= PAIR_SHIFT + 1e-6
                        && (a.cy - b.cy).abs()
                            <= (a.w + b.w) / 2.0 + OBJECT_GAP + 0.05 + PAIR_SPACING + 1e-6
                });
                paired += usize::from(close);
            }
        }
        let frac = paired as f64 / total as f64;
        assert!(frac > 0.3 && frac < 0.9, "{frac}");
    }

    #[test]
    fn degenerate_bounds_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.bounds.x_max = cfg.bounds.x_min;
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
        let cfg = SceneConfig {
            occlusion_prob: 1.5,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn dataset_cardinality_determinism_and_counts() {
        let cfg = SceneConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_dataset(&cfg, 3, 100, a.path()).unwrap();
        let ib = generate_dataset(&cfg, 3, 100, b.path()).unwrap();
        assert_eq!(ia.len(), 3);
        assert_eq!(ia, ib);
        assert_eq!(read_index(a.path()).unwrap(), ia);
        for (i, e) in ia.iter().enumerate() {
            assert_eq!(e.seed, 100 + i as u64);
            let s = read_scene(&scene_dir(a.path(), e)).unwrap();
            assert_eq!(s.gt_boxes.len(), e.n_boxes);
            let again = read_scene(&scene_dir(b.path(), &ib[i])).unwrap();
            assert_eq!(s, again);
            let fresh = generate_scene(&cfg, e.seed).unwrap();
            assert_eq!(s.points, fresh.points);
            assert_eq!(s.gt_boxes, fresh.gt_boxes);
        }
    }

    #[test]
    fn empty_scene_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = PointCloudScene {
            scene_id: "x".into(),
            seed: 1,
            points: vec![],
            gt_boxes: vec![],
            visibility: vec![],
        };
        write_scene(&s, dir.path()).unwrap();
        assert_eq!(read_scene(dir.path()).unwrap(), s);
    }
}

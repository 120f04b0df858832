//! PNG rendering for heatmaps and confidence distributions.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use introspect_nn::Tensor;

use super::metrics::{Bucket, ConfidenceBuckets};
use crate::error::{Error, Result};

fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Store(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Store(format!("{}: {e}", path.display())))
}

/// Blue-to-yellow-to-red ramp for values in `[0, 1]`.
fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v * 2.0;
        (t, t, 1.0 - t)
    } else {
        let t = (v - 0.5) * 2.0;
        (1.0, 1.0 - t, 0.0)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Renders an `H x W` map in `[0, 1]`, each cell `scale x scale` pixels.
/// When `background` (same size, any range) is given, it is shown in grey
/// and the heatmap is blended over it.
pub fn heatmap_png(
    path: &Path,
    map: &Tensor,
    background: Option<&Tensor>,
    scale: usize,
) -> Result<()> {
    let (h, w) = map.dims2();
    let scale = scale.max(1);
    let bg: Option<Vec<f32>> = background.map(|b| {
        let hi = b.data().iter().copied().fold(0.0f32, f32::max);
        b.data()
            .iter()
            .map(|v| if hi > 0.0 { v / hi } else { 0.0 })
            .collect()
    });
    let (pw, ph) = (w * scale, h * scale);
    let mut rgb = vec![0u8; pw * ph * 3];
    for y in 0..ph {
        for x in 0..pw {
            let i = (y / scale) * w + x / scale;
            let mut c = colormap(map.data()[i]);
            if let Some(bg) = &bg {
                let g = bg[i] * 255.0;
                for ch in &mut c {
                    *ch = (0.6 * *ch as f32 + 0.4 * g) as u8;
                }
            }
            rgb[(y * pw + x) * 3..(y * pw + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    write_rgb(path, pw, ph, &rgb)
}

/// Violin-style plot: one column per bucket, confidence `0.5..1` on the
/// vertical axis, width proportional to a histogram density.
pub fn confidence_png(path: &Path, buckets: &ConfidenceBuckets) -> Result<()> {
    const COL: usize = 120;
    const H: usize = 200;
    const BINS: usize = 25;
    let colours = [
        [200u8, 60, 60],
        [230, 150, 40],
        [60, 90, 200],
        [60, 160, 80],
    ];
    let width = COL * Bucket::ALL.len();
    let mut rgb = vec![255u8; width * H * 3];
    for (bi, bucket) in Bucket::ALL.iter().enumerate() {
        let vals = buckets.values(*bucket);
        let mut hist = [0usize; BINS];
        for v in &vals {
            let b = (((v - 0.5) / 0.5) * BINS as f64)
                .floor()
                .clamp(0.0, (BINS - 1) as f64) as usize;
            hist[b] += 1;
        }
        let peak = hist.iter().copied().max().unwrap_or(0).max(1);
        for y in 0..H {
            let bin = ((H - 1 - y) * BINS) / H;
            let half = (hist[bin] * (COL / 2 - 6)) / peak;
            let centre = bi * COL + COL / 2;
            for x in centre - half..=centre + half {
                let o = (y * width + x) * 3;
                rgb[o..o + 3].copy_from_slice(&colours[bi]);
            }
        }
    }
    write_rgb(path, width, H, &rgb)
}

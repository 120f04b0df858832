use introspect_nn::Tensor;

use crate::error::{Error, Result};
use crate::introspector::Introspector;
use crate::naps::NapTensor;

const POWER_ITERS: usize = 1000;

/// Eigen-CAM of a `C x H x W` activation map at `H x W`.
///
/// The map is viewed as an `(H*W) x C` matrix `A` (no centering). Its
/// projection onto the first right singular vector, with the sign chosen so
/// that the projection's mean is non-negative, is min-max normalised.
/// All-zero activations give an all-zero map; other spatially constant
/// activations give an all-one map.
pub fn eigen_cam_map(act: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *act.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "Eigen-CAM needs C x H x W activations, got {s:?}"
            )))
        }
    };
    let hw = h * w;
    let a = act.data();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(Tensor::zeros(&[h, w]));
    }
    // Gram matrix A^T A (C x C) in f64.
    let mut gram = vec![0.0f64; c * c];
    for i in 0..c {
        let ri = &a[i * hw..(i + 1) * hw];
        for j in i..c {
            let rj = &a[j * hw..(j + 1) * hw];
            let s: f64 = ri.iter().zip(rj).map(|(&x, &y)| x as f64 * y as f64).sum();
            gram[i * c + j] = s;
            gram[j * c + i] = s;
        }
    }
    let v = top_eigenvector(&gram, c);
    let mut scores: Vec<f64> = (0..hw)
        .map(|p| (0..c).map(|ch| a[ch * hw + p] as f64 * v[ch]).sum())
        .collect();
    if scores.iter().sum::<f64>() < 0.0 {
        scores.iter_mut().for_each(|s| *s = -*s);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs());
    let data = if hi - lo <= 1e-12 * scale {
        vec![1.0; hw]
    } else {
        scores
            .iter()
            .map(|s| ((s - lo) / (hi - lo)) as f32)
            .collect()
    };
    Ok(Tensor::from_vec(&[h, w], data))
}

/// Dominant eigenvector of a symmetric positive semi-definite matrix by
/// power iteration from a deterministic start.
fn top_eigenvector(m: &[f64], n: usize) -> Vec<f64> {
    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum())
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Start from the column with the largest diagonal plus a uniform component.
    let k = (0..n)
        .max_by(|&a, &b| m[a * n + a].total_cmp(&m[b * n + b]))
        .unwrap_or(0);
    let mut v: Vec<f64> = (0..n).map(|j| m[j * n + k] + 1e-3 * m[k * n + k]).collect();
    let nv = norm(&v);
    if nv == 0.0 {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        return e;
    }
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..POWER_ITERS {
        let mut next = matvec(&v);
        let nn = norm(&next);
        if nn == 0.0 {
            break;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < 1e-13 {
            break;
        }
    }
    v
}

/// Bilinear resampling of an `H x W` map (half-pixel centres, edge clamped).
pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = map.dims2();
    let src = map.data();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let v = |y: usize, x: usize| src[y * w + x] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Index of the stage used for Eigen-CAM: the deepest residual stage whose
/// output still has at least 2x2 spatial cells (the last stage otherwise).
pub fn cam_stage(stage_shapes: &[Vec<usize>]) -> usize {
    stage_shapes
        .iter()
        .rposition(|s| s[s.len() - 2] >= 2 && s[s.len() - 1] >= 2)
        .unwrap_or(stage_shapes.len() - 1)
}

/// Heatmap for one NAP input, resampled to the input's spatial size.
/// Returns the heatmap and the index of the stage it was computed from.
pub fn eigen_cam(model: &Introspector, nap: &NapTensor) -> Result<(Tensor, usize)> {
    let net = model.resnet().ok_or_else(|| {
        Error::Invalid(format!(
            "{} introspector has no convolutional stages",
            nap.mode
        ))
    })?;
    let (c, h, w) = match *nap.data.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("expected C x H x W NAP, got {s:?}"))),
    };
    if c != net.in_channels() {
        return Err(Error::Shape(format!(
            "NAP has {c} channels, model expects {}",
            net.in_channels()
        )));
    }
    let (_, stages) = net.infer_with_stages(&nap.data.clone().reshape(&[1, c, h, w]));
    let shapes: Vec<Vec<usize>> = stages.iter().map(|s| s.shape().to_vec()).collect();
    let idx = cam_stage(&shapes);
    let act = stages[idx].clone();
    let s = act.shape()[1..].to_vec();
    let map = eigen_cam_map(&act.reshape(&s))?;
    Ok((resize_bilinear(&map, h, w), idx))
}

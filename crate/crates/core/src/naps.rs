//! Neural activation pattern operators: which tapped tensor(s) the
//! introspector sees, and how they are transformed first.

use std::fmt;
use std::str::FromStr;

use introspect_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::detector::ActivationBundle;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NapMode {
    #[serde(rename = "PPC")]
    Ppc,
    #[serde(rename = "MLA")]
    Mla,
    #[serde(rename = "LLA")]
    Lla,
    #[serde(rename = "CONCAT")]
    Concat,
    #[serde(rename = "SF")]
    Sf,
}

impl NapMode {
    pub const ALL: [NapMode; 5] = [
        NapMode::Ppc,
        NapMode::Mla,
        NapMode::Lla,
        NapMode::Concat,
        NapMode::Sf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NapMode::Ppc => "PPC",
            NapMode::Mla => "MLA",
            NapMode::Lla => "LLA",
            NapMode::Concat => "CONCAT",
            NapMode::Sf => "SF",
        }
    }

    /// Whether the mode yields a `C x H x W` map (as opposed to a vector).
    pub fn is_spatial(&self) -> bool {
        !matches!(self, NapMode::Sf)
    }

    /// Input shape the introspector sees for this mode, given the tap shapes.
    pub fn input_shape(&self, ppc: [usize; 3], mla: [usize; 3], lla: [usize; 3]) -> Vec<usize> {
        match self {
            NapMode::Ppc => ppc.to_vec(),
            NapMode::Mla => mla.to_vec(),
            NapMode::Lla => lla.to_vec(),
            NapMode::Concat => vec![ppc[0] + mla[0] + lla[0], lla[1], lla[2]],
            NapMode::Sf => vec![3 * lla[0]],
        }
    }
}

impl fmt::Display for NapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NapMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown NAP mode `{s}` (expected PPC, MLA, LLA, CONCAT or SF)"
                ))
            })
    }
}

/// Introspector input for one frame: a `C x H x W` map, or a flat vector
/// for [`NapMode::Sf`].
#[derive(Clone, Debug, PartialEq)]
pub struct NapTensor {
    pub data: Tensor,
    pub mode: NapMode,
    pub source_frame: String,
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!(
            "expected a C x H x W map, got shape {s:?}"
        ))),
    }
}

/// Averages each output cell over input rows
/// `[floor(i*H/oh), ceil((i+1)*H/oh))` and the matching column range.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x)?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Shape(format!(
            "cannot pool {h}x{w} to {out_h}x{out_w}: output must be non-empty and no larger than the input"
        )));
    }
    let rows: Vec<(usize, usize)> = (0..out_h)
        .map(|i| (i * h / out_h, ((i + 1) * h).div_ceil(out_h)))
        .collect();
    let cols: Vec<(usize, usize)> = (0..out_w)
        .map(|j| (j * w / out_w, ((j + 1) * w).div_ceil(out_w)))
        .collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = 0.0f64;
                for r in r0..r1 {
                    acc += plane[r * w + c0..r * w + c1]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                out.push((acc / ((r1 - r0) * (c1 - c0)) as f64) as f32);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, out_h, out_w], out))
}

/// Pools PPC and MLA to the LLA spatial size and stacks `[ppc, mla, lla]`
/// along channels.
pub fn concat_nap(bundle: &ActivationBundle) -> Result<NapTensor> {
    let (_, lh, lw) = dims3(&bundle.lla)?;
    let (_, mh, mw) = dims3(&bundle.mla)?;
    let (_, ph, pw) = dims3(&bundle.ppc)?;
    if mh < lh || mw < lw || ph < mh || pw < mw {
        return Err(Error::Shape(format!(
            "frame {}: spatial sizes must not increase PPC -> MLA -> LLA (got {ph}x{pw}, {mh}x{mw}, {lh}x{lw})",
            bundle.frame_id
        )));
    }
    let ppc = adaptive_avg_pool(&bundle.ppc, lh, lw)?;
    let mla = adaptive_avg_pool(&bundle.mla, lh, lw)?;
    let channels = ppc.shape()[0] + mla.shape()[0] + bundle.lla.shape()[0];
    let mut data = Vec::with_capacity(channels * lh * lw);
    data.extend_from_slice(ppc.data());
    data.extend_from_slice(mla.data());
    data.extend_from_slice(bundle.lla.data());
    Ok(NapTensor {
        data: Tensor::from_vec(&[channels, lh, lw], data),
        mode: NapMode::Concat,
        source_frame: bundle.frame_id.clone(),
    })
}

/// Per-channel spatial mean, max and population standard deviation,
/// laid out as `[means | maxes | stds]`.
pub fn statistical_features(x: &Tensor) -> Result<Vec<f32>> {
    let (c, h, w) = dims3(x)?;
    if h * w == 0 {
        return Err(Error::Shape(
            "statistical features need a non-empty spatial map".into(),
        ));
    }
    let n = (h * w) as f64;
    let mut means = Vec::with_capacity(c);
    let mut maxes = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for plane in x.data().chunks_exact(h * w) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        means.push(mean as f32);
        maxes.push(plane.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        stds.push(var.sqrt() as f32);
    }
    means.extend(maxes);
    means.extend(stds);
    Ok(means)
}

pub fn select_nap(bundle: &ActivationBundle, mode: NapMode) -> Result<NapTensor> {
    let data = match mode {
        NapMode::Ppc => bundle.ppc.clone(),
        NapMode::Mla => bundle.mla.clone(),
        NapMode::Lla => bundle.lla.clone(),
        NapMode::Concat => return concat_nap(bundle),
        NapMode::Sf => {
            let v = statistical_features(&bundle.lla)?;
            Tensor::from_vec(&[v.len()], v)
        }
    };
    Ok(NapTensor {
        data,
        mode,
        source_frame: bundle.frame_id.clone(),
    })
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Zeroes every entry strictly below the `p`-th percentile of the whole
/// map. Returns the new map and the fraction of entries whose value changed.
pub fn percentile_zeroing(x: &Tensor, p: f64) -> Result<(Tensor, f64)> {
    if !(0.0..100.0).contains(&p) {
        return Err(Error::Invalid(format!("percentile {p} outside [0, 100)")));
    }
    if x.numel() == 0 {
        return Ok((x.clone(), 0.0));
    }
    let threshold = percentile(x.data(), p);
    let mut out = x.clone();
    let mut changed = 0usize;
    for v in out.data_mut() {
        if (*v as f64) < threshold {
            if *v != 0.0 {
                changed += 1;
            }
            *v = 0.0;
        }
    }
    Ok((out, changed as f64 / x.numel() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use introspect_nn::Rng64;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f32) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(f).collect())
    }

    fn bundle(c: [usize; 3], s: [usize; 3], seed: u64) -> ActivationBundle {
        let mut rng = Rng64::new(seed);
        let mut t = |c: usize, s: usize| map(c, s, s, |_| rng.normal() as f32);
        ActivationBundle {
            ppc: t(c[0], s[0]),
            mla: t(c[1], s[1]),
            lla: t(c[2], s[2]),
            frame_id: "f".into(),
        }
    }

    #[test]
    fn pool_constant_field() {
        let y = adaptive_avg_pool(&map(1, 4, 4, |_| 1.0), 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn pool_quadrant_means() {
        let y = adaptive_avg_pool(&map(1, 4, 4, |i| (i + 1) as f32), 2, 2).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pool_identity_and_errors() {
        let x = map(2, 3, 5, |i| i as f32 * 0.3 - 1.0);
        assert_eq!(adaptive_avg_pool(&x, 3, 5).unwrap(), x);
        assert!(adaptive_avg_pool(&x, 0, 2).is_err());
        assert!(adaptive_avg_pool(&x, 4, 5).is_err());
    }

    #[test]
    fn pool_uneven_bins_overlap() {
        // H = 5 -> 2 rows: [0, 3) and [2, 5).
        let x = map(1, 5, 1, |i| i as f32);
        let y = adaptive_avg_pool(&x, 2, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn concat_shape_and_slices() {
        let b = bundle([8, 128, 256], [64, 32, 16], 1);
        let n = concat_nap(&b).unwrap();
        assert_eq!(n.data.shape(), &[392, 16, 16]);
        assert_eq!(n.mode, NapMode::Concat);
        let per = 16 * 16;
        assert_eq!(&n.data.data()[(8 + 128) * per..], b.lla.data());
        let ppc = adaptive_avg_pool(&b.ppc, 16, 16).unwrap();
        assert_eq!(&n.data.data()[..8 * per], ppc.data());
        let mla = adaptive_avg_pool(&b.mla, 16, 16).unwrap();
        assert_eq!(&n.data.data()[8 * per..136 * per], mla.data());
    }

    #[test]
    fn concat_rejects_growing_maps() {
        let b = bundle([2, 2, 2], [4, 8, 2], 2);
        assert!(matches!(concat_nap(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn select_modes() {
        let b = bundle([8, 128, 256], [16, 8, 4], 3);
        assert_eq!(select_nap(&b, NapMode::Lla).unwrap().data, b.lla);
        assert_eq!(select_nap(&b, NapMode::Ppc).unwrap().data, b.ppc);
        assert_eq!(
            select_nap(&b, NapMode::Concat).unwrap().data.shape(),
            &[392, 4, 4]
        );
        assert_eq!(
            select_nap(&b, NapMode::Sf).unwrap().data.shape(),
            &[3 * 256]
        );
    }

    #[test]
    fn mode_strings() {
        for m in NapMode::ALL {
            assert_eq!(m.as_str().parse::<NapMode>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.as_str())
            );
        }
        assert!("lla".parse::<NapMode>().is_err());
    }

    #[test]
    fn stats_examples() {
        let f = statistical_features(&map(1, 2, 2, |_| 3.0)).unwrap();
        assert_eq!(f, vec![3.0, 3.0, 0.0]);
        let f = statistical_features(&map(1, 2, 2, |i| (i + 1) as f32)).unwrap();
        assert_eq!(f[0], 2.5);
        assert_eq!(f[1], 4.0);
        assert!((f[2] as f64 - 1.25f64.sqrt()).abs() < 1e-6);
        assert_eq!(
            statistical_features(&map(2, 3, 3, |i| i as f32))
                .unwrap()
                .len(),
            6
        );
    }

    #[test]
    fn zeroing_examples() {
        let x = map(1, 10, 10, |i| (i + 1) as f32);
        let (y, frac) = percentile_zeroing(&x, 0.0).unwrap();
        assert_eq!((y, frac), (x.clone(), 0.0));

        // Linear interpolation puts the 50th percentile of 1..=100 at 50.5.
        let (y, frac) = percentile_zeroing(&x, 50.0).unwrap();
        let sorted_oracle = {
            let mut v: Vec<f32> = x.data().to_vec();
            v.sort_by(f32::total_cmp);
            (v[49] + v[50]) / 2.0
        };
        assert_eq!(sorted_oracle, 50.5);
        for (i, v) in y.data().iter().enumerate() {
            let orig = (i + 1) as f32;
            assert_eq!(*v, if orig < sorted_oracle { 0.0 } else { orig });
        }
        assert_eq!(frac, 0.5);

        let sparse = map(
            1,
            10,
            10,
            |i| if i % 10 == 0 { 1.0 + i as f32 } else { 0.0 },
        );
        let (y, frac) = percentile_zeroing(&sparse, 65.0).unwrap();
        assert_eq!(y, sparse);
        assert_eq!(frac, 0.0);
        assert!(percentile_zeroing(&sparse, 100.0).is_err());
    }

    fn nonneg_sparse() -> impl Strategy<Value = (Vec<f32>, f64)> {
        (
            prop::collection::vec(0.0f32..10.0, 8..64),
            prop::collection::vec(any::<bool>(), 64),
            0.0f64..99.0,
        )
            .prop_map(|(mut v, keep, p)| {
                for (x, k) in v.iter_mut().zip(keep) {
                    if !k {
                        *x = 0.0;
                    }
                }
                (v, p)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn pooling_preserves_mean_on_exact_division(vals in prop::collection::vec(-5.0f32..5.0, 2 * 8 * 12)) {
            let x = Tensor::from_vec(&[2, 8, 12], vals);
            let y = adaptive_avg_pool(&x, 4, 3).unwrap();
            let mx: f64 = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64;
            let my: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / y.numel() as f64;
            prop_assert!((mx - my).abs() < 1e-5);
        }

        #[test]
        fn concat_is_linear(a in 0u64..1000, s in -3.0f32..3.0) {
            let x = bundle([2, 3, 4], [8, 4, 2], a);
            let y = bundle([2, 3, 4], [8, 4, 2], a + 1);
            let comb = ActivationBundle {
                ppc: map(2, 8, 8, |i| x.ppc.data()[i] + s * y.ppc.data()[i]),
                mla: map(3, 4, 4, |i| x.mla.data()[i] + s * y.mla.data()[i]),
                lla: map(4, 2, 2, |i| x.lla.data()[i] + s * y.lla.data()[i]),
                frame_id: "f".into(),
            };
            let cx = concat_nap(&x).unwrap().data;
            let cy = concat_nap(&y).unwrap().data;
            let cc = concat_nap(&comb).unwrap().data;
            for i in 0..cc.numel() {
                prop_assert!((cc.data()[i] - (cx.data()[i] + s * cy.data()[i])).abs() < 1e-4);
            }
        }

        #[test]
        fn stats_invariant_to_spatial_permutation(vals in prop::collection::vec(-5.0f32..5.0, 12), seed in 0u64..1000) {
            let x = Tensor::from_vec(&[1, 3, 4], vals.clone());
            let mut perm = vals;
            Rng64::new(seed).shuffle(&mut perm);
            let y = Tensor::from_vec(&[1, 3, 4], perm);
            let fx = statistical_features(&x).unwrap();
            let fy = statistical_features(&y).unwrap();
            for (a, b) in fx.iter().zip(&fy) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn zeroing_idempotent((vals, p) in nonneg_sparse()) {
            let x = Tensor::from_vec(&[1, 1, vals.len()], vals);
            let (once, _) = percentile_zeroing(&x, p).unwrap();
            let (twice, frac) = percentile_zeroing(&once, p).unwrap();
            prop_assert_eq!(once, twice);
            prop_assert_eq!(frac, 0.0);
        }

        #[test]
        fn zeroing_noop_when_sparse_enough((vals, p) in nonneg_sparse()) {
            let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
            prop_assume!(zeros >= p / 100.0);
            let x = Tensor::from_vec(&[1, 1, vals.len()], vals);
            let (y, frac) = percentile_zeroing(&x, p).unwrap();
            prop_assert_eq!(frac, 0.0);
            prop_assert_eq!(y, x);
        }
    }
}

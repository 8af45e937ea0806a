//! Latent-update objective.
//!
//! Three terms drive the update of the inversion latent at the update step:
//!
//! * object information infusion: `L_in = 1 − mean(top-k in-box scores)` plus
//!   `L_out = mean(out-of-box scores)` on the raw object-token heatmap;
//! * source inpainting: mean L1 between the updated latent's features on the
//!   source cells and the original latent's edge features, aligned by
//!   repeat-and-truncate;
//! * background preservation: mean L1 between updated and original features
//!   on the background cells.
//!
//! All terms are scalar tensors attached to the latent's autograd graph.

use std::io::Write;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, LatentTensor};
use crate::config::ObjectiveConfig;
use crate::error::{Error, Result};
use crate::regions::{BinaryMask, RegionMasks};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_oii: f64,
    pub lambda_sai: f64,
    pub lambda_bg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_oii: 0.5,
            lambda_sai: 0.25,
            lambda_bg: 0.25,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_oii: f64, lambda_sai: f64, lambda_bg: f64) -> Result<Self> {
        let w = Self {
            lambda_oii,
            lambda_sai,
            lambda_bg,
        };
        if [lambda_oii, lambda_sai, lambda_bg]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invalid("lambda", "weights must be finite and >= 0"));
        }
        if lambda_oii + lambda_sai + lambda_bg == 0.0 {
            return Err(Error::invalid("lambda", "weights must not all be zero"));
        }
        Ok(w)
    }

    pub fn from_config(c: &ObjectiveConfig) -> Result<Self> {
        Self::new(c.lambda_oii, c.lambda_sai, c.lambda_bg)
    }
}

/// Step-size schedule of the inner update loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    pub alpha0: f64,
    pub iterations: usize,
    /// 1-based inversion step at which the update runs.
    pub update_step_index: usize,
}

impl UpdateSchedule {
    pub fn new(alpha0: f64, iterations: usize, update_step_index: usize, num_steps: usize) -> Result<Self> {
        if !(alpha0.is_finite() && alpha0 > 0.0) {
            return Err(Error::invalid("alpha0", "must be > 0"));
        }
        if iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if update_step_index == 0 || update_step_index > num_steps {
            return Err(Error::invalid(
                "update_step_index",
                format!("must lie in [1, {num_steps}]"),
            ));
        }
        Ok(Self {
            alpha0,
            iterations,
            update_step_index,
        })
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_in: f64,
    pub l_out: f64,
    pub l_oii: f64,
    pub l_sai: f64,
    pub l_bg: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Combines component values with the given weights.
    pub fn from_components(l_in: f64, l_out: f64, l_sai: f64, l_bg: f64, weights: &LossWeights) -> Self {
        let l_oii = l_in + l_out;
        Self {
            l_in,
            l_out,
            l_oii,
            l_sai,
            l_bg,
            l_total: weights.lambda_oii * l_oii + weights.lambda_sai * l_sai + weights.lambda_bg * l_bg,
        }
    }

    /// Verifies the sum identities and value ranges.
    pub fn check(&self, weights: &LossWeights) -> Result<()> {
        let values = [self.l_in, self.l_out, self.l_oii, self.l_sai, self.l_bg, self.l_total];
        let bad = |m: String| Err(Error::invalid("loss_breakdown", m));
        if values.iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite loss {values:?}"));
        }
        let tol = 1e-6 * self.l_total.abs().max(1.0);
        if (self.l_oii - (self.l_in + self.l_out)).abs() > tol {
            return bad(format!("l_oii {} != l_in + l_out {}", self.l_oii, self.l_in + self.l_out));
        }
        let recomputed = weights.lambda_oii * self.l_oii
            + weights.lambda_sai * self.l_sai
            + weights.lambda_bg * self.l_bg;
        if (self.l_total - recomputed).abs() > tol {
            return bad(format!("l_total {} != weighted sum {recomputed}", self.l_total));
        }
        let range_tol = 1e-6;
        if !(-range_tol..=1.0 + range_tol).contains(&self.l_in)
            || !(-range_tol..=1.0 + range_tol).contains(&self.l_out)
        {
            return bad(format!("l_in {} or l_out {} outside [0, 1]", self.l_in, self.l_out));
        }
        if self.l_sai < 0.0 || self.l_bg < 0.0 {
            return bad("negative L1 term".into());
        }
        Ok(())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.reshape(())?.to_scalar::<f64>()?)
}

fn flat_values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn gather(flat: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let idx = Tensor::from_iter(indices.iter().map(|&i| i as u32), flat.device())?;
    Ok(flat.index_select(&idx, 0)?)
}

fn check_grid(heatmap: &Tensor, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.resolution();
    if heatmap.dims() != [h, w] {
        return Err(Error::DimensionMismatch(format!(
            "heatmap {:?} vs mask {h}x{w}",
            heatmap.dims()
        )));
    }
    Ok(())
}

/// Default top-k: a quarter of the target cells, rounded up, at least one.
pub fn default_k(target_cells: usize) -> usize {
    ((0.25 * target_cells as f64).ceil() as usize).max(1)
}

/// Flat indices of the `k` largest in-target values (ties broken by lower index).
pub fn top_k_target_indices(values: &[f64], target: &BinaryMask, k: usize) -> Result<Vec<usize>> {
    let mut cells = target.indices();
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    if k > cells.len() {
        return Err(Error::invalid(
            "k",
            format!("k = {k} exceeds the {} target cells", cells.len()),
        ));
    }
    cells.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    cells.truncate(k);
    Ok(cells)
}

/// `1 − mean of the k largest heatmap values inside the target`.
///
/// The top-k index set is chosen at the current values; gradients flow
/// through the selected entries only.
pub fn loss_in(heatmap_raw: &Tensor, target: &BinaryMask, k: usize) -> Result<Tensor> {
    check_grid(heatmap_raw, target)?;
    let flat = heatmap_raw.flatten_all()?;
    let top = top_k_target_indices(&flat_values(&flat)?, target, k)?;
    let mean = gather(&flat, &top)?.mean(0)?;
    Ok(mean.affine(-1.0, 1.0)?)
}

/// Mean heatmap value over the cells outside the target.
pub fn loss_out(heatmap_raw: &Tensor, target: &BinaryMask) -> Result<Tensor> {
    check_grid(heatmap_raw, target)?;
    let outside = target.not().indices();
    if outside.is_empty() {
        return Err(Error::invalid("target", "covers the whole grid; no cells outside it"));
    }
    Ok(gather(&heatmap_raw.flatten_all()?, &outside)?.mean(0)?)
}

/// `L_in + L_out`, returned with its two components.
pub fn loss_oii(heatmap_raw: &Tensor, target: &BinaryMask, k: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let l_in = loss_in(heatmap_raw, target, k)?;
    let l_out = loss_out(heatmap_raw, target)?;
    let total = (&l_in + &l_out)?;
    Ok((total, l_in, l_out))
}

/// Repeat-and-truncate: cycles `edge_features` in order until `count` items.
pub fn rat_align<T: Clone>(edge_features: &[T], count: usize) -> Result<Vec<T>> {
    if edge_features.is_empty() {
        return Err(Error::invalid("edge_features", "must not be empty"));
    }
    Ok(edge_features.iter().cycle().take(count).cloned().collect())
}

/// `(positions, channels)` view of a `(channels, H, W)` feature map.
fn feature_rows(f: &FeatureMap) -> Result<Tensor> {
    let (c, h, w) = f.data.dims3()?;
    Ok(f.data.reshape((c, h * w))?.t()?.contiguous()?)
}

fn check_features(a: &FeatureMap, b: &FeatureMap, masks: &[&BinaryMask]) -> Result<()> {
    if a.data.dims() != b.data.dims() {
        return Err(Error::DimensionMismatch(format!(
            "feature maps {:?} vs {:?}",
            a.data.dims(),
            b.data.dims()
        )));
    }
    let res = a.resolution();
    if let Some(m) = masks.iter().find(|m| m.resolution() != res) {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs features {res:?}",
            m.resolution()
        )));
    }
    Ok(())
}

fn zero_like(f: &FeatureMap) -> Result<Tensor> {
    Ok(Tensor::zeros((), f.data.dtype(), f.data.device())?)
}

/// Mean absolute value whose subgradient at 0 is 0.
fn l1_mean(diff: &Tensor) -> Result<Tensor> {
    let sign = diff.sign()?.detach();
    Ok((diff * sign)?.mean_all()?)
}

/// Mean L1 between updated source-cell features and RAT-aligned original edge features.
///
/// Cells are visited in raster-scan order. An empty source gives 0.
pub fn loss_sai(
    feat_updated: &FeatureMap,
    feat_original: &FeatureMap,
    source: &BinaryMask,
    edge: &BinaryMask,
) -> Result<Tensor> {
    check_features(feat_updated, feat_original, &[source, edge])?;
    if source.is_empty() {
        return zero_like(feat_updated);
    }
    let edge_cells = edge.indices();
    if edge_cells.is_empty() {
        return Err(Error::EmptyEdgeRing(
            "source area is non-empty but has no surrounding edge cells".into(),
        ));
    }
    let src = gather(&feature_rows(feat_updated)?, &source.indices())?;
    let aligned = rat_align(&edge_cells, source.count())?;
    let edge_feats = gather(&feature_rows(feat_original)?.detach(), &aligned)?;
    l1_mean(&(src - edge_feats)?)
}

/// Mean L1 between updated and original features over background cells; 0 if none.
pub fn loss_bg(feat_updated: &FeatureMap, feat_original: &FeatureMap, background: &BinaryMask) -> Result<Tensor> {
    check_features(feat_updated, feat_original, &[background])?;
    if background.is_empty() {
        return zero_like(feat_updated);
    }
    let cells = background.indices();
    let a = gather(&feature_rows(feat_updated)?, &cells)?;
    let b = gather(&feature_rows(feat_original)?.detach(), &cells)?;
    l1_mean(&(a - b)?)
}

/// Everything one objective evaluation needs.
pub struct LossInputs<'a> {
    /// Raw object-token heatmap at attention resolution.
    pub heatmap_raw: &'a Tensor,
    /// Masks at attention resolution.
    pub masks: &'a RegionMasks,
    /// Masks at feature resolution.
    pub feature_masks: &'a RegionMasks,
    pub k: usize,
    pub feat_updated: &'a FeatureMap,
    pub feat_original: &'a FeatureMap,
}

/// Scalar loss tensors of one evaluation, attached to the latent's graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_in: Tensor,
    pub l_out: Tensor,
    pub l_oii: Tensor,
    pub l_sai: Tensor,
    pub l_bg: Tensor,
    pub l_total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Which scalar of [`LossTerms`] to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    In,
    Out,
    Oii,
    Sai,
    Bg,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::In,
        LossTerm::Out,
        LossTerm::Oii,
        LossTerm::Sai,
        LossTerm::Bg,
        LossTerm::Total,
    ];
}

impl LossTerms {
    pub fn get(&self, term: LossTerm) -> &Tensor {
        match term {
            LossTerm::In => &self.l_in,
            LossTerm::Out => &self.l_out,
            LossTerm::Oii => &self.l_oii,
            LossTerm::Sai => &self.l_sai,
            LossTerm::Bg => &self.l_bg,
            LossTerm::Total => &self.l_total,
        }
    }
}

/// Weighted total and its components.
///
/// A target covering the whole grid has no outside cells; `l_out` is then 0.
pub fn loss_inv(inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossTerms> {
    let (oii, l_in, l_out) = if inputs.masks.target.is_full() {
        let l_in = loss_in(inputs.heatmap_raw, &inputs.masks.target, inputs.k)?;
        let l_out = l_in.zeros_like()?;
        (l_in.clone(), l_in, l_out)
    } else {
        loss_oii(inputs.heatmap_raw, &inputs.masks.target, inputs.k)?
    };
    let dtype = oii.dtype();
    let sai = loss_sai(
        inputs.feat_updated,
        inputs.feat_original,
        &inputs.feature_masks.source,
        &inputs.feature_masks.edge,
    )?
    .to_dtype(dtype)?;
    let bg = loss_bg(
        inputs.feat_updated,
        inputs.feat_original,
        &inputs.feature_masks.background,
    )?
    .to_dtype(dtype)?;
    let total = ((oii.affine(weights.lambda_oii, 0.0)? + sai.affine(weights.lambda_sai, 0.0)?)?
        + bg.affine(weights.lambda_bg, 0.0)?)?;
    let breakdown = LossBreakdown {
        l_in: scalar(&l_in)?,
        l_out: scalar(&l_out)?,
        l_oii: scalar(&oii)?,
        l_sai: scalar(&sai)?,
        l_bg: scalar(&bg)?,
        l_total: scalar(&total)?,
    };
    breakdown.check(weights)?;
    Ok(LossTerms {
        l_in,
        l_out,
        l_oii: oii,
        l_sai: sai,
        l_bg: bg,
        l_total: total,
        breakdown,
    })
}

/// Linearly decaying step: `α₀ · (I − i) / I`.
pub fn step_size(iteration: usize, schedule: &UpdateSchedule) -> Result<f64> {
    if iteration >= schedule.iterations {
        return Err(Error::invalid(
            "iteration",
            format!("{iteration} outside [0, {})", schedule.iterations),
        ));
    }
    let n = schedule.iterations as f64;
    Ok(schedule.alpha0 * (n - iteration as f64) / n)
}

/// `z − α · grad`, keeping the step tag. A non-finite gradient aborts.
pub fn latent_gradient_step(z: &LatentTensor, grad: &Tensor, alpha: f64) -> Result<LatentTensor> {
    if grad.dims() != z.data.dims() {
        return Err(Error::DimensionMismatch(format!(
            "gradient {:?} vs latent {:?}",
            grad.dims(),
            z.data.dims()
        )));
    }
    let values = flat_values(grad)?;
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            iteration: 0,
            detail: format!("gradient entry {pos} is {}", values[pos]),
        });
    }
    let grad = grad.to_dtype(z.data.dtype())?;
    let data = (z.data.detach() - (grad * alpha)?)?;
    Ok(LatentTensor::new(data, z.step_tag))
}

/// One row of the per-iteration loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub iteration: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub alpha_i: f64,
}

pub const LOSS_LOG_HEADER: &str = "iteration,l_in,l_out,l_oii,l_sai,l_bg,l_total,alpha_i";

/// Writes the loss log as comma-separated text with a header line.
pub fn write_loss_log(mut out: impl Write, rows: &[LossLogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        let l = &r.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration, l.l_in, l.l_out, l.l_oii, l.l_sai, l.l_bg, l.l_total, r.alpha_i
        )?;
    }
    Ok(())
}

/// Parses a loss log written by [`write_loss_log`].
pub fn parse_loss_log(text: &str) -> Result<Vec<LossLogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LOSS_LOG_HEADER => {}
        _ => return Err(Error::invalid("loss_log", "missing header")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::invalid("loss_log", format!("row {} has {} fields", n + 1, f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("loss_log", format!("row {}: bad number `{}`", n + 1, f[i])))
            };
            Ok(LossLogRow {
                iteration: f[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid("loss_log", format!("row {}: bad iteration", n + 1)))?,
                losses: LossBreakdown {
                    l_in: num(1)?,
                    l_out: num(2)?,
                    l_oii: num(3)?,
                    l_sai: num(4)?,
                    l_bg: num(5)?,
                    l_total: num(6)?,
                },
                alpha_i: num(7)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn grid(values: &[f64], res: (usize, usize)) -> Tensor {
        Tensor::from_slice(values, res, &Device::Cpu).unwrap()
    }

    fn mask(res: (usize, usize), cells: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(res);
        for &(r, c) in cells {
            m.set(r, c, true);
        }
        m
    }

    fn fmap(values: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            data: Tensor::from_vec(values, (c, h, w), &Device::Cpu).unwrap(),
            layer_name: "t".into(),
        }
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn loss_in_examples() {
        let target = mask((4, 4), &[(0, 0), (0, 1)]);
        assert!(val(&loss_in(&grid(&[1.0; 16], (4, 4)), &target, 2).unwrap()).abs() < 1e-12);
        let mut v = vec![0.1; 16];
        v[0] = 0.8;
        v[1] = 0.6;
        assert!((val(&loss_in(&grid(&v, (4, 4)), &target, 2).unwrap()) - 0.3).abs() < 1e-12);
        for k in 1..=2 {
            assert!((val(&loss_in(&grid(&[0.37; 16], (4, 4)), &target, k).unwrap()) - 0.63).abs() < 1e-12);
        }
        assert!(loss_in(&grid(&v, (4, 4)), &target, 3).is_err());
    }

    #[test]
    fn loss_out_examples() {
        let target = mask((4, 4), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let mut v = vec![0.0; 16];
        v[0] = 0.9;
        assert_eq!(val(&loss_out(&grid(&v, (4, 4)), &target).unwrap()), 0.0);
        let mut v = vec![0.5; 16];
        v[0] = 0.9;
        assert!((val(&loss_out(&grid(&v, (4, 4)), &target).unwrap()) - 0.5).abs() < 1e-12);
        assert!(loss_out(&grid(&v, (4, 4)), &BinaryMask::ones((4, 4))).is_err());
    }

    #[test]
    fn loss_oii_examples() {
        let target = mask((4, 4), &[(1, 1), (1, 2)]);
        let perfect: Vec<f64> = (0..16).map(|i| if i == 5 || i == 6 { 1.0 } else { 0.0 }).collect();
        let (t, _, _) = loss_oii(&grid(&perfect, (4, 4)), &target, 2).unwrap();
        assert!(val(&t).abs() < 1e-12);
        let (t, a, b) = loss_oii(&grid(&[0.2; 16], (4, 4)), &target, 1).unwrap();
        assert!((val(&t) - 1.0).abs() < 1e-12);
        assert!((val(&t) - (val(&a) + val(&b))).abs() < 1e-9);
    }

    #[test]
    fn rat_examples() {
        let e = ["e0", "e1", "e2"];
        assert_eq!(rat_align(&e, 5).unwrap(), vec!["e0", "e1", "e2", "e0", "e1"]);
        assert_eq!(rat_align(&e, 2).unwrap(), vec!["e0", "e1"]);
        assert_eq!(rat_align(&e, 3).unwrap(), e.to_vec());
        assert!(rat_align::<u8>(&[], 3).is_err());
    }

    #[test]
    fn loss_sai_examples() {
        // 2 channels on a 1x2 grid: cell 0 = source, cell 1 = edge
        let updated = fmap(vec![2.0, 5.0, 2.0, 5.0], 2, 1, 2);
        let original = fmap(vec![9.0, 1.0, 9.0, 0.0], 2, 1, 2);
        let source = mask((1, 2), &[(0, 0)]);
        let edge = mask((1, 2), &[(0, 1)]);
        // |[2,2] - [1,0]| = [1,2] -> 1.5
        assert!((val(&loss_sai(&updated, &original, &source, &edge).unwrap()) - 1.5).abs() < 1e-12);
        let empty = BinaryMask::zeros((1, 2));
        assert_eq!(val(&loss_sai(&updated, &original, &empty, &edge).unwrap()), 0.0);
        assert!(loss_sai(&updated, &original, &source, &empty).is_err());
        // source features equal to the aligned edge features -> 0
        let matched = fmap(vec![1.0, 7.0, 0.0, 7.0], 2, 1, 2);
        assert_eq!(val(&loss_sai(&matched, &original, &source, &edge).unwrap()), 0.0);
    }

    #[test]
    fn loss_bg_examples() {
        let a = fmap(vec![1.0, 1.0], 2, 1, 1);
        let b = fmap(vec![0.0, 3.0], 2, 1, 1);
        let bg = BinaryMask::ones((1, 1));
        assert!((val(&loss_bg(&a, &b, &bg).unwrap()) - 1.5).abs() < 1e-12);
        assert_eq!(val(&loss_bg(&a, &a, &bg).unwrap()), 0.0);
        assert_eq!(val(&loss_bg(&a, &b, &BinaryMask::zeros((1, 1))).unwrap()), 0.0);
    }

    #[test]
    fn step_size_decays_linearly() {
        let s = UpdateSchedule::new(150.0, 50, 35, 50).unwrap();
        assert_eq!(step_size(0, &s).unwrap(), 150.0);
        assert_eq!(step_size(25, &s).unwrap(), 75.0);
        assert_eq!(step_size(49, &s).unwrap(), 3.0);
        assert!(step_size(50, &s).is_err());
    }

    #[test]
    fn gradient_step_examples() {
        let z = LatentTensor::new(grid(&[1.0, -2.0, 3.0, 0.5], (2, 2)), 681);
        let zero = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        let same = latent_gradient_step(&z, &zero, 10.0).unwrap();
        assert_eq!(flat_values(&same.data).unwrap(), flat_values(&z.data).unwrap());
        assert_eq!(same.step_tag, 681);
        let g = (&z.data / 4.0).unwrap();
        let gone = latent_gradient_step(&z, &g, 4.0).unwrap();
        assert!(flat_values(&gone.data).unwrap().iter().all(|v| v.abs() < 1e-15));
        let nan = grid(&[0.0, f64::NAN, 0.0, 0.0], (2, 2));
        assert!(matches!(
            latent_gradient_step(&z, &nan, 1.0),
            Err(Error::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn weighted_combination() {
        let w = LossWeights::default();
        assert_eq!(LossBreakdown::from_components(0.0, 0.0, 0.0, 0.0, &w).l_total, 0.0);
        let b = LossBreakdown::from_components(0.5, 0.5, 2.0, 4.0, &w);
        assert!((b.l_total - 2.0).abs() < 1e-12);
        let w2 = LossWeights::new(1.0, 0.5, 0.5).unwrap();
        let b2 = LossBreakdown::from_components(0.5, 0.5, 2.0, 4.0, &w2);
        assert!((b2.l_total - 2.0 * b.l_total).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn breakdown_check_rejects_inconsistency() {
        let w = LossWeights::default();
        let ok = LossBreakdown {
            l_in: 0.6,
            l_out: 0.4,
            l_oii: 1.0,
            l_sai: 2.0,
            l_bg: 4.0,
            l_total: 2.0,
        };
        ok.check(&w).unwrap();
        assert!(LossBreakdown { l_total: 2.1, ..ok }.check(&w).is_err());
        assert!(LossBreakdown { l_oii: 1.1, ..ok }.check(&w).is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let rows = vec![LossLogRow {
            iteration: 0,
            losses: LossBreakdown {
                l_in: 0.5,
                l_out: 0.25,
                l_oii: 0.75,
                l_sai: 0.1,
                l_bg: 0.0,
                l_total: 0.4,
            },
            alpha_i: 150.0,
        }];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(LOSS_LOG_HEADER));
        assert_eq!(parse_loss_log(&text).unwrap(), rows);
    }

    #[test]
    fn default_k_scales_with_area() {
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(4), 1);
        assert_eq!(default_k(5), 2);
        assert_eq!(default_k(64), 16);
    }
}

//! Target, source, edge and background masks.
//!
//! The target comes from the user's box, the source from thresholding the
//! object heatmap (minus the target), the edge is a dilation ring around the
//! source (outside the target), and the background is everything that is
//! neither source nor target.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::TokenHeatmap;
use crate::config::RegionParams;
use crate::error::{Error, Result};

/// Axis-aligned box in normalised image coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let coords = [x0, y0, x1, y1];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid(
                "bbox",
                format!("coordinates must lie in [0, 1], got {coords:?}"),
            ));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box: need x0 < x1 and y0 < y1, got {coords:?}"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box enclosing the set cells of `mask`, or `None` for an empty mask.
    pub fn enclosing(mask: &BinaryMask) -> Option<Self> {
        let (h, w) = mask.resolution();
        let cells: Vec<(usize, usize)> = mask.cells().collect();
        if cells.is_empty() {
            return None;
        }
        let r0 = cells.iter().map(|c| c.0).min()?;
        let r1 = cells.iter().map(|c| c.0).max()? + 1;
        let c0 = cells.iter().map(|c| c.1).min()?;
        let c1 = cells.iter().map(|c| c.1).max()? + 1;
        Self::new(
            c0 as f64 / w as f64,
            r0 as f64 / h as f64,
            c1 as f64 / w as f64,
            r1 as f64 / h as f64,
        )
        .ok()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// Parses `x0,y0,x1,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::invalid("bbox", format!("expected x0,y0,x1,y1, got `{s}`")));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::invalid("bbox", format!("`{p}` is not a number")))?;
        }
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Row-major binary grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        for r in 0..self.height {
            let row: String = (0..self.width)
                .map(|c| if self.get(r, c) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn zeros(resolution: (usize, usize)) -> Self {
        Self {
            height: resolution.0,
            width: resolution.1,
            data: vec![false; resolution.0 * resolution.1],
        }
    }

    pub fn ones(resolution: (usize, usize)) -> Self {
        Self {
            height: resolution.0,
            width: resolution.1,
            data: vec![true; resolution.0 * resolution.1],
        }
    }

    pub fn from_fn(resolution: (usize, usize), f: impl Fn(usize, usize) -> bool) -> Self {
        let (h, w) = resolution;
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn from_vec(resolution: (usize, usize), data: Vec<bool>) -> Result<Self> {
        if data.len() != resolution.0 * resolution.1 {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for a {}x{} mask",
                data.len(),
                resolution.0,
                resolution.1
            )));
        }
        Ok(Self {
            height: resolution.0,
            width: resolution.1,
            data,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|v| *v)
    }

    /// `(row, col)` of every set cell, row-major (raster-scan) order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Flat row-major indices of the set cells.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| i)
            .collect()
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.resolution() != other.resolution() {
            return Err(Error::DimensionMismatch(format!(
                "mask resolutions differ: {:?} vs {:?}",
                self.resolution(),
                other.resolution()
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.resolution() == other.resolution()
            && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.resolution() == other.resolution()
            && self.data.iter().zip(&other.data).all(|(a, b)| !(a & b))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()
    }

    /// Writes the mask as an 8-bit PNG with values 0/255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::image::save_gray_png(path, self.width, self.height, &self.to_f64())
    }
}

/// Rasterises `bbox` by cell-centre inclusion.
///
/// A box too small to contain any cell centre selects the single cell under
/// the box centre.
pub fn bbox_to_mask(bbox: &BoundingBox, resolution: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::invalid("resolution", "must be at least 1x1"));
    }
    let mut mask = BinaryMask::from_fn(resolution, |r, c| {
        let cx = (c as f64 + 0.5) / w as f64;
        let cy = (r as f64 + 0.5) / h as f64;
        cx >= bbox.x0 && cx <= bbox.x1 && cy >= bbox.y0 && cy <= bbox.y1
    });
    if mask.is_empty() {
        let cx = (bbox.x0 + bbox.x1) / 2.0;
        let cy = (bbox.y0 + bbox.y1) / 2.0;
        let col = ((cx * w as f64) as usize).min(w - 1);
        let row = ((cy * h as f64) as usize).min(h - 1);
        mask.set(row, col, true);
    }
    Ok(mask)
}

/// Cells whose normalised heatmap value is at least `threshold`.
pub fn threshold_source_mask(heatmap: &TokenHeatmap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", "must lie in (0, 1)"));
    }
    if heatmap.is_constant() {
        return Err(Error::NoSourceRegion);
    }
    BinaryMask::from_vec(
        heatmap.resolution,
        heatmap.data.iter().map(|v| *v >= threshold).collect(),
    )
}

/// `source_raw ∧ ¬target`.
pub fn subtract_target(source_raw: &BinaryMask, target: &BinaryMask) -> Result<BinaryMask> {
    source_raw.and_not(target)
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::invalid("kernel", format!("must be odd and >= 3, got {kernel}")));
    }
    Ok(())
}

/// Dilation with a `kernel × kernel` square structuring element, zero padding.
pub fn dilate(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    check_kernel(kernel)?;
    let (h, w) = mask.resolution();
    let r = kernel / 2;
    let mut out = BinaryMask::zeros((h, w));
    for (row, col) in mask.cells() {
        for rr in row.saturating_sub(r)..=(row + r).min(h - 1) {
            for cc in col.saturating_sub(r)..=(col + r).min(w - 1) {
                out.set(rr, cc, true);
            }
        }
    }
    Ok(out)
}

/// `dilate(source) ∧ ¬source`.
///
/// An empty source yields an empty ring; a non-empty source with no room
/// around it is an error.
pub fn edge_ring(source: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    let ring = dilate(source, kernel)?.and_not(source)?;
    if ring.is_empty() && !source.is_empty() {
        return Err(Error::EmptyEdgeRing(
            "source covers the whole grid; nothing surrounds it".into(),
        ));
    }
    Ok(ring)
}

/// Nearest-neighbour resampling by cell centres.
pub fn resample_mask(mask: &BinaryMask, resolution: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::invalid("resolution", "must be at least 1x1"));
    }
    let (sh, sw) = mask.resolution();
    if (sh, sw) == resolution {
        return Ok(mask.clone());
    }
    Ok(BinaryMask::from_fn(resolution, |r, c| {
        let sr = (((r as f64 + 0.5) * sh as f64 / h as f64) as usize).min(sh - 1);
        let sc = (((c as f64 + 0.5) * sw as f64 / w as f64) as usize).min(sw - 1);
        mask.get(sr, sc)
    }))
}

/// The four region masks at a common resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub target: BinaryMask,
    pub source: BinaryMask,
    pub edge: BinaryMask,
    pub background: BinaryMask,
}

impl RegionMasks {
    /// No source, edge or target; everything is background.
    pub fn empty(resolution: (usize, usize)) -> Self {
        Self {
            target: BinaryMask::zeros(resolution),
            source: BinaryMask::zeros(resolution),
            edge: BinaryMask::zeros(resolution),
            background: BinaryMask::ones(resolution),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.target.resolution()
    }

    /// Checks resolution agreement, disjointness and the background complement.
    pub fn check_invariants(&self) -> Result<()> {
        let res = self.resolution();
        for (name, m) in [
            ("source", &self.source),
            ("edge", &self.edge),
            ("background", &self.background),
        ] {
            if m.resolution() != res {
                return Err(Error::DimensionMismatch(format!("{name} mask resolution")));
            }
        }
        let violated = |what: &str| Err(Error::invalid("regions", what.to_string()));
        if !self.source.is_disjoint(&self.target) {
            return violated("source and target overlap");
        }
        if !self.edge.is_disjoint(&self.source) || !self.edge.is_disjoint(&self.target) {
            return violated("edge overlaps source or target");
        }
        if self.background != self.source.or(&self.target)?.not() {
            return violated("background is not the complement of source ∪ target");
        }
        Ok(())
    }

    /// Resamples every mask and re-derives the background so the partition survives.
    pub fn resample(&self, resolution: (usize, usize)) -> Result<RegionMasks> {
        if resolution == self.resolution() {
            return Ok(self.clone());
        }
        let target = resample_mask(&self.target, resolution)?;
        let source = resample_mask(&self.source, resolution)?.and_not(&target)?;
        let edge = resample_mask(&self.edge, resolution)?
            .and_not(&source)?
            .and_not(&target)?;
        let background = source.or(&target)?.not();
        Ok(RegionMasks {
            target,
            source,
            edge,
            background,
        })
    }

    /// Per-cell labels: 0 background, 1 source, 2 edge, 3 target.
    pub fn label_map(&self) -> Vec<u8> {
        (0..self.target.as_slice().len())
            .map(|i| {
                if self.target.as_slice()[i] {
                    3
                } else if self.source.as_slice()[i] {
                    1
                } else if self.edge.as_slice()[i] {
                    2
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn save_pngs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("target", &self.target),
            ("source", &self.source),
            ("edge", &self.edge),
            ("background", &self.background),
        ] {
            m.save_png(&dir.join(format!("{name}.png")))?;
        }
        Ok(())
    }
}

/// Target from the box, source from the heatmap minus the target, the
/// dilation ring around the source (outside the target) as edge, and the
/// complement of source ∪ target as background.
pub fn build_region_masks(
    heatmap: &TokenHeatmap,
    bbox: &BoundingBox,
    params: &RegionParams,
) -> Result<RegionMasks> {
    let target = bbox_to_mask(bbox, heatmap.resolution)?;
    let source_raw = threshold_source_mask(heatmap, params.threshold)?;
    let source = subtract_target(&source_raw, &target)?;
    let edge = edge_ring(&source, params.dilate_kernel)?.and_not(&target)?;
    let background = source.or(&target)?.not();
    let masks = RegionMasks {
        target,
        source,
        edge,
        background,
    };
    masks.check_invariants()?;
    Ok(masks)
}

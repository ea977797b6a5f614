use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::interp::{accumulate_sample, bilinear_weights};
use crate::numerics::tensor::{BBox, FeatureMap};
use crate::scalar::Scalar;

const MIN_CELL_AREA: f64 = 1e-6;

/// ROI-align geometry: `bins × bins` grid, `sampling_ratio²` bilinear points per bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiAlignConfig {
    pub bins: usize,
    pub sampling_ratio: usize,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        Self {
            bins: 7,
            sampling_ratio: 2,
        }
    }
}

impl RoiAlignConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }
}

/// A box expressed in cell coordinates and clamped to the map footprint.
#[derive(Clone, Copy, Debug)]
struct CellRegion<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

/// Pixel box to cell coordinates (cell `i` is centered at pixel `(i + 0.5) * stride`),
/// clamped to the footprint `[-0.5, W-0.5] × [-0.5, H-0.5]`.
fn cell_region<T: Scalar>(
    height: usize,
    width: usize,
    stride: T,
    bbox: &BBox<T>,
) -> Result<CellRegion<T>> {
    let half = T::lit(0.5);
    let to_cell = |v: T| v / stride - half;
    let (x1, y1, x2, y2) = (
        to_cell(bbox.x1),
        to_cell(bbox.y1),
        to_cell(bbox.x2),
        to_cell(bbox.y2),
    );
    let min_area = T::lit(MIN_CELL_AREA);
    if (x2 - x1) * (y2 - y1) < min_area {
        return Err(Error::DegenerateBox(format!(
            "box {:?} covers less than {MIN_CELL_AREA} cells",
            bbox.to_array()
        )));
    }
    let lo = -half;
    let hi_x = T::from_usize_lossy(width) - half;
    let hi_y = T::from_usize_lossy(height) - half;
    let r = CellRegion {
        x1: x1.max(lo),
        y1: y1.max(lo),
        x2: x2.min(hi_x),
        y2: y2.min(hi_y),
    };
    if r.x2 <= r.x1 || r.y2 <= r.y1 || (r.x2 - r.x1) * (r.y2 - r.y1) < min_area {
        return Err(Error::Domain(format!(
            "box {:?} lies outside the {height}x{width} map",
            bbox.to_array()
        )));
    }
    Ok(r)
}

/// Visits every sample point of the ROI grid with its averaging weight.
fn for_each_sample<T: Scalar>(
    height: usize,
    width: usize,
    r: &CellRegion<T>,
    cfg: RoiAlignConfig,
    mut visit: impl FnMut(T, T, T),
) {
    let bins = cfg.bins;
    let ratio = cfg.sampling_ratio;
    let bin_w = (r.x2 - r.x1) / T::from_usize_lossy(bins);
    let bin_h = (r.y2 - r.y1) / T::from_usize_lossy(bins);
    let step_w = bin_w / T::from_usize_lossy(ratio);
    let step_h = bin_h / T::from_usize_lossy(ratio);
    let weight = T::one() / T::from_usize_lossy(bins * bins * ratio * ratio);
    let half = T::lit(0.5);
    let max_x = T::from_usize_lossy(width - 1);
    let max_y = T::from_usize_lossy(height - 1);
    for by in 0..bins {
        for iy in 0..ratio {
            let y =
                r.y1 + T::from_usize_lossy(by) * bin_h + (T::from_usize_lossy(iy) + half) * step_h;
            let y = y.max(T::zero()).min(max_y);
            for bx in 0..bins {
                for ix in 0..ratio {
                    let x = r.x1
                        + T::from_usize_lossy(bx) * bin_w
                        + (T::from_usize_lossy(ix) + half) * step_w;
                    visit(x.max(T::zero()).min(max_x), y, weight);
                }
            }
        }
    }
}

fn check_config(cfg: RoiAlignConfig) -> Result<()> {
    if cfg.bins == 0 || cfg.sampling_ratio == 0 {
        return Err(Error::Domain(
            "ROI-align bins and sampling ratio must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Pools one `d`-vector for `bbox` (pixel coordinates): a `bins × bins` grid with
/// 2×2 bilinear samples per bin, averaged over all bins.
pub fn roi_align<T: Scalar>(map: &FeatureMap<T>, bbox: &BBox<T>, bins: usize) -> Result<Vec<T>> {
    roi_align_with(map, bbox, RoiAlignConfig::with_bins(bins))
}

pub fn roi_align_with<T: Scalar>(
    map: &FeatureMap<T>,
    bbox: &BBox<T>,
    cfg: RoiAlignConfig,
) -> Result<Vec<T>> {
    check_config(cfg)?;
    let r = cell_region(map.height(), map.width(), map.stride(), bbox)?;
    let mut out = vec![T::zero(); map.channels()];
    for_each_sample(map.height(), map.width(), &r, cfg, |x, y, w| {
        accumulate_sample(map, x, y, w, &mut out)
    });
    Ok(out)
}

/// ROI-align written as a sparse convex combination of cells.
///
/// Pooling is linear in the map, so the same weights give both the forward
/// value and the adjoint used to push gradients back onto cells.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiWeights<T> {
    entries: Vec<(usize, T)>,
}

impl<T: Scalar> RoiWeights<T> {
    pub fn compute(
        height: usize,
        width: usize,
        stride: T,
        bbox: &BBox<T>,
        cfg: RoiAlignConfig,
    ) -> Result<Self> {
        check_config(cfg)?;
        let r = cell_region(height, width, stride, bbox)?;
        let mut dense = vec![T::zero(); height * width];
        for_each_sample(height, width, &r, cfg, |x, y, w| {
            for (cell, bw) in bilinear_weights(height, width, x, y) {
                dense[cell] += bw * w;
            }
        });
        let entries = dense
            .into_iter()
            .enumerate()
            .filter(|(_, w)| *w != T::zero())
            .collect();
        Ok(Self { entries })
    }

    pub fn for_map(map: &FeatureMap<T>, bbox: &BBox<T>, cfg: RoiAlignConfig) -> Result<Self> {
        Self::compute(map.height(), map.width(), map.stride(), bbox, cfg)
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn pool(&self, map: &FeatureMap<T>) -> Vec<T> {
        let mut out = vec![T::zero(); map.channels()];
        for &(cell, w) in &self.entries {
            for (o, v) in out.iter_mut().zip(map.cell_at(cell)) {
                *o += w * *v;
            }
        }
        out
    }

    /// Adds the adjoint of pooling: `grad_map[cell] += w_cell * grad`.
    pub fn scatter(&self, grad: &[T], grad_map: &mut [T], channels: usize) {
        for &(cell, w) in &self.entries {
            let dst = &mut grad_map[cell * channels..(cell + 1) * channels];
            for (d, g) in dst.iter_mut().zip(grad) {
                *d += w * *g;
            }
        }
    }
}

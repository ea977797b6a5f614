use crate::error::{Error, Result};
use crate::numerics::tensor::FeatureMap;
use crate::scalar::Scalar;

/// The four cells surrounding `(x, y)` and their bilinear weights, as `(flat cell index, weight)`.
///
/// Coordinates must already lie in `[0, width-1] × [0, height-1]`.
#[inline]
pub(crate) fn bilinear_weights<T: Scalar>(
    height: usize,
    width: usize,
    x: T,
    y: T,
) -> [(usize, T); 4] {
    let (x0, fx) = split_coord(x, width);
    let (y0, fy) = split_coord(y, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let one = T::one();
    [
        (y0 * width + x0, (one - fy) * (one - fx)),
        (y0 * width + x1, (one - fy) * fx),
        (y1 * width + x0, fy * (one - fx)),
        (y1 * width + x1, fy * fx),
    ]
}

#[inline]
fn split_coord<T: Scalar>(v: T, extent: usize) -> (usize, T) {
    if extent == 1 {
        return (0, T::zero());
    }
    let base = v.floor().to_usize().unwrap_or(0).min(extent - 2);
    (base, v - T::from_usize_lossy(base))
}

/// Bilinear blend of the four cells around cell coordinate `(x, y)`.
///
/// Integer coordinates land exactly on a cell; out-of-range or non-finite
/// coordinates are rejected.
pub fn bilinear_sample<T: Scalar>(map: &FeatureMap<T>, x: T, y: T) -> Result<Vec<T>> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite sample coordinate ({x}, {y})"
        )));
    }
    let max_x = T::from_usize_lossy(map.width() - 1);
    let max_y = T::from_usize_lossy(map.height() - 1);
    if x < T::zero() || y < T::zero() || x > max_x || y > max_y {
        return Err(Error::Domain(format!(
            "sample ({x}, {y}) outside [0, {max_x}] x [0, {max_y}]"
        )));
    }
    let mut out = vec![T::zero(); map.channels()];
    accumulate_sample(map, x, y, T::one(), &mut out);
    Ok(out)
}

/// `out += weight * bilinear(map, x, y)` for in-range coordinates.
#[inline]
pub(crate) fn accumulate_sample<T: Scalar>(
    map: &FeatureMap<T>,
    x: T,
    y: T,
    weight: T,
    out: &mut [T],
) {
    for (cell, w) in bilinear_weights(map.height(), map.width(), x, y) {
        if w == T::zero() {
            continue;
        }
        let w = w * weight;
        for (o, v) in out.iter_mut().zip(map.cell_at(cell)) {
            *o += w * *v;
        }
    }
}

/// Source coordinate of output cell `i` when resampling `src` cells onto `dst` cells,
/// using cell-center alignment and clamping to the valid sample range.
#[inline]
pub(crate) fn resample_coord<T: Scalar>(i: usize, src: usize, dst: usize) -> T {
    let scale = T::from_usize_lossy(src) / T::from_usize_lossy(dst);
    let half = T::lit(0.5);
    let c = (T::from_usize_lossy(i) + half) * scale - half;
    c.max(T::zero()).min(T::from_usize_lossy(src - 1))
}

/// Bilinearly resizes `map` to `out_height × out_width` cells with cell-center alignment.
pub fn resize_bilinear<T: Scalar>(
    map: &FeatureMap<T>,
    out_height: usize,
    out_width: usize,
) -> Result<FeatureMap<T>> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::Domain("resize target must be non-empty".into()));
    }
    if out_height == map.height() && out_width == map.width() {
        return Ok(map.clone());
    }
    let c = map.channels();
    let mut data = vec![T::zero(); out_height * out_width * c];
    for oy in 0..out_height {
        let sy = resample_coord::<T>(oy, map.height(), out_height);
        for ox in 0..out_width {
            let sx = resample_coord::<T>(ox, map.width(), out_width);
            let start = (oy * out_width + ox) * c;
            accumulate_sample(map, sx, sy, T::one(), &mut data[start..start + c]);
        }
    }
    let stride = map.stride() * T::from_usize_lossy(map.width()) / T::from_usize_lossy(out_width);
    FeatureMap::new(out_height, out_width, c, stride, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> FeatureMap<f64> {
        FeatureMap::from_fn(3, 4, 2, 1.0, |y, x, c| (y * 10 + x) as f64 + 0.5 * c as f64).unwrap()
    }

    #[test]
    fn exact_at_integer_coordinates() {
        let m = ramp();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(
                    bilinear_sample(&m, x as f64, y as f64).unwrap(),
                    m.cell(y, x)
                );
            }
        }
    }

    #[test]
    fn center_of_two_by_two_is_mean() {
        let m = FeatureMap::new(2, 2, 1, 1.0, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0.5, 0.5).unwrap(), vec![3.0]);
    }

    #[test]
    fn linear_along_axis() {
        let m = FeatureMap::new(2, 3, 1, 1.0f64, vec![0.3, -1.0, 4.0, 2.0, 7.0, 1.5]).unwrap();
        let a = bilinear_sample(&m, 1.1, 0.4).unwrap()[0];
        let b = bilinear_sample(&m, 1.5, 0.4).unwrap()[0];
        let c = bilinear_sample(&m, 1.9, 0.4).unwrap()[0];
        assert!(((a + c) / 2.0 - b).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range() {
        let m = ramp();
        assert!(matches!(
            bilinear_sample(&m, -0.1, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(bilinear_sample(&m, 3.0001, 0.0).is_err());
        assert!(bilinear_sample(&m, f64::NAN, 0.0).is_err());
        assert!(bilinear_sample(&m, 3.0, 2.0).is_ok());
    }

    #[test]
    fn single_cell_map() {
        let m = FeatureMap::new(1, 1, 3, 4.0, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0.0, 0.0).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = ramp();
        assert_eq!(resize_bilinear(&m, 3, 4).unwrap(), m);
        let k = FeatureMap::new(4, 4, 1, 2.0, vec![1.5f64; 16]).unwrap();
        let r = resize_bilinear(&k, 2, 3).unwrap();
        assert!(r.data().iter().all(|v| (*v - 1.5).abs() < 1e-15));
        assert_eq!(r.height(), 2);
        assert_eq!(r.width(), 3);
    }
}

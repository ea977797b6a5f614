use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `height × width × channels` grid stored row-major as `(h, w, c)`.
///
/// `stride` is the number of image pixels per cell and converts pixel-space
/// boxes into cell coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    stride: T,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        stride: T,
        data: Vec<T>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Domain(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !(stride.is_finite() && stride > T::zero()) {
            return Err(Error::Domain(format!(
                "stride must be positive, got {stride}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Domain("feature map size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::Domain(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature map element {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: T) -> Self {
        Self::new(
            height,
            width,
            channels,
            stride,
            vec![T::zero(); height * width * channels],
        )
        .expect("valid zero map")
    }

    /// Builds a map from `f(y, x, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        stride: T,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, stride, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn stride(&self) -> T {
        self.stride
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep every element finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Cell by flat index `y * width + x`.
    #[inline]
    pub fn cell_at(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cells(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            stride: U::from(self.stride).expect("stride representable"),
            data: self
                .data
                .iter()
                .map(|v| U::from(*v).expect("value representable"))
                .collect(),
        }
    }
}

/// Axis-aligned box in image pixels, corner format `(x1, y1, x2, y2)`, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[T; 4]", try_from = "[T; 4]")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite {
            return Err(Error::Domain("box coordinates must be finite".into()));
        }
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::DegenerateBox(format!(
                "({x1}, {y1}, {x2}, {y2}) has non-positive extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        if inter <= T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        (inter / union).min(T::one())
    }

    /// Clips to `[0, width] × [0, height]`; `None` when nothing remains.
    pub fn clamp_to(&self, width: T, height: T) -> Option<Self> {
        let x1 = self.x1.max(T::zero());
        let y1 = self.y1.max(T::zero());
        let x2 = self.x2.min(width);
        let y2 = self.y2.min(height);
        Self::new(x1, y1, x2, y2).ok()
    }

    pub fn scale(&self, factor: T) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        b.to_array()
    }
}

impl<T: Scalar> TryFrom<[T; 4]> for BBox<T> {
    type Error = Error;

    fn try_from(v: [T; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_rejects_bad_inputs() {
        assert!(FeatureMap::<f64>::new(2, 2, 1, 1.0, vec![0.0; 3]).is_err());
        assert!(FeatureMap::<f64>::new(1, 1, 1, 0.0, vec![0.0]).is_err());
        assert!(FeatureMap::<f64>::new(1, 1, 1, 1.0, vec![f64::NAN]).is_err());
        assert!(FeatureMap::<f64>::new(0, 1, 1, 1.0, vec![]).is_err());
    }

    #[test]
    fn cell_layout_is_row_major_hwc() {
        let m = FeatureMap::<f64>::from_fn(2, 3, 2, 1.0, |y, x, c| (100 * y + 10 * x + c) as f64)
            .unwrap();
        assert_eq!(m.cell(1, 2), &[120.0, 121.0]);
        assert_eq!(m.cell_at(5), m.cell(1, 2));
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        let c = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&c), 0.0);
        assert!((a.iou(&b) - 1.0f64 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&b), b.iou(&a));
    }

    #[test]
    fn box_validation_and_serde() {
        assert!(matches!(
            BBox::new(1.0, 0.0, 1.0, 2.0),
            Err(Error::DegenerateBox(_))
        ));
        assert!(BBox::new(0.0, f64::INFINITY, 1.0, 2.0).is_err());
        let b = BBox::new(1.5, 2.0, 3.0, 4.25).unwrap();
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.5,2.0,3.0,4.25]");
        let back: BBox<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox<f64>>("[3.0,0.0,1.0,1.0]").is_err());
    }
}

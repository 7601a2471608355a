//! Image batches with an explicit value-range tag.
//!
//! Translation networks work in [-1,1]; the attribute network consumes
//! [0,1]. Tagging the range at the type level keeps the two spaces from
//! being mixed up silently; `range_bridge` in the guidance module is the
//! one differentiable crossing point.

use crate::error::{Error, Result};
use crate::scalar::{c, to_f64, Scalar};
use crate::tensor::Tensor;

pub const RANGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRange {
    /// [0,1] — attribute-network space.
    Unit,
    /// [-1,1] — generator space.
    Symmetric,
}

impl PixelRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            PixelRange::Unit => (0.0, 1.0),
            PixelRange::Symmetric => (-1.0, 1.0),
        }
    }
}

/// `[N,3,H,W]` pixel tensor plus its range tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<F> {
    data: Tensor<F>,
    range: PixelRange,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn new(data: Tensor<F>, range: PixelRange) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!(
                "image batch must be [N,3,H,W], got {s:?}"
            )));
        }
        let (lo, hi) = range.bounds();
        for &v in data.data() {
            let v = to_f64(v);
            if !v.is_finite() || v < lo - RANGE_TOLERANCE || v > hi + RANGE_TOLERANCE {
                return Err(Error::Input(format!(
                    "pixel value {v} outside tagged range [{lo},{hi}]"
                )));
            }
        }
        Ok(Self { data, range })
    }

    /// Builds from `[N,H,W,3]` row-major samples (the IO-side layout).
    pub fn from_nhwc(n: usize, h: usize, w: usize, nhwc: &[F], range: PixelRange) -> Result<Self> {
        if nhwc.len() != n * h * w * 3 {
            return Err(Error::Input(format!(
                "expected {} values for {}x{}x{}x3, got {}",
                n * h * w * 3,
                n,
                h,
                w,
                nhwc.len()
            )));
        }
        let mut data = vec![F::zero(); nhwc.len()];
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data[((i * 3 + ch) * h + y) * w + x] = nhwc[((i * h + y) * w + x) * 3 + ch];
                    }
                }
            }
        }
        Self::new(Tensor::new(vec![n, 3, h, w], data)?, range)
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.data
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn count(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn pixel(&self, n: usize, ch: usize, y: usize, x: usize) -> F {
        let (h, w) = (self.height(), self.width());
        self.data.data()[((n * 3 + ch) * h + y) * w + x]
    }

    /// Affine range conversion; identity if already tagged as requested.
    pub fn to_range(&self, target: PixelRange) -> ImageBatch<F> {
        if self.range == target {
            return self.clone();
        }
        let data = match target {
            PixelRange::Unit => self.data.map(|v| (v + F::one()) * c(0.5)),
            PixelRange::Symmetric => self.data.map(|v| v * c(2.0) - F::one()),
        };
        ImageBatch { data, range: target }
    }

    /// Single-sample view as a new batch.
    pub fn sample(&self, index: usize) -> ImageBatch<F> {
        let (h, w) = (self.height(), self.width());
        let plane = 3 * h * w;
        let data = self.data.data()[index * plane..(index + 1) * plane].to_vec();
        ImageBatch {
            data: Tensor::new(vec![1, 3, h, w], data).unwrap(),
            range: self.range,
        }
    }

    /// Concatenates batches of identical geometry and range.
    pub fn stack(batches: &[ImageBatch<F>]) -> Result<ImageBatch<F>> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero image batches".into()))?;
        let (h, w, range) = (first.height(), first.width(), first.range);
        let mut data = Vec::new();
        let mut n = 0usize;
        for b in batches {
            if b.height() != h || b.width() != w || b.range != range {
                return Err(Error::Input("stack: geometry or range mismatch".into()));
            }
            data.extend_from_slice(b.data.data());
            n += b.count();
        }
        Ok(ImageBatch {
            data: Tensor::new(vec![n, 3, h, w], data).unwrap(),
            range,
        })
    }

    /// Reorders samples; used by shuffling and the equivariance tests.
    pub fn permuted(&self, order: &[usize]) -> ImageBatch<F> {
        let parts: Vec<ImageBatch<F>> = order.iter().map(|&i| self.sample(i)).collect();
        ImageBatch::stack(&parts).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let t = Tensor::new(vec![1, 3, 1, 1], vec![0.5f32, 0.5, 1.5]).unwrap();
        assert!(ImageBatch::new(t, PixelRange::Unit).is_err());
        let t = Tensor::new(vec![1, 3, 1, 1], vec![0.5f32, 0.5, 1.5]).unwrap();
        assert!(ImageBatch::new(t, PixelRange::Symmetric).is_err());
        let t = Tensor::new(vec![1, 3, 1, 1], vec![-0.5f32, 0.5, 1.0]).unwrap();
        assert!(ImageBatch::new(t, PixelRange::Symmetric).is_ok());
    }

    #[test]
    fn rejects_non_rgb_shape() {
        let t = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        assert!(ImageBatch::new(t, PixelRange::Unit).is_err());
    }

    #[test]
    fn range_round_trip_is_tight() {
        let t = Tensor::new(vec![1, 3, 1, 1], vec![0.0f64, 0.25, 1.0]).unwrap();
        let b = ImageBatch::new(t, PixelRange::Unit).unwrap();
        let back = b.to_range(PixelRange::Symmetric).to_range(PixelRange::Unit);
        for (a, c) in b.tensor().data().iter().zip(back.tensor().data()) {
            assert!((a - c).abs() < 1e-7);
        }
    }

    #[test]
    fn nhwc_layout_maps_correctly() {
        // One 1x2 image: pixel0 = (1,2,3), pixel1 = (4,5,6) scaled to [0,1]
        let nhwc: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let b = ImageBatch::from_nhwc(1, 1, 2, &nhwc, PixelRange::Unit).unwrap();
        assert_eq!(b.pixel(0, 0, 0, 0), 0.1);
        assert_eq!(b.pixel(0, 2, 0, 1), 0.6);
    }
}

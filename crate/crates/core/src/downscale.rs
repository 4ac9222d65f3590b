//! Deterministic, discrete 2x image compression and its degenerate
//! (point-mass) distribution: the compressed representation is an exact
//! function of the input, so its entropy is zero and its log-mass is 0 on
//! the single support point.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// An image with integer values in `{0..255}`, stored row-major as
/// height x width x channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    values: Vec<u8>,
}

impl DiscreteImage {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0; height * width * channels],
        }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Map to the continuous pixel scale `v / 127.5 - 1` in `[-1, 1]` as an
    /// `[h, w, c]` array, the scale the likelihood and the networks use.
    pub fn to_unit_scale(&self) -> DenseArray {
        let data = self.values.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        DenseArray::new(vec![self.height, self.width, self.channels], data)
            .expect("length checked at construction")
    }
}

/// Box-average 2x downscale with round-half-to-even quantization.
///
/// Each output value is the rounded mean of the corresponding 2x2 input
/// block, per channel. Both spatial extents must be even.
pub fn downscale(x: &DiscreteImage) -> Result<DiscreteImage> {
    if x.height % 2 != 0 || x.width % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "downscale requires even extents, got {}x{}",
            x.height, x.width
        )));
    }
    let (oh, ow, c) = (x.height / 2, x.width / 2, x.channels);
    let mut out = DiscreteImage::zeros(oh, ow, c);
    for y in 0..oh {
        for xx in 0..ow {
            for k in 0..c {
                let sum = x.get(2 * y, 2 * xx, k) as u32
                    + x.get(2 * y, 2 * xx + 1, k) as u32
                    + x.get(2 * y + 1, 2 * xx, k) as u32
                    + x.get(2 * y + 1, 2 * xx + 1, k) as u32;
                out.set(y, xx, k, round_quarter_half_even(sum));
            }
        }
    }
    Ok(out)
}

/// Round `sum / 4` half-to-even in integer arithmetic; `sum <= 1020` so the
/// result always fits a byte.
fn round_quarter_half_even(sum: u32) -> u8 {
    let q = sum / 4;
    let r = sum % 4;
    let rounded = match r {
        0 | 1 => q,
        2 => {
            if q % 2 == 0 {
                q
            } else {
                q + 1
            }
        }
        _ => q + 1,
    };
    rounded as u8
}

/// Log-mass of the degenerate distribution `q(y | x)`: 0 when `y` equals the
/// downscaled `x` exactly, otherwise negative infinity. The sentinel is never
/// meant for arithmetic; callers branch on it.
pub fn degenerate_log_mass(y: &DiscreteImage, x: &DiscreteImage) -> Result<f64> {
    if y.height * 2 != x.height || y.width * 2 != x.width || y.channels != x.channels {
        return Err(Error::ShapeMismatch(format!(
            "y {}x{}x{} is not half the extents of x {}x{}x{}",
            y.height, y.width, y.channels, x.height, x.width, x.channels
        )));
    }
    let reference = downscale(x)?;
    if reference == *y {
        Ok(0.0)
    } else {
        Ok(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block_image(a: u8, b: u8, c: u8, d: u8) -> DiscreteImage {
        DiscreteImage::new(2, 2, 1, vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = DiscreteImage::new(4, 4, 2, vec![123; 32]).unwrap();
        let down = downscale(&img).unwrap();
        assert_eq!(down.height, 2);
        assert_eq!(down.width, 2);
        assert!(down.values().iter().all(|&v| v == 123));
    }

    #[test]
    fn block_mean_rounds_exactly() {
        assert_eq!(downscale(&block_image(0, 0, 0, 4)).unwrap().values(), &[1]);
    }

    #[test]
    fn half_rounds_to_even() {
        // mean 1.5 -> 2; mean 2.5 -> 2.
        assert_eq!(downscale(&block_image(1, 2, 2, 1)).unwrap().values(), &[2]);
        assert_eq!(downscale(&block_image(2, 3, 3, 2)).unwrap().values(), &[2]);
    }

    #[test]
    fn odd_extent_rejected() {
        let img = DiscreteImage::new(3, 4, 1, vec![0; 12]).unwrap();
        assert!(downscale(&img).is_err());
    }

    #[test]
    fn degenerate_mass_is_zero_on_support() {
        let x = DiscreteImage::new(4, 4, 1, (0..16).map(|v| v as u8 * 10).collect()).unwrap();
        let y = downscale(&x).unwrap();
        assert_eq!(degenerate_log_mass(&y, &x).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_mass_hits_sentinel_off_support() {
        let x = DiscreteImage::new(4, 4, 1, (0..16).map(|v| v as u8 * 10).collect()).unwrap();
        let mut y = downscale(&x).unwrap();
        y.values_mut()[0] = y.values()[0].wrapping_add(1);
        assert_eq!(degenerate_log_mass(&y, &x).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_mass_shape_mismatch() {
        let x = DiscreteImage::zeros(4, 4, 1);
        let y = DiscreteImage::zeros(3, 2, 1);
        assert!(degenerate_log_mass(&y, &x).is_err());
    }

    #[test]
    fn unit_scale_endpoints() {
        let img = DiscreteImage::new(1, 2, 1, vec![0, 255]).unwrap();
        let arr = img.to_unit_scale();
        assert!((arr.data()[0] + 1.0).abs() < 1e-12);
        assert!((arr.data()[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn downscale_is_deterministic_and_composable(
            values in proptest::collection::vec(0u8..=255, 64)
        ) {
            let img = DiscreteImage::new(8, 8, 1, values).unwrap();
            let once = downscale(&img).unwrap();
            prop_assert_eq!(&once, &downscale(&img).unwrap());
            // Extents divisible by 4 admit a second application.
            let twice = downscale(&once).unwrap();
            prop_assert_eq!(twice.height, 2);
            prop_assert_eq!(twice.width, 2);
        }
    }
}

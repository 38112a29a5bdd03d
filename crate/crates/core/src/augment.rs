//! Cropping of NCHW image batches.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::{Scalar, Tensor};

/// The `size x size` window at `(top, left)` of every image in the batch.
pub fn crop_at<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if size == 0 || top + size > h || left + size > w {
        return Err(config_err!("crop {size}x{size} at ({top},{left}) exceeds {h}x{w}"));
    }
    let src = x.data();
    let mut out = alloc::vec::Vec::with_capacity(n * c * size * size);
    for p in 0..n * c {
        for y in top..top + size {
            let row = p * h * w + y * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::new(&[n, c, size, size], out)
}

/// A uniformly placed square crop; returns the crop and its `(top, left)` offset.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, size: usize, rng: &mut R) -> Result<(Tensor<T>, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    if size == 0 || size > h || size > w {
        return Err(config_err!("crop {size}x{size} larger than image {h}x{w}"));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok((crop_at(x, top, left, size)?, (top, left)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_size_crop_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 5, 5], |i| i as f32);
        let (c, off) = random_crop(&x, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c, x);
        assert_eq!(off, (0, 0));
    }

    #[test]
    fn crop_matches_source_region() {
        let x = Tensor::<f32>::from_fn(&[1, 2, 9, 7], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (c, (top, left)) = random_crop(&x, 4, &mut rng).unwrap();
            for ch in 0..2 {
                for y in 0..4 {
                    for xx in 0..4 {
                        let src = x.data()[ch * 63 + (top + y) * 7 + left + xx];
                        assert_eq!(c.data()[ch * 16 + y * 4 + xx], src);
                    }
                }
            }
        }
        assert!(random_crop(&x, 8, &mut rng).is_err());
    }
}

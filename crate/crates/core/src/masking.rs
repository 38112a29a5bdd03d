//! Hole masks, masked generator inputs, in-painting composition and
//! low-resolution conditioning.
//!
//! A mask keeps a pixel where its value is 1 and marks the hole with 0. The
//! discriminator only ever sees the composed image
//! `x_I = (1 - m) * x_G + m * x`, never context and patch separately.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, contract, Result};
use crate::tape::compose_values;
use crate::{kernels, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskScheme {
    /// One `hole_h x hole_w` square at a uniformly random position.
    SingleSquare,
    /// `count` disjoint `hole_h x hole_w` squares.
    MultiSquare { count: usize },
    /// The image is tiled into `hole_h x hole_w` blocks, each dropped with probability `percent / 100`.
    RandomBlocks { percent: u8 },
}

impl MaskScheme {
    pub fn name(&self) -> &'static str {
        match self {
            MaskScheme::SingleSquare => "single_square",
            MaskScheme::MultiSquare { .. } => "multi_square",
            MaskScheme::RandomBlocks { .. } => "random_blocks",
        }
    }
}

/// Position and size of one rectangular hole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Hole {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Binary keep-map over `height x width` pixels, broadcast across channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
    scheme: MaskScheme,
    holes: Vec<Hole>,
}

impl Mask {
    pub fn all_ones(height: usize, width: usize) -> Self {
        Self { height, width, keep: vec![true; height * width], scheme: MaskScheme::SingleSquare, holes: Vec::new() }
    }

    pub fn all_zeros(height: usize, width: usize) -> Self {
        let hole = Hole { top: 0, left: 0, height, width };
        Self { height, width, keep: vec![false; height * width], scheme: MaskScheme::SingleSquare, holes: vec![hole] }
    }

    /// Mask with the given rectangular holes zeroed.
    pub fn with_holes(height: usize, width: usize, holes: &[Hole], scheme: MaskScheme) -> Result<Self> {
        let mut keep = vec![true; height * width];
        for h in holes {
            if h.height == 0 || h.width == 0 || h.top + h.height > height || h.left + h.width > width {
                return Err(config_err!("hole {h:?} does not fit a {height}x{width} image"));
            }
            for y in h.top..h.top + h.height {
                keep[y * width + h.left..y * width + h.left + h.width].fill(false);
            }
        }
        Ok(Self { height, width, keep, scheme, holes: holes.to_vec() })
    }

    pub fn from_keep(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width {
            return Err(contract!("keep map of {} entries for {height}x{width}", keep.len()));
        }
        Ok(Self { height, width, keep, scheme: MaskScheme::SingleSquare, holes: Vec::new() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn holes(&self) -> &[Hole] {
        &self.holes
    }

    pub fn hole_pixels(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Values in `{0, 1}` as an `H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| if self.keep[i] { T::one() } else { T::zero() })
    }
}

/// Draws masks from one scheme for a fixed image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MaskSampler {
    pub scheme: MaskScheme,
    pub image: (usize, usize),
    pub hole: (usize, usize),
}

impl MaskSampler {
    pub fn new(scheme: MaskScheme, image: (usize, usize), hole: (usize, usize)) -> Result<Self> {
        let s = Self { scheme, image, hole };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ((h, w), (hh, hw)) = (self.image, self.hole);
        if hh == 0 || hw == 0 || hh > h || hw > w {
            return Err(config_err!("hole {hh}x{hw} does not fit a {h}x{w} image"));
        }
        match self.scheme {
            MaskScheme::SingleSquare if hh == h && hw == w => {
                Err(config_err!("a {hh}x{hw} hole leaves no context in a {h}x{w} image"))
            }
            MaskScheme::MultiSquare { count } => {
                // Non-overlapping placement must be possible on a coarse grid.
                if count == 0 || count > (h / hh) * (w / hw) || count * hh * hw >= h * w {
                    return Err(config_err!("{count} disjoint {hh}x{hw} holes cannot fit a {h}x{w} image with context left"));
                }
                Ok(())
            }
            MaskScheme::RandomBlocks { percent } => {
                if percent == 0 || percent >= 100 || h % hh != 0 || w % hw != 0 || (h / hh) * (w / hw) < 2 {
                    return Err(config_err!("random blocks need 0 < percent < 100 and a block grid tiling {h}x{w}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Draws one mask; every training mask has at least one hole and one context pixel.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mask> {
        self.validate()?;
        let ((h, w), (hh, hw)) = (self.image, self.hole);
        match self.scheme {
            MaskScheme::SingleSquare => {
                let hole = Hole { top: rng.random_range(0..=h - hh), left: rng.random_range(0..=w - hw), height: hh, width: hw };
                Mask::with_holes(h, w, &[hole], self.scheme)
            }
            MaskScheme::MultiSquare { count } => {
                let mut holes: Vec<Hole> = Vec::with_capacity(count);
                let mut attempts = 0;
                while holes.len() < count {
                    attempts += 1;
                    if attempts > 10_000 {
                        // Fall back to a random subset of grid-aligned cells, always feasible.
                        holes.clear();
                        let (gy, gx) = (h / hh, w / hw);
                        let mut cells: Vec<usize> = (0..gy * gx).collect();
                        for i in 0..count {
                            let j = rng.random_range(i..cells.len());
                            cells.swap(i, j);
                            holes.push(Hole { top: (cells[i] / gx) * hh, left: (cells[i] % gx) * hw, height: hh, width: hw });
                        }
                        break;
                    }
                    let cand = Hole { top: rng.random_range(0..=h - hh), left: rng.random_range(0..=w - hw), height: hh, width: hw };
                    let overlaps = holes.iter().any(|o| {
                        cand.top < o.top + o.height && o.top < cand.top + cand.height && cand.left < o.left + o.width && o.left < cand.left + cand.width
                    });
                    if !overlaps {
                        holes.push(cand);
                    }
                }
                Mask::with_holes(h, w, &holes, self.scheme)
            }
            MaskScheme::RandomBlocks { percent } => {
                let (gy, gx) = (h / hh, w / hw);
                let p = f64::from(percent) / 100.0;
                loop {
                    let holes: Vec<Hole> = (0..gy * gx)
                        .filter(|_| rng.random::<f64>() < p)
                        .map(|c| Hole { top: (c / gx) * hh, left: (c % gx) * hw, height: hh, width: hw })
                        .collect();
                    if !holes.is_empty() && holes.len() < gy * gx {
                        return Mask::with_holes(h, w, &holes, self.scheme);
                    }
                }
            }
        }
    }
}

fn keep_flags(masks: &[Mask], n: usize, h: usize, w: usize) -> Result<Vec<bool>> {
    if masks.len() != 1 && masks.len() != n {
        return Err(contract!("{} masks for a batch of {n}", masks.len()));
    }
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(contract!("mask is {}x{} but images are {h}x{w}", m.height, m.width));
    }
    Ok((0..n).flat_map(|s| masks[if masks.len() == 1 { 0 } else { s }].keep.iter().copied()).collect())
}

/// `m * x`: hole pixels set to zero in every channel, context untouched.
///
/// `masks` holds one mask per sample, or a single mask for the whole batch.
pub fn apply_mask<T: Scalar>(x: &Tensor<T>, masks: &[Mask]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let keep = keep_flags(masks, n, h, w)?;
    let zeros = vec![T::zero(); x.len()];
    Tensor::new(x.shape(), compose_values(x.data(), &zeros, &keep, c, h * w))
}

/// In-painting composition `x_I = (1 - m) * x_G + m * x` on plain tensors.
pub fn compose_inpaint<T: Scalar>(x: &Tensor<T>, generated: &Tensor<T>, masks: &[Mask]) -> Result<Tensor<T>> {
    if x.shape() != generated.shape() {
        return Err(contract!("compose: {:?} vs {:?}", x.shape(), generated.shape()));
    }
    let (n, c, h, w) = x.dims4()?;
    let keep = keep_flags(masks, n, h, w)?;
    Tensor::new(x.shape(), compose_values(x.data(), generated.data(), &keep, c, h * w))
}

/// Differentiable in-painting composition on a tape. The gradient reaching
/// `generated` is exactly zero on every context pixel.
pub fn compose_inpaint_on<T: Scalar>(tape: &mut Tape<T>, x: Var, generated: Var, masks: &[Mask]) -> Result<Var> {
    let (n, _, h, w) = tape.value(x).dims4()?;
    let keep = keep_flags(masks, n, h, w)?;
    tape.compose(x, generated, &keep)
}

/// `factor x factor` average pooling, used to build the low-resolution conditioning image.
pub fn downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(config_err!("{h}x{w} is not divisible by downsample factor {factor}"));
    }
    Tensor::new(&[n, c, h / factor, w / factor], kernels::avg_pool(x.data(), n * c, h, w, factor))
}

/// Nearest-neighbour upsampling (for displaying the low-resolution input).
pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(config_err!("upsample factor must be positive"));
    }
    Tensor::new(&[n, c, h * factor, w * factor], kernels::upsample_nearest(x.data(), n * c, h, w, factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn(&[n, c, h, w], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn single_square_zeroes_exactly_hole_area() {
        let s = MaskSampler::new(MaskScheme::SingleSquare, (64, 64), (32, 32)).unwrap();
        let mut r = rng(1);
        for _ in 0..50 {
            let m = s.sample(&mut r).unwrap();
            assert_eq!(m.hole_pixels(), 1024);
            assert_eq!(m.holes().len(), 1);
        }
    }

    #[test]
    fn full_size_or_oversized_hole_is_rejected() {
        assert!(MaskSampler::new(MaskScheme::SingleSquare, (32, 32), (32, 32)).is_err());
        assert!(MaskSampler::new(MaskScheme::SingleSquare, (32, 32), (33, 8)).is_err());
        assert!(MaskSampler::new(MaskScheme::SingleSquare, (32, 32), (32, 8)).is_ok());
    }

    #[test]
    fn alternative_schemes_keep_context_and_hole() {
        let mut r = rng(3);
        let multi = MaskSampler::new(MaskScheme::MultiSquare { count: 3 }, (32, 32), (8, 8)).unwrap();
        let blocks = MaskSampler::new(MaskScheme::RandomBlocks { percent: 30 }, (32, 32), (8, 8)).unwrap();
        for _ in 0..100 {
            let m = multi.sample(&mut r).unwrap();
            assert_eq!(m.hole_pixels(), 3 * 64, "holes must be disjoint");
            let b = blocks.sample(&mut r).unwrap();
            assert!(b.hole_pixels() > 0 && b.hole_pixels() < 32 * 32);
            assert_eq!(b.hole_pixels() % 64, 0);
        }
        assert!(MaskSampler::new(MaskScheme::MultiSquare { count: 16 }, (32, 32), (8, 8)).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = MaskSampler::new(MaskScheme::SingleSquare, (32, 32), (16, 16)).unwrap();
        let (mut a, mut b) = (rng(9), rng(9));
        for _ in 0..20 {
            assert_eq!(s.sample(&mut a).unwrap(), s.sample(&mut b).unwrap());
        }
    }

    #[test]
    fn apply_mask_degenerate_masks() {
        let x = random_image(2, 3, 8, 8, 4);
        assert_eq!(apply_mask(&x, &[Mask::all_ones(8, 8)]).unwrap(), x);
        let z = apply_mask(&x, &[Mask::all_zeros(8, 8)]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&x, &[Mask::all_ones(4, 8)]).is_err());
    }

    #[test]
    fn apply_mask_preserves_context_bitwise() {
        let x = random_image(1, 3, 16, 16, 5);
        let m = MaskSampler::new(MaskScheme::SingleSquare, (16, 16), (6, 6)).unwrap().sample(&mut rng(6)).unwrap();
        let y = apply_mask(&x, std::slice::from_ref(&m)).unwrap();
        for c in 0..3 {
            for p in 0..256 {
                let i = c * 256 + p;
                if m.keep()[p] {
                    assert_eq!(y.data()[i].to_bits(), x.data()[i].to_bits());
                } else {
                    assert_eq!(y.data()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn compose_degenerate_masks() {
        let x = random_image(2, 3, 8, 8, 7);
        let g = random_image(2, 3, 8, 8, 8);
        assert_eq!(compose_inpaint(&x, &g, &[Mask::all_ones(8, 8)]).unwrap(), x);
        assert_eq!(compose_inpaint(&x, &g, &[Mask::all_zeros(8, 8)]).unwrap(), g);
        assert!(compose_inpaint(&x, &random_image(1, 3, 8, 8, 1), &[Mask::all_ones(8, 8)]).is_err());
    }

    #[test]
    fn compose_gradient_is_hole_indicator() {
        let x = random_image(2, 2, 6, 6, 10).cast::<f64>();
        let g = random_image(2, 2, 6, 6, 11).cast::<f64>();
        let s = MaskSampler::new(MaskScheme::SingleSquare, (6, 6), (3, 3)).unwrap();
        let mut r = rng(12);
        let masks = [s.sample(&mut r).unwrap(), s.sample(&mut r).unwrap()];
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gv = tape.leaf(g, true);
        let xi = compose_inpaint_on(&mut tape, xv, gv, &masks).unwrap();
        let loss = tape.sum(xi).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dg = grads.get(gv).unwrap();
        for (i, &v) in dg.data().iter().enumerate() {
            let (s, p) = (i / 72, i % 36);
            let expected = if masks[s].keep()[p] { 0.0 } else { 1.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn downsample_shapes_and_constants() {
        let x = Tensor::<f32>::full(&[1, 3, 128, 128], 0.25);
        let d = downsample(&x, 4).unwrap();
        assert_eq!(d.shape(), &[1, 3, 32, 32]);
        assert!(d.data().iter().all(|&v| v == 0.25));
        let y = random_image(1, 3, 8, 8, 2);
        assert_eq!(downsample(&y, 1).unwrap(), y);
        assert!(downsample(&y, 3).is_err());
    }
}

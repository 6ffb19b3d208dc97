//! The eight symmetries of a square, applied as exact pixel permutations.
//!
//! `r` is a 90° clockwise rotation and `flip` a horizontal mirror. Element
//! `FlipR90` means "rotate, then mirror" (`flip ∘ r90`).

use rand::Rng;

use crate::image::{ImageBuffer, ImageError, NormalizedImage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dihedral {
    Id,
    R90,
    R180,
    R270,
    Flip,
    FlipR90,
    FlipR180,
    FlipR270,
}

impl Dihedral {
    /// Canonical enumeration order, used for test-time augmentation.
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Id,
        Dihedral::R90,
        Dihedral::R180,
        Dihedral::R270,
        Dihedral::Flip,
        Dihedral::FlipR90,
        Dihedral::FlipR180,
        Dihedral::FlipR270,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Uniformly drawn element, as used for train-time augmentation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    fn parts(self) -> (bool, u8) {
        let i = self as u8;
        (i >= 4, i % 4)
    }

    fn from_parts(flip: bool, quarter_turns: u8) -> Self {
        Self::ALL[usize::from(flip) * 4 + usize::from(quarter_turns % 4)]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let (fa, ka) = self.parts();
        let (fb, kb) = other.parts();
        // r^k ∘ flip = flip ∘ r^-k
        if fb {
            Self::from_parts(!fa, (kb + 4 - ka) % 4)
        } else {
            Self::from_parts(fa, ka + kb)
        }
    }

    pub fn inverse(self) -> Dihedral {
        match self.parts() {
            (false, k) => Self::from_parts(false, (4 - k) % 4),
            (true, _) => self,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Id => "id",
            Dihedral::R90 => "r90",
            Dihedral::R180 => "r180",
            Dihedral::R270 => "r270",
            Dihedral::Flip => "flip",
            Dihedral::FlipR90 => "flip∘r90",
            Dihedral::FlipR180 => "flip∘r180",
            Dihedral::FlipR270 => "flip∘r270",
        }
    }

    fn check_dims(self, h: usize, w: usize) -> Result<(), ImageError> {
        if self.parts().1 % 2 == 1 && h != w {
            return Err(ImageError::NotSquare("quarter-turn rotation", w, h));
        }
        Ok(())
    }

    /// Source coordinate `(y, x)` of output pixel `(y, x)`.
    #[inline]
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (flip, k) = self.parts();
        let x = if flip { w - 1 - x } else { x };
        match k {
            0 => (y, x),
            1 => (h - 1 - x, y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (x, w - 1 - y),
        }
    }

    /// Applies the transform to each channel of a planar image.
    pub fn apply(self, img: &NormalizedImage) -> Result<NormalizedImage, ImageError> {
        Ok(NormalizedImage::from_tensor_unchecked(self.apply_planar(img.tensor())?))
    }

    /// Applies the transform to each channel of a `[C,H,W]` tensor.
    pub fn apply_planar(self, t: &Tensor) -> Result<Tensor, ImageError> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] => (c, h, w),
            ref s => return Err(ImageError::Sizes(format!("expected [C,H,W], got {s:?}"))),
        };
        self.check_dims(h, w)?;
        if self == Dihedral::Id {
            return Ok(t.clone());
        }
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Ok(Tensor::new(vec![c, h, w], out).expect("dihedral dims"))
    }

    pub fn apply_buffer(self, img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
        let (h, w) = (img.height(), img.width());
        self.check_dims(h, w)?;
        let mut out = Vec::with_capacity(img.pixels().len());
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                out.extend(img.pixel(sx, sy));
            }
        }
        ImageBuffer::new(w, h, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n: usize) -> NormalizedImage {
        let vals = (0..n * n).map(|i| i as f64 / (n * n) as f64).collect();
        NormalizedImage::new(Tensor::new(vec![1, n, n], vals).unwrap()).unwrap()
    }

    #[test]
    fn r90_is_clockwise() {
        // [[a,b],[c,d]] -> [[c,a],[d,b]]
        let img = NormalizedImage::new(Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let r = Dihedral::R90.apply(&img).unwrap();
        assert_eq!(r.tensor().data(), &[0.3, 0.1, 0.4, 0.2]);
        let f = Dihedral::Flip.apply(&img).unwrap();
        assert_eq!(f.tensor().data(), &[0.2, 0.1, 0.4, 0.3]);
    }

    #[test]
    fn group_laws() {
        let img = labeled(4);
        let mut x = img.clone();
        for _ in 0..4 {
            x = Dihedral::R90.apply(&x).unwrap();
        }
        assert_eq!(x, img);
        let twice = Dihedral::Flip.apply(&Dihedral::Flip.apply(&img).unwrap()).unwrap();
        assert_eq!(twice, img);
        for g in Dihedral::ALL {
            assert_eq!(g.compose(g.inverse()), Dihedral::Id);
            let back = g.inverse().apply(&g.apply(&img).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn composition_matches_pixels() {
        let img = labeled(4);
        for a in Dihedral::ALL {
            for b in Dihedral::ALL {
                let seq = a.apply(&b.apply(&img).unwrap()).unwrap();
                assert_eq!(a.compose(b).apply(&img).unwrap(), seq, "{a:?} ∘ {b:?}");
            }
        }
    }

    #[test]
    fn non_square_quarter_turn_rejected() {
        let t = Tensor::new(vec![1, 2, 3], vec![0.0; 6]).unwrap();
        assert!(Dihedral::R90.apply_planar(&t).is_err());
        assert!(Dihedral::FlipR270.apply_planar(&t).is_err());
        let r = Dihedral::R180.apply_planar(&t).unwrap();
        assert_eq!(r.shape(), &[1, 2, 3]);
        assert!(Dihedral::Flip.apply_planar(&t).is_ok());
    }

    #[test]
    fn buffer_and_planar_agree() {
        let mut img = ImageBuffer::filled(5, 5, [0, 0, 0]);
        for y in 0..5 {
            for x in 0..5 {
                img.set_pixel(x, y, [(y * 5 + x) as u8, x as u8, y as u8]);
            }
        }
        for g in Dihedral::ALL {
            let via_buffer = crate::image::rescale_to_unit(&g.apply_buffer(&img).unwrap());
            let via_planar = g.apply(&crate::image::rescale_to_unit(&img)).unwrap();
            assert_eq!(via_buffer, via_planar);
        }
    }
}

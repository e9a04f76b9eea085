//! Geometric training augmentation: axis flips, in-plane transposition and
//! quarter-turn rotations.
//!
//! A drawn transform applies identically to the image, label and proximity
//! patches so their alignment is preserved. Transposition and rotation act
//! in the (y, x) plane and therefore require square in-plane dims. Every
//! transform is invertible; `apply_inverse` undoes `apply` exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeData};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentTransform {
    pub flip_z: bool,
    pub flip_y: bool,
    pub flip_x: bool,
    /// Swap the y and x axes.
    pub transpose: bool,
    /// Number of 90-degree turns in the (y, x) plane, 0..=3.
    pub rot_quarter: u8,
}

impl AugmentTransform {
    pub fn identity() -> Self {
        Self {
            flip_z: false,
            flip_y: false,
            flip_x: false,
            transpose: false,
            rot_quarter: 0,
        }
    }

    pub fn rotation(quarters: u8) -> Self {
        Self {
            rot_quarter: quarters % 4,
            ..Self::identity()
        }
    }

    /// Uniform draw: each flip with probability 1/2, transpose with
    /// probability 1/2, rotation count uniform over 0..=3.
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            flip_z: rng.random_bool(0.5),
            flip_y: rng.random_bool(0.5),
            flip_x: rng.random_bool(0.5),
            transpose: rng.random_bool(0.5),
            rot_quarter: rng.random_range(0..4u8),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn needs_square(&self) -> bool {
        self.transpose || !self.rot_quarter.is_multiple_of(4)
    }

    fn check(&self, v: &Volume) -> Result<()> {
        let [_, h, w] = v.shape();
        if self.needs_square() && h != w {
            return Err(Error::InvalidArg(format!(
                "transpose/rotation requires square in-plane dims, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Source voxel feeding output voxel `(z, y, x)` under `apply`.
    ///
    /// `apply` composes as flips(transpose(rotate(input))), so tracing an
    /// output voxel back runs the inverse steps in the same order.
    fn source_of(&self, shape: [usize; 3], z: usize, y: usize, x: usize) -> [usize; 3] {
        let [d, h, w] = shape;
        let (mut y, mut x) = (y, x);
        // undo flips
        let z = if self.flip_z { d - 1 - z } else { z };
        if self.flip_y {
            y = h - 1 - y;
        }
        if self.flip_x {
            x = w - 1 - x;
        }
        // undo transpose
        if self.transpose {
            std::mem::swap(&mut y, &mut x);
        }
        // undo rotation: rotate(y, x) = (x, h-1-y) per quarter turn
        for _ in 0..(4 - self.rot_quarter % 4) % 4 {
            let (ny, nx) = (x, h - 1 - y);
            y = ny;
            x = nx;
        }
        [z, y, x]
    }

    /// Image of an input voxel under `apply`; used to carry centerline
    /// points along with their volume.
    pub fn apply_to_point(&self, shape: [usize; 3], p: [usize; 3]) -> [usize; 3] {
        let [d, h, w] = shape;
        let (mut y, mut x) = (p[1], p[2]);
        for _ in 0..self.rot_quarter % 4 {
            let (ny, nx) = (x, h - 1 - y);
            y = ny;
            x = nx;
        }
        if self.transpose {
            std::mem::swap(&mut y, &mut x);
        }
        let z = if self.flip_z { d - 1 - p[0] } else { p[0] };
        if self.flip_y {
            y = h - 1 - y;
        }
        if self.flip_x {
            x = w - 1 - x;
        }
        [z, y, x]
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        self.check(v)?;
        let shape = v.shape();
        Ok(remap(v, |z, y, x| self.source_of(shape, z, y, x)))
    }

    pub fn apply_inverse(&self, v: &Volume) -> Result<Volume> {
        self.check(v)?;
        let shape = v.shape();
        // the forward map is a bijection; the inverse routes each output
        // voxel of `apply` back to its origin
        Ok(remap(v, |z, y, x| {
            
            self.apply_to_point(shape, [z, y, x])
        }))
    }
}

fn remap(v: &Volume, src: impl Fn(usize, usize, usize) -> [usize; 3]) -> Volume {
    let [d, h, w] = v.shape();
    match v.data() {
        VolumeData::F32(data) => {
            let mut out = Vec::with_capacity(data.len());
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let s = src(z, y, x);
                        out.push(data[(s[0] * h + s[1]) * w + s[2]]);
                    }
                }
            }
            Volume::from_f32([d, h, w], out).expect("same shape")
        }
        VolumeData::U8(data) => {
            let mut out = Vec::with_capacity(data.len());
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let s = src(z, y, x);
                        out.push(data[(s[0] * h + s[1]) * w + s[2]]);
                    }
                }
            }
            Volume::from_u8([d, h, w], out).expect("same shape")
        }
    }
}

/// Draw one transform and apply it to all three patches.
pub fn augment(
    image: &Volume,
    label: &Volume,
    proximity: &Volume,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume, Volume, AugmentTransform)> {
    let t = AugmentTransform::draw(rng);
    Ok((t.apply(image)?, t.apply(label)?, t.apply(proximity)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tagged_volume(shape: [usize; 3]) -> Volume {
        let data = (0..shape[0] * shape[1] * shape[2])
            .map(|i| i as f32)
            .collect();
        Volume::from_f32(shape, data).unwrap()
    }

    #[test]
    fn identity_leaves_patches_unchanged() {
        let v = tagged_volume([4, 4, 4]);
        let t = AugmentTransform::identity();
        assert_eq!(t.apply(&v).unwrap(), v);
    }

    #[test]
    fn apply_then_inverse_is_identity() {
        let v = tagged_volume([2, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..64 {
            let t = AugmentTransform::draw(&mut rng);
            let back = t.apply_inverse(&t.apply(&v).unwrap()).unwrap();
            assert_eq!(back, v, "transform {t:?}");
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let v = tagged_volume([2, 6, 6]);
        let r = AugmentTransform::rotation(1);
        let mut cur = v.clone();
        for _ in 0..4 {
            cur = r.apply(&cur).unwrap();
        }
        assert_eq!(cur, v);
        let once = r.apply(&v).unwrap();
        assert_ne!(once, v);
    }

    #[test]
    fn point_map_tracks_volume_map() {
        let v = tagged_volume([4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..32 {
            let t = AugmentTransform::draw(&mut rng);
            let out = t.apply(&v).unwrap();
            for p in [[0usize, 0, 0], [1, 2, 3], [3, 3, 0], [2, 0, 1]] {
                let q = t.apply_to_point([4, 4, 4], p);
                let tag = v.as_f32().unwrap()[v.idx(p[0], p[1], p[2])];
                let moved = out.as_f32().unwrap()[out.idx(q[0], q[1], q[2])];
                assert_eq!(tag, moved, "transform {t:?} point {p:?}");
            }
        }
    }

    #[test]
    fn non_square_plane_rejected_only_when_needed() {
        let v = tagged_volume([2, 4, 6]);
        let flip = AugmentTransform {
            flip_x: true,
            ..AugmentTransform::identity()
        };
        assert!(flip.apply(&v).is_ok());
        let rot = AugmentTransform::rotation(1);
        assert!(rot.apply(&v).is_err());
        let transpose = AugmentTransform {
            transpose: true,
            ..AugmentTransform::identity()
        };
        assert!(transpose.apply(&v).is_err());
    }

    #[test]
    fn same_transform_keeps_alignment() {
        // transform a sample's label and its centerline together; the
        // centerline must stay inside the transformed foreground
        let sample = &crate::synth::generate_synthetic(1, 16, 4).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..16 {
            let t = AugmentTransform::draw(&mut rng);
            let label = t.apply(&sample.label).unwrap();
            let bytes = label.as_u8().unwrap();
            for &p in sample.centerline.points() {
                let q = t.apply_to_point(sample.label.shape(), p);
                assert_eq!(bytes[label.idx(q[0], q[1], q[2])], 1, "{t:?}");
            }
        }
    }
}

//! Synthetic tubular volumes with known centerlines.
//!
//! Each sample contains 1-4 smooth random-walk tubes. The walk's rounded
//! positions form the centerline; dilating them to a radius of 2-4 voxels
//! forms the binary label. The image blends the label with low-frequency
//! background texture and Gaussian noise, clamped to [0, 1]. Generation is
//! a pure function of `(count, size, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{CenterlineSet, Volume};

pub const MIN_SIZE: usize = 16;

/// One generated training example.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Volume,
    pub label: Volume,
    pub centerline: CenterlineSet,
}

/// Rounded integer path of one smooth bounded random walk.
fn walk_centerline(size: usize, margin: f64, rng: &mut ChaCha8Rng) -> Vec<[usize; 3]> {
    let lo = margin;
    let hi = size as f64 - 1.0 - margin;
    let mut pos = [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ];
    let mut dir = random_unit(rng);
    let steps = (size as f64 * 1.5) as usize;
    let step_len = 0.7;

    let mut points: Vec<[usize; 3]> = Vec::with_capacity(steps);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..steps {
        let voxel = [
            pos[0].round() as usize,
            pos[1].round() as usize,
            pos[2].round() as usize,
        ];
        if seen.insert(voxel) {
            points.push(voxel);
        }
        // smooth the heading, then reflect off the margins
        let jitter = random_unit(rng);
        for a in 0..3 {
            dir[a] += 0.35 * jitter[a];
        }
        normalize(&mut dir);
        for a in 0..3 {
            let next = pos[a] + step_len * dir[a];
            if next < lo || next > hi {
                dir[a] = -dir[a];
            }
            pos[a] = (pos[a] + step_len * dir[a]).clamp(lo, hi);
        }
    }
    points
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn normalize(v: &mut [f64; 3]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
    for a in v {
        *a /= n;
    }
}

/// Dilate centerline points into a solid tube of the given radius.
pub fn rasterize_tube(points: &[[usize; 3]], radius: usize, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size * size];
    let r = radius as i64;
    let r2 = (radius * radius) as i64;
    for p in points {
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dz * dz + dy * dy + dx * dx > r2 {
                        continue;
                    }
                    let z = p[0] as i64 + dz;
                    let y = p[1] as i64 + dy;
                    let x = p[2] as i64 + dx;
                    if z < 0 || y < 0 || x < 0 {
                        continue;
                    }
                    let (z, y, x) = (z as usize, y as usize, x as usize);
                    if z < size && y < size && x < size {
                        mask[(z * size + y) * size + x] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Low-frequency value noise: trilinear interpolation of a coarse random
/// grid, values in [0, 1].
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let grid_n = size.div_ceil(cell) + 1;
    let grid: Vec<f64> = (0..grid_n * grid_n * grid_n)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let gidx = |z: usize, y: usize, x: usize| (z * grid_n + y) * grid_n + x;
    let mut out = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let (gz, fz) = (z / cell, (z % cell) as f64 / cell as f64);
                let (gy, fy) = (y / cell, (y % cell) as f64 / cell as f64);
                let (gx, fx) = (x / cell, (x % cell) as f64 / cell as f64);
                let c = |dz: usize, dy: usize, dx: usize| grid[gidx(gz + dz, gy + dy, gx + dx)];
                let v00 = c(0, 0, 0) * (1.0 - fx) + c(0, 0, 1) * fx;
                let v01 = c(0, 1, 0) * (1.0 - fx) + c(0, 1, 1) * fx;
                let v10 = c(1, 0, 0) * (1.0 - fx) + c(1, 0, 1) * fx;
                let v11 = c(1, 1, 0) * (1.0 - fx) + c(1, 1, 1) * fx;
                let v0 = v00 * (1.0 - fy) + v01 * fy;
                let v1 = v10 * (1.0 - fy) + v11 * fy;
                out.push(v0 * (1.0 - fz) + v1 * fz);
            }
        }
    }
    out
}

fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style mixing keeps per-sample streams independent
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `count` cubic samples of edge length `size`.
pub fn generate_synthetic(count: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArg(format!(
            "sample size must be at least {MIN_SIZE}, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArg("sample count must be positive".into()));
    }
    (0..count)
        .map(|i| generate_one(size, sub_seed(seed, i as u64)))
        .collect()
}

fn generate_one(size: usize, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tubes = rng.random_range(1..=4usize);

    let mut label = vec![false; size * size * size];
    let mut centerline_points = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n_tubes {
        let radius = rng.random_range(2..=4usize);
        let points = walk_centerline(size, radius as f64 + 1.0, &mut rng);
        let tube = rasterize_tube(&points, radius, size);
        for (m, t) in label.iter_mut().zip(tube) {
            *m |= t;
        }
        for p in points {
            if seen.insert(p) {
                centerline_points.push(p);
            }
        }
    }

    let background = value_noise(size, 8, &mut rng);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut image = Vec::with_capacity(label.len());
    for (i, &fg) in label.iter().enumerate() {
        let base = if fg { 0.75 } else { 0.15 + 0.3 * background[i] };
        image.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
    }

    Ok(SyntheticSample {
        image: Volume::from_f32([size, size, size], image)?,
        label: Volume::from_u8(
            [size, size, size],
            label.into_iter().map(u8::from).collect(),
        )?,
        centerline: CenterlineSet::new(centerline_points)?,
    })
}

/// Copy a sub-volume starting at `corner`.
pub fn extract_patch(v: &Volume, corner: [usize; 3], patch: [usize; 3]) -> Result<Volume> {
    let shape = v.shape();
    for a in 0..3 {
        if corner[a] + patch[a] > shape[a] {
            return Err(Error::InvalidArg(format!(
                "patch {patch:?} at corner {corner:?} exceeds volume shape {shape:?}"
            )));
        }
    }
    match v.data() {
        crate::volume::VolumeData::F32(data) => {
            let mut out = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let row = v.idx(corner[0] + z, corner[1] + y, corner[2]);
                    out.extend_from_slice(&data[row..row + patch[2]]);
                }
            }
            Volume::from_f32(patch, out)
        }
        crate::volume::VolumeData::U8(data) => {
            let mut out = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
            for z in 0..patch[0] {
                for y in 0..patch[1] {
                    let row = v.idx(corner[0] + z, corner[1] + y, corner[2]);
                    out.extend_from_slice(&data[row..row + patch[2]]);
                }
            }
            Volume::from_u8(patch, out)
        }
    }
}

/// Draw one random corner (uniform over valid positions) and cut the same
/// patch out of all three volumes.
pub fn sample_patch(
    image: &Volume,
    label: &Volume,
    proximity: &Volume,
    patch: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume, Volume)> {
    let shape = image.shape();
    if label.shape() != shape || proximity.shape() != shape {
        return Err(Error::Shape(format!(
            "image/label/proximity shapes differ: {:?} / {:?} / {:?}",
            shape,
            label.shape(),
            proximity.shape()
        )));
    }
    for a in 0..3 {
        if patch[a] > shape[a] {
            return Err(Error::InvalidArg(format!(
                "patch shape {patch:?} exceeds volume shape {shape:?}"
            )));
        }
    }
    let corner = [
        rng.random_range(0..=shape[0] - patch[0]),
        rng.random_range(0..=shape[1] - patch[1]),
        rng.random_range(0..=shape[2] - patch[2]),
    ];
    Ok((
        extract_patch(image, corner, patch)?,
        extract_patch(label, corner, patch)?,
        extract_patch(proximity, corner, patch)?,
    ))
}

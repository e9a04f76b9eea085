//! Centerline proximity score maps, the regression target of the auxiliary
//! detection task.
//!
//! The score of a voxel x is an exponential of its Euclidean distance
//! `D_C(x)` to the nearest centerline point:
//!
//! ```text
//! raw(x) = exp(alpha * (1 - D_C(x)/d_M)) - 1   if D_C(x) < d_M
//!          0                                    otherwise
//! ```
//!
//! `raw` peaks at `exp(alpha) - 1` on the centerline and vanishes at
//! distance `d_M`. The normalized map divides by that peak so a sigmoid
//! head can regress it directly; the raw map is kept alongside.

use crate::error::{Error, Result};
use crate::volume::{CenterlineSet, Volume};

const FAR: f64 = 1e20;

/// Proximity scores for one volume, in both raw and normalized form.
#[derive(Clone, Debug)]
pub struct ProximityMap {
    pub raw: Volume,
    pub normalized: Volume,
    pub alpha: f64,
    pub d_max: f64,
}

/// 1-D squared distance transform via the lower envelope of parabolas.
/// `f` holds per-cell seed costs (0 at seeds, FAR elsewhere) at stride
/// `stride`; results are written back in place.
fn dt1d(
    f: &mut [f64],
    offset: usize,
    stride: usize,
    n: usize,
    v: &mut [usize],
    z: &mut [f64],
    d: &mut [f64],
) {
    let at = |f: &[f64], i: usize| f[offset + i * stride];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -FAR;
    z[1] = FAR;
    for q in 1..n {
        let fq = at(f, q) + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (at(f, p) + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    // q dominates everywhere; replace the only parabola
                    v[0] = q;
                    z[0] = -FAR;
                    z[1] = FAR;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = FAR;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + at(f, p);
    }
    for q in 0..n {
        f[offset + q * stride] = d[q];
    }
}

/// Exact per-voxel Euclidean distance (in voxel units) to the nearest
/// centerline point, computed with the separable squared-distance
/// lower-envelope transform.
pub fn distance_to_centerline(shape: [usize; 3], centerline: &CenterlineSet) -> Result<Volume> {
    if centerline.is_empty() {
        return Err(Error::InvalidArg(
            "distance transform requires a non-empty centerline".into(),
        ));
    }
    if !centerline.in_bounds(shape) {
        return Err(Error::InvalidArg(format!(
            "centerline point outside volume shape {shape:?}"
        )));
    }
    let [d, h, w] = shape;
    let mut sq = vec![FAR; d * h * w];
    for p in centerline.points() {
        sq[(p[0] * h + p[1]) * w + p[2]] = 0.0;
    }

    let maxdim = d.max(h).max(w);
    let mut v = vec![0usize; maxdim];
    let mut z = vec![0f64; maxdim + 1];
    let mut buf = vec![0f64; maxdim];

    // along x
    for zi in 0..d {
        for yi in 0..h {
            dt1d(&mut sq, (zi * h + yi) * w, 1, w, &mut v, &mut z, &mut buf);
        }
    }
    // along y
    for zi in 0..d {
        for xi in 0..w {
            dt1d(&mut sq, zi * h * w + xi, w, h, &mut v, &mut z, &mut buf);
        }
    }
    // along z
    for yi in 0..h {
        for xi in 0..w {
            dt1d(&mut sq, yi * w + xi, h * w, d, &mut v, &mut z, &mut buf);
        }
    }

    Volume::from_f32(shape, sq.into_iter().map(|s| s.sqrt() as f32).collect())
}

/// Reference O(voxels x points) distance computation used to verify the
/// transform above. Kept deliberately naive and independent.
pub fn distance_to_centerline_brute(
    shape: [usize; 3],
    centerline: &CenterlineSet,
) -> Result<Volume> {
    if centerline.is_empty() {
        return Err(Error::InvalidArg(
            "distance transform requires a non-empty centerline".into(),
        ));
    }
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(d * h * w);
    for zi in 0..d {
        for yi in 0..h {
            for xi in 0..w {
                let mut best = f64::INFINITY;
                for p in centerline.points() {
                    let dz = zi as f64 - p[0] as f64;
                    let dy = yi as f64 - p[1] as f64;
                    let dx = xi as f64 - p[2] as f64;
                    let sq = dz * dz + dy * dy + dx * dx;
                    if sq < best {
                        best = sq;
                    }
                }
                out.push(best.sqrt() as f32);
            }
        }
    }
    Volume::from_f32(shape, out)
}

/// Pointwise proximity score of a distance value.
pub fn proximity_score(dist: f64, alpha: f64, d_max: f64) -> f64 {
    if dist < d_max {
        (alpha * (1.0 - dist / d_max)).exp() - 1.0
    } else {
        0.0
    }
}

/// Builds raw and normalized proximity maps from a centerline.
pub fn proximity_map(
    shape: [usize; 3],
    centerline: &CenterlineSet,
    alpha: f64,
    d_max: f64,
) -> Result<ProximityMap> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if d_max <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "d_M must be positive, got {d_max}"
        )));
    }
    let dist = distance_to_centerline(shape, centerline)?;
    let peak = alpha.exp() - 1.0;
    let mut raw = Vec::with_capacity(dist.numel());
    let mut norm = Vec::with_capacity(dist.numel());
    for &dv in dist.as_f32()? {
        let s = proximity_score(dv as f64, alpha, d_max);
        raw.push(s as f32);
        norm.push((s / peak) as f32);
    }
    Ok(ProximityMap {
        raw: Volume::from_f32(shape, raw)?,
        normalized: Volume::from_f32(shape, norm)?,
        alpha,
        d_max,
    })
}

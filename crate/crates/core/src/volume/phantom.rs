//! Synthetic organ phantoms.
//!
//! The organ is an ellipse swept through depth: its in-plane radii,
//! eccentricity, orientation and centre drift from slice to slice, and it
//! tapers to nothing at both ends like an ellipsoid. `shape_variability`
//! scales every per-slice change; at zero the shape is a straight prism with
//! one fixed cross-section. The image adds banded background texture,
//! low-contrast distractor blobs and Gaussian noise, then min-max
//! normalises to `[0, 1]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Volume, VolumeKind};
use crate::error::{Error, Result};

/// One image/label pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub label: Volume,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub shape_variability: f64,
    pub noise_std: f64,
    pub distractors: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams { dims: [32, 64, 64], shape_variability: 1.0, noise_std: 0.04, distractors: 3 }
    }
}

const ORGAN_LEVEL: f64 = 0.72;
const DISTRACTOR_LEVEL: f64 = 0.5;
const BACKGROUND_LEVEL: f64 = 0.3;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let q = -dx * s + dy * c;
        (u / self.rx).powi(2) + (q / self.ry).powi(2) <= 1.0
    }
}

pub fn generate_phantom(seed: u64, dims: [usize; 3], shape_variability: f64) -> Result<(Volume, Volume)> {
    generate_with(seed, &PhantomParams { dims, shape_variability, ..PhantomParams::default() })
}

pub fn generate_with(seed: u64, params: &PhantomParams) -> Result<(Volume, Volume)> {
    let [d, l, w] = params.dims;
    if params.dims.iter().any(|&n| n < 16) {
        return Err(Error::Invalid(format!("phantom extents must be >= 16, got {:?}", params.dims)));
    }
    let v = params.shape_variability;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Invalid(format!("shape variability {v} outside [0, 1]")));
    }
    let (df, lf, wf) = (d as f64, l as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let (cy0, cx0) = (lf * u(0.38, 0.62), wf * u(0.38, 0.62));
    let (ry0, rx0) = (lf * u(0.10, 0.14), wf * u(0.15, 0.20));
    let (zc, hz) = (df * u(0.42, 0.58), df * u(0.32, 0.40));
    let theta0 = u(-0.6, 0.6);
    let phase: Vec<f64> = (0..3).map(|_| u(0.0, 2.0 * PI)).collect();
    let freq: Vec<f64> = (0..3).map(|_| u(1.5, 3.0)).collect();
    let drift_y = lf * u(0.03, 0.06);
    let drift_x = wf * u(0.05, 0.09) * if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };

    let organ_at = |z: usize| -> Option<Ellipse> {
        let t = (z as f64 + 0.5 - zc) / hz;
        let profile = 1.0 - v * t * t;
        if profile <= 0.0 {
            return None;
        }
        let s = profile.sqrt();
        Some(Ellipse {
            cy: cy0 + v * drift_y * (freq[2] * t + phase[2]).sin(),
            cx: cx0 + v * drift_x * t,
            ry: ry0 * s * (1.0 + 0.3 * v * (freq[0] * t + phase[0]).sin()),
            rx: rx0 * s * (1.0 + 0.3 * v * (freq[1] * t + phase[1]).sin()),
            theta: theta0 + 0.4 * v * t,
        })
    };

    // (centre z, y, x), (radii z, y, x)
    let distractors: Vec<([f64; 3], [f64; 3])> = (0..params.distractors)
        .map(|_| {
            (
                [df * u(0.1, 0.9), lf * u(0.15, 0.85), wf * u(0.15, 0.85)],
                [hz * u(0.3, 0.8), ry0 * u(0.6, 1.2), rx0 * u(0.6, 1.2)],
            )
        })
        .collect();
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| [u(1.0, 4.0) / df, u(1.0, 4.0) / lf, u(1.0, 4.0) / wf, u(0.0, 2.0 * PI)])
        .collect();

    let n = d * l * w;
    let mut label = vec![0.0; n];
    let mut image = vec![0.0; n];
    let noise = Normal::new(0.0, params.noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    for z in 0..d {
        let organ = organ_at(z);
        for y in 0..l {
            for x in 0..w {
                let i = (z * l + y) * w + x;
                let (zf, yf, xf) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let texture: f64 = waves
                    .iter()
                    .map(|wv| 0.04 * (2.0 * PI * (wv[0] * zf + wv[1] * yf + wv[2] * xf) + wv[3]).cos())
                    .sum();
                let inside = organ.as_ref().is_some_and(|e| e.contains(yf, xf));
                let in_distractor = distractors.iter().any(|(c, r)| {
                    ((zf - c[0]) / r[0]).powi(2) + ((yf - c[1]) / r[1]).powi(2) + ((xf - c[2]) / r[2]).powi(2) <= 1.0
                });
                let base = if inside {
                    label[i] = 1.0;
                    ORGAN_LEVEL + 0.5 * texture
                } else if in_distractor {
                    DISTRACTOR_LEVEL + texture
                } else {
                    BACKGROUND_LEVEL + texture
                };
                image[i] = base + noise.sample(&mut rng);
            }
        }
    }
    let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    image.iter_mut().for_each(|v| *v = (*v - lo) / span);
    Ok((
        Volume::new(params.dims, image, VolumeKind::Image)?,
        Volume::new(params.dims, label, VolumeKind::Label)?,
    ))
}

/// `n` cases whose seeds are drawn from a generator seeded with `seed`.
pub fn generate_dataset(n: usize, seed: u64, params: &PhantomParams) -> Result<Vec<Case>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let case_seed: u64 = master.random();
            let (image, label) = generate_with(case_seed, params)?;
            Ok(Case { id: format!("case{i:03}"), image, label })
        })
        .collect()
}

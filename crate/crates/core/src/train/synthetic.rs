//! Deterministic labeled scenes: a noisy floor and back wall with one to three
//! colored objects (sphere, box or blob) marked salient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::config::Regime;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const MIN_SCENE_POINTS: usize = 64;
/// Upper bound on the salient fraction in the small-object regime.
pub const SMALL_OBJECT_FRACTION: f64 = 0.03;

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.9],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Sphere,
    Box,
    Blob,
}

/// Seed of scene `index` in split `split` (0 = train, 1 = test).
pub fn scene_seed(data_seed: u64, split: u64, index: u64) -> u64 {
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 40)
        .wrapping_add(index)
}

/// Same seed and settings give a bit-identical scene.
pub fn gen_synthetic_scene(seed: u64, points: usize, regime: Regime) -> Result<PointCloud> {
    if points < MIN_SCENE_POINTS {
        return Err(Error::contract(format!(
            "synthetic scenes need at least {MIN_SCENE_POINTS} points, got {points}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regime = match regime {
        Regime::Mixed => [Regime::Default, Regime::Small, Regime::Multi][(seed % 3) as usize],
        r => r,
    };
    let (objects, fraction) = match regime {
        Regime::Small => (1, rng.random_range(0.015..SMALL_OBJECT_FRACTION)),
        Regime::Multi => (rng.random_range(2..=3), rng.random_range(0.2..0.4)),
        _ => (1, rng.random_range(0.15..0.3)),
    };
    let salient = ((fraction * points as f64).floor() as usize).max(objects);
    let small = regime == Regime::Small;

    let mut coords = Vec::with_capacity(points);
    let mut colors = Vec::with_capacity(points);
    let mut labels = Vec::with_capacity(points);

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut palette: Vec<usize> = (0..PALETTE.len()).collect();
    palette.shuffle(&mut rng);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    for o in 0..objects {
        let count = salient / objects + usize::from(o < salient % objects);
        let radius = if small {
            rng.random_range(0.06..0.1)
        } else {
            rng.random_range(0.18..0.32)
        };
        let mut centre = [0.0; 2];
        for _ in 0..32 {
            centre = [rng.random_range(0.35..1.65), rng.random_range(0.35..1.5)];
            if placed
                .iter()
                .all(|(c, r)| ((c[0] - centre[0]).powi(2) + (c[1] - centre[1]).powi(2)).sqrt() > r + radius + 0.05)
            {
                break;
            }
        }
        placed.push((centre, radius));
        let shape = [Shape::Sphere, Shape::Box, Shape::Blob][rng.random_range(0..3)];
        let base = PALETTE[palette[o % PALETTE.len()]];
        for _ in 0..count {
            let local = match shape {
                Shape::Sphere => {
                    let d: [f64; 3] = UnitSphere.sample(&mut rng);
                    [d[0] * radius, d[1] * radius, d[2] * radius + radius]
                }
                Shape::Box => {
                    let mut p = [
                        rng.random_range(-radius..radius),
                        rng.random_range(-radius..radius),
                        rng.random_range(0.0..2.0 * radius),
                    ];
                    // snap to a face: x, y or top
                    match rng.random_range(0..3) {
                        0 => p[0] = if rng.random_bool(0.5) { radius } else { -radius },
                        1 => p[1] = if rng.random_bool(0.5) { radius } else { -radius },
                        _ => p[2] = 2.0 * radius,
                    }
                    p
                }
                Shape::Blob => {
                    let s = radius * 0.5;
                    let z: f64 = noise.sample(&mut rng);
                    [noise.sample(&mut rng) * s, noise.sample(&mut rng) * s, radius + z * s]
                }
            };
            coords.push([centre[0] + local[0], centre[1] + local[1], local[2].max(0.0)]);
            colors.push(jitter(&mut rng, base, 0.05));
            labels.push(true);
        }
    }

    let background = points - coords.len();
    let floor_tone = [rng.random_range(0.35..0.55), rng.random_range(0.32..0.5), rng.random_range(0.28..0.45)];
    let wall_tone = [rng.random_range(0.55..0.75); 3];
    for _ in 0..background {
        let on_wall = rng.random_bool(0.3);
        let (p, tone) = if on_wall {
            let p = [rng.random_range(0.0..2.0), 2.0 + 0.01 * noise.sample(&mut rng), rng.random_range(0.0..1.0)];
            (p, wall_tone)
        } else {
            let p = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), 0.01 * noise.sample(&mut rng)];
            (p, floor_tone)
        };
        coords.push(p);
        colors.push(jitter(&mut rng, tone, 0.06));
        labels.push(false);
    }

    let mut order: Vec<usize> = (0..points).collect();
    order.shuffle(&mut rng);
    PointCloud::new(
        order.iter().map(|&i| coords[i]).collect(),
        order.iter().map(|&i| colors[i]).collect(),
        Some(order.iter().map(|&i| labels[i]).collect()),
    )
}

/// Jittered color, quantized to 8 bits like scanner output.
fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| ((c + rng.random_range(-amount..amount)).clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

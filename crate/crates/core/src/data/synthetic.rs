//! Procedural fundus-like images for fixtures and tests.
//!
//! A circular field of view on a reddish background with radial shading
//! and noise; dark branching curves of width 1–3 px stand in for vessels.

use super::FundusSample;
use crate::tensor::Rng;

pub fn synthetic_sample(id: u32, size: usize, rng: &mut Rng) -> FundusSample {
    let n = size * size;
    let center = (size as f64 - 1.0) / 2.0;
    let radius = 0.46 * size as f64;
    let fov: Vec<u8> = (0..n)
        .map(|p| {
            let (r, c) = ((p / size) as f64, (p % size) as f64);
            u8::from(((r - center).powi(2) + (c - center).powi(2)).sqrt() <= radius)
        })
        .collect();

    // vessel strength in [0, 1] per pixel
    let mut vessel = vec![0f64; n];
    let disc = (
        center + rng.uniform(-0.15, 0.15) * size as f64,
        center + rng.uniform(-0.25, 0.25) * size as f64,
    );
    let trunks = 4 + rng.below(3) as usize;
    for t in 0..trunks {
        let angle = std::f64::consts::TAU * (t as f64 + rng.uniform(0.0, 0.6)) / trunks as f64;
        let width = rng.uniform(1.2, 2.4);
        draw_branch(&mut vessel, size, disc, angle, width, 2, rng);
    }

    let mut image = vec![0u8; 3 * n];
    let mut truth = vec![0u8; n];
    let (tint_r, tint_g, tint_b) = (
        rng.uniform(150.0, 200.0),
        rng.uniform(60.0, 95.0),
        rng.uniform(25.0, 45.0),
    );
    for p in 0..n {
        if fov[p] == 0 {
            for c in 0..3 {
                image[3 * p + c] = rng.below(6) as u8;
            }
            continue;
        }
        let (r, c) = ((p / size) as f64, (p % size) as f64);
        let shade =
            1.0 - 0.35 * (((r - center).powi(2) + (c - center).powi(2)).sqrt() / radius).powi(2);
        let dark = vessel[p];
        if dark >= 0.5 {
            truth[p] = 1;
        }
        let base = [tint_r * shade, tint_g * shade, tint_b * shade];
        let depth = [0.35, 0.55, 0.45];
        for ch in 0..3 {
            let v = base[ch] * (1.0 - depth[ch] * dark) + rng.gaussian(0.0, 6.0);
            image[3 * p + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    FundusSample::new(id, size, size, image, truth, fov).expect("consistent synthetic rasters")
}

fn draw_branch(
    vessel: &mut [f64],
    size: usize,
    start: (f64, f64),
    angle: f64,
    width: f64,
    depth: u32,
    rng: &mut Rng,
) {
    let (mut y, mut x) = start;
    let mut heading = angle;
    let steps = (size as f64 * rng.uniform(0.35, 0.6)) as usize;
    for step in 0..steps {
        heading += rng.gaussian(0.0, 0.12);
        y += heading.sin();
        x += heading.cos();
        if y < 0.0 || x < 0.0 || y >= size as f64 || x >= size as f64 {
            return;
        }
        stamp(vessel, size, y, x, width / 2.0);
        if depth > 0 && step > 3 && rng.next_f64() < 0.06 {
            let side = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            draw_branch(
                vessel,
                size,
                (y, x),
                heading + side * rng.uniform(0.4, 1.0),
                (width * 0.7).max(1.0),
                depth - 1,
                rng,
            );
        }
    }
}

fn stamp(vessel: &mut [f64], size: usize, y: f64, x: f64, radius: f64) {
    let reach = radius.ceil() as isize + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (r, c) = (y.round() as isize + dy, x.round() as isize + dx);
            if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
                continue;
            }
            let d = ((r as f64 - y).powi(2) + (c as f64 - x).powi(2)).sqrt();
            let v = (1.0 - (d - radius).max(0.0)).clamp(0.0, 1.0);
            let cell = &mut vessel[r as usize * size + c as usize];
            *cell = cell.max(v);
        }
    }
}

/// The fixture dataset: training ids 21–40 and test ids 01–20 at `size`².
pub fn synthetic_dataset(size: usize, seed: u64) -> (Vec<FundusSample>, Vec<FundusSample>) {
    let mut rng = Rng::new(seed);
    let train = super::TRAIN_IDS
        .map(|id| synthetic_sample(id, size, &mut rng))
        .collect();
    let test = super::TEST_IDS
        .map(|id| synthetic_sample(id, size, &mut rng))
        .collect();
    (train, test)
}

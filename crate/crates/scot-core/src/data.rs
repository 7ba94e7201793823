//! Toy 2-D distributions and the noise source, all counter-addressed: a draw
//! is a pure function of `(seed, stream name, absolute row index)`, so any
//! slice of any dataset can be regenerated independently of order or batch
//! size.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::linalg::Mat;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Ring8,
    TwoMoons,
    Checkerboard,
    Spiral,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Ring8 => "ring8",
            Dataset::TwoMoons => "two_moons",
            Dataset::Checkerboard => "checkerboard",
            Dataset::Spiral => "spiral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ring8" => Some(Dataset::Ring8),
            "two_moons" => Some(Dataset::TwoMoons),
            "checkerboard" => Some(Dataset::Checkerboard),
            "spiral" => Some(Dataset::Spiral),
            _ => None,
        }
    }
}

pub const RING8_RADIUS: f64 = 2.0;
pub const RING8_SIGMA: f64 = 0.1;

/// Center of ring mode `k` (of 8), counterclockwise from the positive x axis.
pub fn ring8_center(k: usize) -> (f64, f64) {
    assert!(k < 8);
    let theta = 2.0 * PI * k as f64 / 8.0;
    (RING8_RADIUS * theta.cos(), RING8_RADIUS * theta.sin())
}

/// `rows` data points starting at absolute row `row0`.
pub fn sample(ds: Dataset, seed: u64, stream: &str, row0: usize, rows: usize) -> Mat {
    let choice = StreamRng::new(seed, &format!("{stream}/choice"));
    let gauss = StreamRng::new(seed, &format!("{stream}/gauss"));
    let unif = StreamRng::new(seed, &format!("{stream}/uniform"));
    let mut m = Mat::zeros(rows, 2);
    for r in 0..rows {
        let i = (row0 + r) as u64;
        let (x, y) = match ds {
            Dataset::Ring8 => {
                let k = choice.index_at(i, 8);
                let (cx, cy) = ring8_center(k);
                let (a, b) = gauss.normal_pair_at(i);
                (cx + RING8_SIGMA * a, cy + RING8_SIGMA * b)
            }
            Dataset::TwoMoons => {
                let branch = choice.index_at(i, 2);
                let phi = PI * unif.uniform_at(i);
                // Interleaved crescents, centered and scaled to ~[-2.5, 2.5].
                let (mx, my) = if branch == 0 {
                    (phi.cos(), phi.sin())
                } else {
                    (1.0 - phi.cos(), 0.5 - phi.sin())
                };
                let (a, b) = gauss.normal_pair_at(i);
                (2.0 * (mx - 0.5) + 0.1 * a, 2.0 * (my - 0.25) + 0.1 * b)
            }
            Dataset::Checkerboard => {
                // Unit cells of alternating parity tiling [-2, 2]^2.
                let cx = choice.index_at(2 * i, 4);
                let cy = 2 * choice.index_at(2 * i + 1, 2) + (cx & 1);
                let u = unif.uniform_at(2 * i);
                let v = unif.uniform_at(2 * i + 1);
                (-2.0 + cx as f64 + u, -2.0 + cy as f64 + v)
            }
            Dataset::Spiral => {
                // Single Archimedean arm, radius 0.25 -> 2 over two turns.
                let u = unif.uniform_at(i);
                let theta = 4.0 * PI * u;
                let radius = 0.25 + 1.75 * u;
                let (a, b) = gauss.normal_pair_at(i);
                (radius * theta.cos() + 0.05 * a, radius * theta.sin() + 0.05 * b)
            }
        };
        m.set(r, 0, x);
        m.set(r, 1, y);
    }
    m
}

/// Standard-normal rows (the `t = 1` endpoint of every trajectory).
pub fn sample_noise(seed: u64, stream: &str, row0: usize, rows: usize, cols: usize) -> Mat {
    let s = StreamRng::new(seed, stream);
    let pairs = cols.div_ceil(2);
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for p in 0..pairs {
            let (a, b) = s.normal_pair_at(((row0 + r) * pairs + p) as u64);
            let row = m.row_mut(r);
            row[2 * p] = a;
            if 2 * p + 1 < cols {
                row[2 * p + 1] = b;
            }
        }
    }
    m
}

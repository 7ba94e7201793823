//! Sample-quality and trajectory-shape metrics.
//!
//! Distribution distances compare equal-sized point sets: sliced Wasserstein-2
//! averages one-dimensional optimal transport over random directions, and the
//! Gaussian Fréchet distance compares fitted means/covariances in closed form
//! (2x2 only). Trajectory metrics score the traces produced by the solvers
//! and samplers: chord deviation for straightness, and the jump-disagreement
//! gap for consistency.

use crate::linalg::Mat;
use crate::rng::StreamRng;
use crate::sampler::ProjectionMap;

/// Sliced Wasserstein-2: mean over `n_dirs` random unit directions of the 1-D
/// W2 between the projected samples (equal weights, equal counts).
pub fn sliced_w2(a: &Mat, b: &Mat, n_dirs: usize, seed: u64, stream: &str) -> f64 {
    assert_eq!(a.cols(), b.cols(), "dimension mismatch");
    assert_eq!(a.rows(), b.rows(), "sliced W2 wants equal sample counts");
    assert!(a.rows() > 0 && n_dirs > 0);
    let dim = a.cols();
    let s = StreamRng::new(seed, stream);
    let mut total = 0.0;
    for d in 0..n_dirs {
        // Isotropic direction from normalized Gaussian draws.
        let mut dir = vec![0.0; dim];
        let mut norm_sq = 0.0;
        for (j, slot) in dir.iter_mut().enumerate() {
            *slot = s.normal_at((d * dim + j) as u64);
            norm_sq += *slot * *slot;
        }
        let norm = norm_sq.sqrt();
        assert!(norm > 0.0, "degenerate direction draw");
        for slot in dir.iter_mut() {
            *slot /= norm;
        }

        let project = |m: &Mat| -> Vec<f64> {
            let mut p: Vec<f64> = (0..m.rows())
                .map(|r| m.row(r).iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect();
            p.sort_by(|x, y| x.partial_cmp(y).unwrap());
            p
        };
        let pa = project(a);
        let pb = project(b);
        let msq: f64 =
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64;
        total += msq.sqrt();
    }
    total / n_dirs as f64
}

/// Mean and (population) covariance of a 2-D point set.
fn gaussian_fit(m: &Mat) -> ([f64; 2], [f64; 3]) {
    assert_eq!(m.cols(), 2, "Gaussian fit is 2-D only");
    assert!(m.rows() > 1);
    let n = m.rows() as f64;
    let mut mu = [0.0; 2];
    for r in 0..m.rows() {
        mu[0] += m.get(r, 0);
        mu[1] += m.get(r, 1);
    }
    mu[0] /= n;
    mu[1] /= n;
    // xx, xy, yy
    let mut cov = [0.0; 3];
    for r in 0..m.rows() {
        let dx = m.get(r, 0) - mu[0];
        let dy = m.get(r, 1) - mu[1];
        cov[0] += dx * dx;
        cov[1] += dx * dy;
        cov[2] += dy * dy;
    }
    cov[0] /= n;
    cov[1] /= n;
    cov[2] /= n;
    (mu, cov)
}

/// Fréchet distance between two 2-D Gaussians given as mean + covariance
/// `[xx, xy, yy]`. Uses the 2x2 identity
/// `tr((A B)^1/2) = sqrt(tr(A B) + 2 sqrt(det A det B))`.
pub fn frechet_gaussians(mu_a: [f64; 2], cov_a: [f64; 3], mu_b: [f64; 2], cov_b: [f64; 3]) -> f64 {
    let dmu = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2);
    let tr_a = cov_a[0] + cov_a[2];
    let tr_b = cov_b[0] + cov_b[2];
    let det_a = cov_a[0] * cov_a[2] - cov_a[1] * cov_a[1];
    let det_b = cov_b[0] * cov_b[2] - cov_b[1] * cov_b[1];
    // tr(A B) for symmetric 2x2.
    let tr_ab = cov_a[0] * cov_b[0] + 2.0 * cov_a[1] * cov_b[1] + cov_a[2] * cov_b[2];
    let cross = (tr_ab + 2.0 * (det_a.max(0.0) * det_b.max(0.0)).sqrt()).max(0.0).sqrt();
    let d2 = dmu + tr_a + tr_b - 2.0 * cross;
    d2.max(0.0).sqrt()
}

/// Fréchet distance between the Gaussian fits of two 2-D point sets.
pub fn gaussian_frechet(a: &Mat, b: &Mat) -> f64 {
    let (mu_a, cov_a) = gaussian_fit(a);
    let (mu_b, cov_b) = gaussian_fit(b);
    frechet_gaussians(mu_a, cov_a, mu_b, cov_b)
}

/// Chord deviation of each trajectory in a trace: the largest distance from
/// an intermediate state to the straight start-end chord, divided by the
/// chord length. Exactly straight paths score 0. A degenerate chord falls
/// back to the largest absolute distance from the start.
pub fn straightness_rows(states: &[(f64, Mat)]) -> Vec<f64> {
    assert!(states.len() >= 2, "a trajectory needs at least two states");
    let rows = states[0].1.rows();
    let dim = states[0].1.cols();
    for (_, m) in states {
        assert_eq!(m.shape(), (rows, dim), "ragged trace");
    }
    let first = &states[0].1;
    let last = &states[states.len() - 1].1;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let chord: Vec<f64> =
            last.row(r).iter().zip(first.row(r)).map(|(e, s)| e - s).collect();
        let chord_len = chord.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut worst = 0.0f64;
        for (_, m) in &states[1..states.len() - 1] {
            let rel: Vec<f64> =
                m.row(r).iter().zip(first.row(r)).map(|(p, s)| p - s).collect();
            let dist = if chord_len < 1e-12 {
                rel.iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                // Subtract the along-chord component explicitly; the
                // Pythagorean form cancels catastrophically near the chord.
                let along: f64 =
                    rel.iter().zip(&chord).map(|(v, c)| v * c).sum::<f64>() / (chord_len * chord_len);
                rel.iter()
                    .zip(&chord)
                    .map(|(v, c)| (v - along * c) * (v - along * c))
                    .sum::<f64>()
                    .sqrt()
            };
            worst = worst.max(dist);
        }
        out.push(if chord_len < 1e-12 { worst } else { worst / chord_len });
    }
    out
}

pub fn mean_straightness(states: &[(f64, Mat)]) -> f64 {
    let per_row = straightness_rows(states);
    per_row.iter().sum::<f64>() / per_row.len() as f64
}

/// Jump disagreement: `mean_rows ||jump(x_t1, t1, s) - jump(x_t2, t2, s)||^2`
/// for two snapshots of the same batch of trajectories. Zero for a map whose
/// jumps compose exactly.
pub fn consistency_gap(
    map: &dyn ProjectionMap,
    x_t1: &Mat,
    t1: f64,
    x_t2: &Mat,
    t2: f64,
    s: f64,
) -> f64 {
    assert_eq!(x_t1.shape(), x_t2.shape());
    assert!(s <= t1 && t1 < t2, "need s <= t1 < t2, got s = {s}, t1 = {t1}, t2 = {t2}");
    let a = map.jump(x_t1, t1, s);
    let b = map.jump(x_t2, t2, s);
    let mut sq = 0.0;
    for (u, v) in a.iter().zip(b.iter()) {
        sq += (u - v) * (u - v);
    }
    sq / x_t1.rows() as f64
}

//! Finite-difference derivative oracles.
//!
//! `fd_derivative` differentiates a time-valued function on `[0, 1]` and is
//! both a test oracle for the tape's forward-mode tangents and a runtime
//! fallback for the velocity loss (`derivative_mode = "fd"`). The stencil is
//! central where it fits and switches to a second-order one-sided stencil when
//! `s +- h` would leave `[0, 1]`, so accuracy stays O(h^2) at the endpoints.
//!
//! `fd_grad` is test-only plumbing: a central-difference gradient over a flat
//! parameter slice, used to cross-check every reverse-mode path.

/// Derivative of `f` at `s`, evaluations confined to `[0, 1]`.
///
/// `f` maps a time to a flat vector; the result has the same length. Panics if
/// `h <= 0` or if `[0, 1]` cannot hold the stencil (`h > 0.5`).
pub fn fd_derivative(mut f: impl FnMut(f64) -> Vec<f64>, s: f64, h: f64) -> Vec<f64> {
    assert!(h > 0.0, "fd_derivative needs h > 0, got {h}");
    assert!(h <= 0.5, "fd_derivative stencil does not fit in [0, 1] with h = {h}");
    assert!((0.0..=1.0).contains(&s), "fd_derivative point {s} outside [0, 1]");
    let combine = |terms: &[(f64, Vec<f64>)]| -> Vec<f64> {
        let len = terms[0].1.len();
        let mut out = vec![0.0; len];
        for (w, v) in terms {
            assert_eq!(v.len(), len, "f returned inconsistent lengths");
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        out
    };
    if s - h >= 0.0 && s + h <= 1.0 {
        let (fp, fm) = (f(s + h), f(s - h));
        combine(&[(0.5 / h, fp), (-0.5 / h, fm)])
    } else if s + h > 1.0 {
        // Backward three-point stencil, still O(h^2).
        let (f0, f1, f2) = (f(s), f(s - h), f(s - 2.0 * h));
        combine(&[(1.5 / h, f0), (-2.0 / h, f1), (0.5 / h, f2)])
    } else {
        let (f0, f1, f2) = (f(s), f(s + h), f(s + 2.0 * h));
        combine(&[(-1.5 / h, f0), (2.0 / h, f1), (-0.5 / h, f2)])
    }
}

/// Central-difference gradient of a scalar function of a flat slice.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "fd_grad needs h > 0");
    let mut work = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error between two vectors: `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let d = fd_derivative(|s| vec![5.0 * s], 0.3, 1e-4);
        assert!((d[0] - 5.0).abs() < 1e-9, "got {}", d[0]);
    }

    #[test]
    fn cubic_is_second_order_in_the_interior() {
        let d = fd_derivative(|s| vec![s * s * s], 0.5, 1e-4);
        // Central error term is h^2 f'''/6 = 1e-8.
        assert!((d[0] - 0.75).abs() < 1e-7, "got {}", d[0]);
    }

    #[test]
    fn cubic_at_the_right_endpoint_stays_second_order() {
        let d = fd_derivative(|s| vec![s * s * s], 1.0, 1e-4);
        assert!((d[0] - 3.0).abs() < 1e-6, "got {}", d[0]);
    }

    #[test]
    fn cubic_at_the_left_endpoint_stays_second_order() {
        let d = fd_derivative(|s| vec![s * s * s], 0.0, 1e-3);
        assert!(d[0].abs() < 1e-5, "got {}", d[0]);
    }

    #[test]
    #[should_panic(expected = "h > 0")]
    fn non_positive_h_is_rejected() {
        fd_derivative(|s| vec![s], 0.5, 0.0);
    }

    #[test]
    fn fd_grad_matches_analytic_quadratic() {
        // f(x) = sum x_i^2 has gradient 2x.
        let x = [1.0, -2.0, 0.5];
        let g = fd_grad(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }
}

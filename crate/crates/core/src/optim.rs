//! Derivative-free optimizers used by the ML fitter and debug cross-checks.

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for the maximum of a unimodal `f` on `[lo, hi]`.
/// Returns `(argmax, max)`.
pub fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while (hi - lo).abs() > tol * (1.0 + a.abs() + b.abs()) {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        }
    }
    if fa > fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

/// Maximizes `f` over `[lo, hi]` by a coarse grid scan followed by golden
/// section on the bracket around the best grid point. Tolerates functions
/// that are unimodal only locally.
pub fn bracketed_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, grid: usize, tol: f64) -> (f64, f64) {
    let step = (hi - lo) / grid as f64;
    let (mut best_i, mut best_v) = (0, f64::NEG_INFINITY);
    for i in 0..=grid {
        let v = f(lo + step * i as f64);
        if v > best_v {
            best_i = i;
            best_v = v;
        }
    }
    let a = lo + step * best_i.saturating_sub(1) as f64;
    let b = (lo + step * (best_i + 1) as f64).min(hi);
    let (x, v) = golden_section_max(&f, a, b, tol);
    if v >= best_v {
        (x, v)
    } else {
        (lo + step * best_i as f64, best_v)
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead minimization with standard coefficients.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    start: &[f64],
    scale: f64,
    ftol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for k in 0..d {
        let mut v = start.to_vec();
        v[k] += scale;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[d] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
        } else {
            let (xc, fc) = if fr < values[d] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < values[d].min(fr) {
                simplex[d] = xc;
                values[d] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=d {
                    simplex[i] = best
                        .iter()
                        .zip(&simplex[i])
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    NelderMeadResult {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_section_max(|x| -(x - 1.3).powi(2) + 2.0, -5.0, 5.0, 1e-12);
        assert!((x - 1.3).abs() < 1e-6);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bracketed_handles_boundary_maximum() {
        let (x, _) = bracketed_max(|x| -x, 0.0, 10.0, 20, 1e-12);
        assert!(x.abs() < 1e-6);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let r = nelder_mead(
            |v| (1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2),
            &[-1.2, 1.0],
            0.5,
            1e-16,
            10_000,
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }
}

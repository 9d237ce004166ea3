//! Nelder–Mead simplex descent.

use alloc::vec;
use alloc::vec::Vec;

pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Minimizes `f` from `x0` with initial edge lengths `step`, stopping after
/// `max_evals` evaluations or once the best value drops to `target`.
/// A collapsed simplex is rebuilt around its best vertex while budget remains.
pub(crate) fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: &[f64],
    max_evals: usize,
    target: f64,
) -> Minimum {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut best_x = x0.to_vec();
    let mut best_v = eval(x0, &mut evals);
    let mut scale: Vec<f64> = step.to_vec();

    while evals < max_evals && best_v > target {
        let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n + 1);
        simplex.push((best_v, best_x.clone()));
        for i in 0..n {
            let mut p = best_x.clone();
            p[i] += scale[i];
            simplex.push((eval(&p, &mut evals), p));
        }
        let mut centroid = vec![0.0; n];
        loop {
            simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
            if simplex[0].0 <= target || evals >= max_evals {
                break;
            }
            let spread = simplex[n].0 - simplex[0].0;
            let size: f64 = (1..=n)
                .map(|i| simplex[i].1.iter().zip(&simplex[0].1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            let xscale = simplex[0].1.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            if spread <= 1e-15 * simplex[0].0.abs().max(1e-300) || size <= 1e-13 * xscale {
                break;
            }
            centroid.iter_mut().for_each(|c| *c = 0.0);
            for (_, p) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / n as f64;
                }
            }
            let (worst_v, worst) = (simplex[n].0, &simplex[n].1);
            let along = |t: f64| -> Vec<f64> { centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect() };
            let xr = along(-1.0);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].0 {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (fe, xe) } else { (fr, xr) };
            } else if fr < simplex[n - 1].0 {
                simplex[n] = (fr, xr);
            } else {
                let xc = if fr < worst_v { along(-0.5) } else { along(0.5) };
                let fc = eval(&xc, &mut evals);
                if fc < worst_v.min(fr) {
                    simplex[n] = (fc, xc);
                } else {
                    let (head, tail) = simplex.split_at_mut(1);
                    let x0 = &head[0].1;
                    for vertex in tail.iter_mut() {
                        for (b, a) in vertex.1.iter_mut().zip(x0) {
                            *b = a + 0.5 * (*b - a);
                        }
                        vertex.0 = eval(&vertex.1, &mut evals);
                    }
                }
            }
        }
        let (vals0, pts0) = (&simplex[0].0, &simplex[0].1);
        let improved = *vals0 < best_v;
        if improved {
            best_v = *vals0;
            best_x = pts0.clone();
        }
        // Restart with a smaller simplex around the incumbent.
        let shrink = if improved { 0.1 } else { 0.01 };
        scale.iter_mut().zip(step).for_each(|(s, s0)| *s = (*s * shrink).max(1e-12 * s0.abs()));
        if !improved && scale.iter().zip(step).all(|(s, s0)| *s <= 1e-10 * s0.abs()) {
            break;
        }
    }
    Minimum { x: best_x, value: best_v }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], &[0.5, 0.5], 5000, 0.0);
        assert!(m.value < 1e-12, "{}", m.value);
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn honours_evaluation_cap_and_target() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let mut calls = 0;
        nelder_mead(|x| { calls += 1; f(x) }, &[3.0; 6], &[1.0; 6], 100, 0.0);
        assert!(calls <= 100 + 7);
        calls = 0;
        let m = nelder_mead(|x| { calls += 1; f(x) }, &[3.0; 2], &[1.0; 2], 10_000, 1e-3);
        assert!(m.value <= 1e-3 && calls < 10_000);
    }
}

//! Isotropic total-variation proximal map,
//! `argmin_x 1/2 ||x - b||^2 + lambda TV(x)`, solved on the dual by fast
//! gradient projection with Nesterov momentum.

use rayon::prelude::*;

use crate::phantom::ObjectStack;

/// Discrete isotropic TV with forward differences and Neumann boundary.
pub fn total_variation(x: &[f64], nx: usize, ny: usize) -> f64 {
    let mut tv = 0.0;
    for iy in 0..ny {
        for ix in 0..nx {
            let v = x[iy * nx + ix];
            let dy = if iy + 1 < ny { v - x[(iy + 1) * nx + ix] } else { 0.0 };
            let dx = if ix + 1 < nx { v - x[iy * nx + ix + 1] } else { 0.0 };
            tv += (dx * dx + dy * dy).sqrt();
        }
    }
    tv
}

/// Dual pair: `p` holds vertical differences (last row unused), `q`
/// horizontal differences (last column unused).
struct Dual {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl Dual {
    fn zeros(n: usize) -> Self {
        Dual {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }
}

/// Negative divergence: `L(p, q)_ij = p_ij + q_ij - p_(i-1)j - q_i(j-1)`.
fn apply_l(d: &Dual, nx: usize, ny: usize, out: &mut [f64]) {
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            let mut v = 0.0;
            if iy + 1 < ny {
                v += d.p[i];
            }
            if iy > 0 {
                v -= d.p[i - nx];
            }
            if ix + 1 < nx {
                v += d.q[i];
            }
            if ix > 0 {
                v -= d.q[i - 1];
            }
            out[i] = v;
        }
    }
}

/// `L^T x`: forward differences `x_ij - x_(i+1)j`, `x_ij - x_i(j+1)`.
fn apply_lt(x: &[f64], nx: usize, ny: usize, d: &mut Dual) {
    for iy in 0..ny {
        for ix in 0..nx {
            let i = iy * nx + ix;
            d.p[i] = if iy + 1 < ny { x[i] - x[i + nx] } else { 0.0 };
            d.q[i] = if ix + 1 < nx { x[i] - x[i + 1] } else { 0.0 };
        }
    }
}

/// TV proximal map of one `nx` by `ny` image with `iterations` dual steps.
pub fn tv_prox_image(b: &[f64], nx: usize, ny: usize, lambda: f64, iterations: usize) -> Vec<f64> {
    assert_eq!(b.len(), nx * ny, "image size mismatch");
    if lambda <= 0.0 || iterations == 0 {
        return b.to_vec();
    }
    let n = nx * ny;
    let mut r = Dual::zeros(n);
    let mut prev = Dual::zeros(n);
    let mut cur = Dual::zeros(n);
    let mut grad = Dual::zeros(n);
    let mut primal = vec![0.0; n];
    let mut t = 1.0f64;
    let dual_step = 1.0 / (8.0 * lambda);

    for _ in 0..iterations {
        apply_l(&r, nx, ny, &mut primal);
        for (x, bv) in primal.iter_mut().zip(b) {
            *x = bv - lambda * *x;
        }
        apply_lt(&primal, nx, ny, &mut grad);

        std::mem::swap(&mut prev, &mut cur);
        for i in 0..n {
            let mut pv = r.p[i] + dual_step * grad.p[i];
            let mut qv = r.q[i] + dual_step * grad.q[i];
            let norm = (pv * pv + qv * qv).sqrt();
            if norm > 1.0 {
                pv /= norm;
                qv /= norm;
            }
            cur.p[i] = pv;
            cur.q[i] = qv;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            r.p[i] = cur.p[i] + beta * (cur.p[i] - prev.p[i]);
            r.q[i] = cur.q[i] + beta * (cur.q[i] - prev.q[i]);
        }
        t = t_next;
    }

    apply_l(&cur, nx, ny, &mut primal);
    for (x, bv) in primal.iter_mut().zip(b) {
        *x = bv - lambda * *x;
    }
    primal
}

/// Apply the 2-D TV proximal map to every layer independently.
pub fn tv_prox(stack: &ObjectStack, alpha: f64, inner_iters: usize) -> ObjectStack {
    if alpha <= 0.0 {
        return stack.clone();
    }
    let g = *stack.grid();
    let mut out = stack.clone();
    out.layers_mut()
        .par_iter_mut()
        .for_each(|layer| *layer = tv_prox_image(layer, g.nx, g.ny, alpha, inner_iters));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::GridSpec;
    use proptest::prelude::*;

    fn objective(x: &[f64], b: &[f64], nx: usize, ny: usize, lambda: f64) -> f64 {
        let fid: f64 = x.iter().zip(b).map(|(a, c)| 0.5 * (a - c) * (a - c)).sum();
        fid + lambda * total_variation(x, nx, ny)
    }

    #[test]
    fn adjoint_pair_is_consistent() {
        // <L(p,q), x> = <(p,q), L^T x>
        let (nx, ny) = (5, 4);
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut d = Dual::zeros(20);
        for i in 0..20 {
            d.p[i] = if i / nx + 1 < ny { (i as f64 * 1.3).cos() } else { 0.0 };
            d.q[i] = if i % nx + 1 < nx { (i as f64 * 0.7).sin() } else { 0.0 };
        }
        let mut lx = vec![0.0; 20];
        apply_l(&d, nx, ny, &mut lx);
        let mut ltx = Dual::zeros(20);
        apply_lt(&x, nx, ny, &mut ltx);
        let lhs: f64 = lx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = (0..20).map(|i| d.p[i] * ltx.p[i] + d.q[i] * ltx.q[i]).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_image_unchanged() {
        let b = vec![-0.33; 64];
        for lambda in [0.01, 1.0, 100.0] {
            assert_eq!(tv_prox_image(&b, 8, 8, lambda, 20), b);
        }
    }

    #[test]
    fn zero_alpha_is_identity() {
        let g = GridSpec::square(4, 1e-5).unwrap();
        let stack = ObjectStack::new(g, 1e-3, vec![(0..16).map(f64::from).collect()]).unwrap();
        assert_eq!(tv_prox(&stack, 0.0, 20), stack);
    }

    /// Minimiser of the step-edge problem restricted to images that are constant
    /// on each side of the edge, found by exhaustive grid refinement.
    fn brute_force_two_level(b: &[f64], nx: usize, ny: usize, lambda: f64, edge: usize) -> (f64, f64) {
        let build = |a: f64, c: f64| -> Vec<f64> {
            (0..nx * ny).map(|i| if i % nx < edge { a } else { c }).collect()
        };
        let (mut a, mut c) = (0.0, 1.0);
        let mut span = 1.0;
        for _ in 0..40 {
            let mut best = (f64::INFINITY, a, c);
            for i in -10..=10 {
                for j in -10..=10 {
                    let (ta, tc) = (a + span * i as f64 / 10.0, c + span * j as f64 / 10.0);
                    let f = objective(&build(ta, tc), b, nx, ny, lambda);
                    if f < best.0 {
                        best = (f, ta, tc);
                    }
                }
            }
            a = best.1;
            c = best.2;
            span *= 0.5;
        }
        (a, c)
    }

    #[test]
    fn step_edge_matches_one_dimensional_shrinkage() {
        let (nx, ny, edge) = (8, 8, 4);
        let b: Vec<f64> = (0..64).map(|i| if i % nx < edge { 0.0 } else { 1.0 }).collect();
        let lambda = 0.2;
        let x = tv_prox_image(&b, nx, ny, lambda, 2000);

        // each row is a 1-D prox of a centred step: both sides move by lambda/4
        let (a, c) = brute_force_two_level(&b, nx, ny, lambda, edge);
        assert!((a - lambda / edge as f64).abs() < 1e-7, "{a}");
        assert!((c - (1.0 - lambda / (nx - edge) as f64)).abs() < 1e-7, "{c}");
        for (i, v) in x.iter().enumerate() {
            let expected = if i % nx < edge { a } else { c };
            assert!((v - expected).abs() < 1e-6, "pixel {i}: {v} vs {expected}");
        }
    }

    #[test]
    fn prox_beats_perturbations() {
        let (nx, ny) = (6, 5);
        let b: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64) * 0.1).collect();
        let lambda = 0.15;
        let x = tv_prox_image(&b, nx, ny, lambda, 3000);
        let f0 = objective(&x, &b, nx, ny, lambda);
        for k in 0..30 {
            for delta in [1e-3, -1e-3] {
                let mut y = x.clone();
                y[k] += delta;
                assert!(objective(&y, &b, nx, ny, lambda) >= f0 - 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prox_is_non_expansive(
            x in proptest::collection::vec(-1.0f64..1.0, 36),
            y in proptest::collection::vec(-1.0f64..1.0, 36),
            lambda in 0.01f64..0.5,
        ) {
            let px = tv_prox_image(&x, 6, 6, lambda, 500);
            let py = tv_prox_image(&y, 6, 6, lambda, 500);
            let d_out: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let d_in: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d_out <= d_in + 1e-6, "{} > {}", d_out, d_in);
        }
    }
}

use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{tv_prox, Problem};
use crate::error::{Error, Result};
use crate::forward::MeasurementSet;
use crate::phantom::ObjectStack;

/// Fixed-step descent settings shared by the approximant and LT solvers.
///
/// With a TV weight `alpha` and step `s`, each iteration applies the proximal
/// map of `s * alpha * TV` after the gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub iterations: usize,
    pub step: f64,
    pub tv_alpha: f64,
    pub tv_inner_iters: usize,
    pub record_cost: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::approximant()
    }
}

impl SolverConfig {
    /// Eight unregularised steps of size 0.05.
    pub fn approximant() -> Self {
        SolverConfig {
            iterations: 8,
            step: 0.05,
            tv_alpha: 0.0,
            tv_inner_iters: 20,
            record_cost: true,
        }
    }

    /// One unregularised step of size 0.1.
    pub fn approximant_single_step() -> Self {
        SolverConfig {
            iterations: 1,
            step: 0.1,
            ..Self::approximant()
        }
    }

    /// K = 8 with TV weight 0.04.
    pub fn regularized_approximant() -> Self {
        SolverConfig {
            tv_alpha: 0.04,
            ..Self::approximant()
        }
    }

    /// K = 1, step 0.1, TV weight 0.1.
    pub fn regularized_single_step() -> Self {
        SolverConfig {
            tv_alpha: 0.1,
            ..Self::approximant_single_step()
        }
    }

    /// Learning-tomography baseline: 30 iterations, step 0.05, TV weight 0.04,
    /// 20 inner TV iterations.
    pub fn learning_tomography() -> Self {
        SolverConfig {
            iterations: 30,
            step: 0.05,
            tv_alpha: 0.04,
            tv_inner_iters: 20,
            record_cost: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iteration count must be >= 1"));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::invalid(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.tv_alpha.is_finite() && self.tv_alpha >= 0.0) {
            return Err(Error::invalid(format!("tv_alpha must be >= 0, got {}", self.tv_alpha)));
        }
        if self.tv_inner_iters == 0 {
            return Err(Error::invalid("tv_inner_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Momentum rule for [`lt_reconstruct_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Momentum {
    /// `t_(k+1) = (1 + sqrt(1 + 4 t_k^2)) / 2` extrapolation.
    Fista,
    None,
}

/// Solver output.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub stack: ObjectStack,
    /// Cost at each gradient evaluation point followed by the cost of the
    /// returned estimate (`iterations + 1` entries when recorded).
    pub cost_history: Vec<f64>,
    pub elapsed: Duration,
}

impl Reconstruction {
    pub fn final_cost(&self) -> Option<f64> {
        self.cost_history.last().copied()
    }
}

/// Fixed-step gradient descent from a zero phase estimate, with optional TV
/// proximal step after each update.
pub fn approximant(meas: &MeasurementSet, cfg: &SolverConfig) -> Result<Reconstruction> {
    run(meas, cfg, Momentum::None)
}

/// FISTA with TV proximal steps.
pub fn lt_reconstruct(meas: &MeasurementSet, cfg: &SolverConfig) -> Result<Reconstruction> {
    run(meas, cfg, Momentum::Fista)
}

pub fn lt_reconstruct_with(meas: &MeasurementSet, cfg: &SolverConfig, momentum: Momentum) -> Result<Reconstruction> {
    run(meas, cfg, momentum)
}

fn run(meas: &MeasurementSet, cfg: &SolverConfig, momentum: Momentum) -> Result<Reconstruction> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = Problem::new(meas)?;
    let geom = problem.model().geometry();
    let mut x = ObjectStack::zeros(geom.grid, geom.dz, problem.layer_count())?;
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut previous: Option<f64> = None;
    // accelerated iterations are not monotone; an increase is only notable without momentum
    let expect_descent = momentum == Momentum::None;

    for k in 0..cfg.iterations {
        let (j, grad) = problem.cost_and_gradient(&y)?;
        check_progress(k, j, &mut previous, expect_descent)?;
        debug!("iteration {k}: J = {j:.6e}");
        if cfg.record_cost {
            history.push(j);
        }

        let mut next = y.clone();
        for (layer, g) in next.layers_mut().iter_mut().zip(grad.layers()) {
            for (p, d) in layer.iter_mut().zip(g) {
                *p -= cfg.step * d;
            }
        }
        if cfg.tv_alpha > 0.0 {
            next = tv_prox(&next, cfg.step * cfg.tv_alpha, cfg.tv_inner_iters);
        }

        match momentum {
            Momentum::Fista => {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let beta = (t - 1.0) / t_next;
                let mut extrapolated = next.clone();
                for ((e, n), old) in extrapolated
                    .layers_mut()
                    .iter_mut()
                    .zip(next.layers())
                    .zip(x.layers())
                {
                    for ((ev, nv), ov) in e.iter_mut().zip(n).zip(old) {
                        *ev = nv + beta * (nv - ov);
                    }
                }
                y = extrapolated;
                t = t_next;
            }
            Momentum::None => y = next.clone(),
        }
        x = next;
    }

    if cfg.record_cost {
        let j = problem.cost(&x)?.value;
        check_progress(cfg.iterations, j, &mut previous, expect_descent)?;
        history.push(j);
    }

    Ok(Reconstruction {
        stack: x,
        cost_history: history,
        elapsed: start.elapsed(),
    })
}

/// Abort on a non-finite cost or a more than tenfold increase; warn on any
/// increase when descent is expected.
fn check_progress(iteration: usize, j: f64, previous: &mut Option<f64>, expect_descent: bool) -> Result<()> {
    if !j.is_finite() {
        return Err(Error::NonFinite("cost"));
    }
    if let Some(p) = *previous {
        if j > 10.0 * p && p > 0.0 {
            return Err(Error::Diverged {
                iteration,
                previous: p,
                current: j,
            });
        }
        if j > p && expect_descent {
            warn!("cost increased at iteration {iteration}: {p:.6e} -> {j:.6e}");
        }
    }
    *previous = Some(j);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{default_protocol, simulate_measurements, AcquisitionGeometry, Noise};
    use crate::inverse::total_gradient;
    use crate::optics::GridSpec;
    use crate::phantom::{synthesize_stack, PatternParams};

    fn setup(n: usize, seed: u64) -> (AcquisitionGeometry, ObjectStack, MeasurementSet) {
        let geom = AcquisitionGeometry {
            grid: GridSpec::square(n, 16e-6).unwrap(),
            ..AcquisitionGeometry::default()
        };
        let params = PatternParams {
            rect_width: (64e-6, 160e-6),
            rect_length: (64e-6, 320e-6),
            trace_width: 64e-6,
            ..PatternParams::default().with_seed(seed)
        };
        let truth = synthesize_stack(&geom.grid, geom.dz, geom.layers, &params).unwrap();
        let meas = simulate_measurements(&truth, &geom, &default_protocol(), Noise::Off).unwrap();
        (geom, truth, meas)
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::approximant().validate().is_ok());
        let bad = SolverConfig {
            step: 0.0,
            ..SolverConfig::approximant()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            iterations: 0,
            ..SolverConfig::approximant()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            tv_alpha: -1.0,
            ..SolverConfig::approximant()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn published_defaults() {
        let a = SolverConfig::approximant();
        assert_eq!((a.iterations, a.step, a.tv_alpha), (8, 0.05, 0.0));
        let b = SolverConfig::regularized_approximant();
        assert_eq!((b.iterations, b.step, b.tv_alpha), (8, 0.05, 0.04));
        let c = SolverConfig::regularized_single_step();
        assert_eq!((c.iterations, c.step, c.tv_alpha), (1, 0.1, 0.1));
        let lt = SolverConfig::learning_tomography();
        assert_eq!((lt.iterations, lt.step, lt.tv_alpha, lt.tv_inner_iters), (30, 0.05, 0.04, 20));
    }

    #[test]
    fn single_step_is_negative_scaled_gradient() {
        let (geom, _, meas) = setup(32, 1);
        let cfg = SolverConfig {
            iterations: 1,
            step: 0.1,
            ..SolverConfig::approximant()
        };
        let rec = approximant(&meas, &cfg).unwrap();
        let zero = ObjectStack::zeros(geom.grid, geom.dz, geom.layers).unwrap();
        let grad = total_gradient(&zero, &meas).unwrap();
        for (est, g) in rec.stack.layers().iter().flatten().zip(grad.layers().iter().flatten()) {
            assert_eq!(*est, -0.1 * g);
        }
        assert_eq!(rec.cost_history.len(), 2);
    }

    #[test]
    fn object_absent_stays_zero() {
        let geom = AcquisitionGeometry {
            grid: GridSpec::square(16, 16e-6).unwrap(),
            ..AcquisitionGeometry::default()
        };
        let empty = ObjectStack::zeros(geom.grid, geom.dz, geom.layers).unwrap();
        let meas = simulate_measurements(&empty, &geom, &default_protocol(), Noise::Off).unwrap();
        for rec in [
            approximant(&meas, &SolverConfig::approximant()).unwrap(),
            lt_reconstruct(&meas, &SolverConfig::learning_tomography()).unwrap(),
        ] {
            assert!(rec.stack.layers().iter().flatten().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn plain_lt_reduces_to_approximant() {
        let (_, _, meas) = setup(32, 2);
        let cfg = SolverConfig {
            tv_alpha: 0.0,
            iterations: 4,
            ..SolverConfig::learning_tomography()
        };
        let a = approximant(&meas, &cfg).unwrap();
        let b = lt_reconstruct_with(&meas, &cfg, Momentum::None).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.cost_history, b.cost_history);
    }

    #[test]
    fn approximant_is_reproducible() {
        let (_, _, meas) = setup(32, 3);
        let a = approximant(&meas, &SolverConfig::approximant()).unwrap();
        let b = approximant(&meas, &SolverConfig::approximant()).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.cost_history, b.cost_history);
    }

    #[test]
    fn divergence_guard() {
        let mut prev = None;
        check_progress(0, 1.0, &mut prev, true).unwrap();
        check_progress(1, 5.0, &mut prev, true).unwrap();
        assert!(matches!(
            check_progress(2, 51.0, &mut prev, true),
            Err(Error::Diverged { iteration: 2, .. })
        ));
        assert!(matches!(check_progress(3, f64::NAN, &mut None, true), Err(Error::NonFinite(_))));
    }

    #[test]
    fn regularized_run_records_history() {
        let (_, _, meas) = setup(32, 5);
        let rec = approximant(&meas, &SolverConfig::regularized_approximant()).unwrap();
        assert_eq!(rec.cost_history.len(), 9);
        let without = SolverConfig {
            record_cost: false,
            ..SolverConfig::regularized_approximant()
        };
        assert!(approximant(&meas, &without).unwrap().cost_history.is_empty());
    }
}

//! Data-fidelity cost, its adjoint gradient, and the reconstruction solvers.
//!
//! Intensities enter the cost in units of the unobstructed beam: predictions are
//! `|u_det|^2` for a unit incident envelope and measurements are dark-corrected
//! and divided by the photon flux, `(g - read_mean) / photon_flux`. The cost is
//! averaged over views, so a step size keeps its meaning when views are added
//! or removed. Step sizes and regularisation weights are expressed against
//! this normalisation.

mod solver;
mod tv;

pub use solver::{approximant, lt_reconstruct, lt_reconstruct_with, Momentum, Reconstruction, SolverConfig};
pub use tv::{total_variation, tv_prox, tv_prox_image};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ForwardPass, MeasurementSet, ViewOperator};
use crate::optics::GridSpec;
use crate::phantom::ObjectStack;

/// Per-layer derivative of the cost with respect to the phase.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStack {
    grid: GridSpec,
    layers: Vec<Vec<f64>>,
}

impl GradientStack {
    pub fn zeros(grid: GridSpec, layer_count: usize) -> Self {
        GradientStack {
            grid,
            layers: vec![vec![0.0; grid.len()]; layer_count],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Euclidean inner product with a direction of the same shape.
    pub fn dot(&self, direction: &[Vec<f64>]) -> f64 {
        self.layers
            .iter()
            .zip(direction)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    fn scale(&mut self, factor: f64) {
        for x in self.layers.iter_mut().flatten() {
            *x *= factor;
        }
    }

    fn add_assign(&mut self, other: &GradientStack) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Cost value together with the per-view residuals `H_i - g_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    pub residuals: Vec<Vec<f64>>,
}

/// `J = 1/(2 N_v) sum_i ||predicted_i - measured_i||^2`; zero for no views.
pub fn data_fidelity(predicted: &[Vec<f64>], measured: &[Vec<f64>]) -> Result<CostEval> {
    if predicted.len() != measured.len() {
        return Err(Error::invalid(format!(
            "{} predicted views vs {} measured",
            predicted.len(),
            measured.len()
        )));
    }
    let mut per_view = Vec::with_capacity(predicted.len());
    let mut residuals = Vec::with_capacity(predicted.len());
    for (h, g) in predicted.iter().zip(measured) {
        if h.len() != g.len() {
            return Err(Error::invalid("predicted and measured images differ in size"));
        }
        let r: Vec<f64> = h.iter().zip(g).map(|(a, b)| a - b).collect();
        per_view.push(0.5 * r.iter().map(|v| v * v).sum::<f64>());
        residuals.push(r);
    }
    Ok(CostEval {
        value: view_mean(pairwise_sum(&per_view), per_view.len()),
        residuals,
    })
}

/// Fixed-order pairwise summation; the result does not depend on how the
/// terms were produced.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

fn view_mean(total: f64, views: usize) -> f64 {
    if views == 0 {
        0.0
    } else {
        total / views as f64
    }
}

fn pairwise_gradient(mut items: Vec<GradientStack>) -> Option<GradientStack> {
    match items.len() {
        0 => None,
        1 => items.pop(),
        n => {
            let right = items.split_off(n / 2);
            let mut left = pairwise_gradient(items)?;
            if let Some(r) = pairwise_gradient(right) {
                left.add_assign(&r);
            }
            Some(left)
        }
    }
}

/// Predicted normalised intensity `|u_det|^2`.
pub fn predicted_intensity(pass: &ForwardPass) -> Vec<f64> {
    pass.detector.intensity()
}

/// Dark-corrected measurements in units of the unobstructed beam.
pub fn normalized_measurements(meas: &MeasurementSet) -> Result<Vec<Vec<f64>>> {
    let geom = &meas.geometry;
    if geom.photon_flux.is_nan() || geom.photon_flux <= 0.0 {
        return Err(Error::invalid("photon_flux must be positive to normalise measurements"));
    }
    let scale = 1.0 / geom.photon_flux;
    Ok(meas
        .images
        .iter()
        .map(|img| img.iter().map(|g| (g - geom.read_mean) * scale).collect())
        .collect())
}

/// Adjoint-state gradient of one view's cost `1/2 ||H - g||^2`.
///
/// `r' = u_det * r`, `r'_L = F_d^H r'`, `r'_(l-1) = F_dz^H conj(f_l) r'_l`,
/// and the phase derivative of layer `l` is `2 Im(conj(u_l) r'_l)`.
pub fn gradient_single_view(
    stack: &ObjectStack,
    view: &ViewOperator,
    residual: &[f64],
    pass: &ForwardPass,
) -> Result<GradientStack> {
    let grid = *stack.grid();
    view.detector_kernel().grid().ensure_same(&grid)?;
    let layer_count = stack.layer_count();
    if pass.layers.len() != layer_count {
        return Err(Error::invalid(format!(
            "forward cache holds {} layers, stack has {layer_count}",
            pass.layers.len()
        )));
    }
    if residual.len() != grid.len() || pass.detector.grid() != &grid {
        return Err(Error::GridMismatch {
            expected: grid.to_string(),
            found: pass.detector.grid().to_string(),
        });
    }

    let mut back: Vec<Complex64> = pass
        .detector
        .values()
        .iter()
        .zip(residual)
        .map(|(u, r)| u * r)
        .collect();
    view.detector_kernel().apply_adjoint_in_place(&mut back);

    let mut layers = vec![Vec::new(); layer_count];
    for l in (0..layer_count).rev() {
        layers[l] = pass.layers[l]
            .values()
            .iter()
            .zip(&back)
            .map(|(u, r)| 2.0 * (u.conj() * r).im)
            .collect();
        if l > 0 {
            for (r, &phi) in back.iter_mut().zip(stack.layer(l)) {
                *r *= Complex64::from_polar(1.0, -phi);
            }
            view.inter_layer_kernel().apply_adjoint_in_place(&mut back);
        }
    }
    Ok(GradientStack { grid, layers })
}

/// Forward model bound to a measurement set.
#[derive(Debug, Clone)]
pub struct Problem {
    model: ForwardModel,
    targets: Vec<Vec<f64>>,
    layer_count: usize,
}

impl Problem {
    pub fn new(meas: &MeasurementSet) -> Result<Self> {
        meas.validate()?;
        Ok(Problem {
            model: ForwardModel::new(&meas.geometry, &meas.orientations)?,
            targets: normalized_measurements(meas)?,
            layer_count: meas.geometry.layers,
        })
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    fn check(&self, stack: &ObjectStack) -> Result<()> {
        self.model.geometry().grid.ensure_same(stack.grid())
    }

    /// Cost and residuals; views are evaluated in parallel.
    pub fn cost(&self, stack: &ObjectStack) -> Result<CostEval> {
        self.check(stack)?;
        let predicted = self
            .model
            .views()
            .par_iter()
            .map(|view| view.forward(stack).map(|pass| predicted_intensity(&pass)))
            .collect::<Result<Vec<_>>>()?;
        data_fidelity(&predicted, &self.targets)
    }

    /// Cost and gradient. Per-view work runs in parallel and is reduced in a
    /// fixed pairwise order, so the result is independent of thread count.
    pub fn cost_and_gradient(&self, stack: &ObjectStack) -> Result<(f64, GradientStack)> {
        self.check(stack)?;
        let per_view = self
            .model
            .views()
            .par_iter()
            .zip(&self.targets)
            .map(|(view, target)| {
                let pass = view.forward(stack)?;
                let residual: Vec<f64> = predicted_intensity(&pass)
                    .iter()
                    .zip(target)
                    .map(|(h, g)| h - g)
                    .collect();
                let j = 0.5 * residual.iter().map(|r| r * r).sum::<f64>();
                Ok((j, gradient_single_view(stack, view, &residual, &pass)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (costs, grads): (Vec<f64>, Vec<GradientStack>) = per_view.into_iter().unzip();
        let n = costs.len();
        let mut gradient = pairwise_gradient(grads)
            .unwrap_or_else(|| GradientStack::zeros(*stack.grid(), stack.layer_count()));
        if n > 1 {
            gradient.scale(1.0 / n as f64);
        }
        Ok((view_mean(pairwise_sum(&costs), n), gradient))
    }
}

/// `J = 1/(2 N_v) sum_i ||H_i(f) - g_i||^2` on normalised intensities.
pub fn cost(stack: &ObjectStack, meas: &MeasurementSet) -> Result<CostEval> {
    Problem::new(meas)?.cost(stack)
}

/// Mean of the single-view gradients over all views.
pub fn total_gradient(stack: &ObjectStack, meas: &MeasurementSet) -> Result<GradientStack> {
    Ok(Problem::new(meas)?.cost_and_gradient(stack)?.1)
}

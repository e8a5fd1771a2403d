//! Pearson-correlation quality metrics and affine output calibration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ObjectStack;

/// Pearson correlation coefficient of two equally sized maps.
///
/// Fails when either input is constant, where the coefficient is undefined.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("pcc inputs differ in size: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::UndefinedCorrelation("empty input"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Negative Pearson correlation, used as a training loss.
pub fn npcc(a: &[f64], b: &[f64]) -> Result<f64> {
    pcc(a, b).map(|v| -v)
}

/// Least-squares `(scale, offset)` mapping outputs onto truths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCalibration {
    pub scale: f64,
    pub offset: f64,
}

impl AffineCalibration {
    pub const IDENTITY: AffineCalibration = AffineCalibration {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.scale * v + self.offset).collect()
    }
}

/// Minimise `sum ||a * out + b - truth||^2` over all pooled pixels.
pub fn affine_calibrate<O, T>(outputs: &[O], truths: &[T]) -> Result<AffineCalibration>
where
    O: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    if outputs.len() != truths.len() || outputs.is_empty() {
        return Err(Error::invalid("calibration needs equal, non-zero numbers of outputs and truths"));
    }
    let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for (o, t) in outputs.iter().zip(truths) {
        let (o, t) = (o.as_ref(), t.as_ref());
        if o.len() != t.len() {
            return Err(Error::invalid("output and truth maps differ in size"));
        }
        n += o.len();
        sx += o.iter().sum::<f64>();
        sy += t.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::invalid("calibration maps are empty"));
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (o, t) in outputs.iter().zip(truths) {
        for (x, y) in o.as_ref().iter().zip(t.as_ref()) {
            sxx += (x - mx) * (x - mx);
            sxy += (x - mx) * (y - my);
        }
    }
    if sxx == 0.0 {
        return Err(Error::invalid("pooled output variance is zero; calibration undefined"));
    }
    let scale = sxy / sxx;
    Ok(AffineCalibration {
        scale,
        offset: my - scale * mx,
    })
}

/// Whether calibration pools all layers or fits one pair per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Pooled,
    PerLayer,
}

/// Per-layer calibration over a set of (reconstruction, truth) stacks.
pub fn calibrate_stacks(
    recons: &[ObjectStack],
    truths: &[ObjectStack],
    mode: CalibrationMode,
) -> Result<Vec<AffineCalibration>> {
    let layers = check_pairs(recons, truths)?;
    match mode {
        CalibrationMode::Pooled => {
            let outs: Vec<&[f64]> = recons.iter().flat_map(|s| s.layers().iter().map(Vec::as_slice)).collect();
            let tru: Vec<&[f64]> = truths.iter().flat_map(|s| s.layers().iter().map(Vec::as_slice)).collect();
            Ok(vec![affine_calibrate(&outs, &tru)?; layers])
        }
        CalibrationMode::PerLayer => (0..layers)
            .map(|l| {
                let outs: Vec<&[f64]> = recons.iter().map(|s| s.layer(l)).collect();
                let tru: Vec<&[f64]> = truths.iter().map(|s| s.layer(l)).collect();
                affine_calibrate(&outs, &tru)
            })
            .collect(),
    }
}

fn check_pairs(recons: &[ObjectStack], truths: &[ObjectStack]) -> Result<usize> {
    if recons.len() != truths.len() || recons.is_empty() {
        return Err(Error::invalid("need equal, non-zero numbers of reconstructions and truths"));
    }
    let layers = truths[0].layer_count();
    for (r, t) in recons.iter().zip(truths) {
        t.grid().ensure_same(r.grid())?;
        if r.layer_count() != layers || t.layer_count() != layers {
            return Err(Error::invalid("stacks differ in layer count"));
        }
    }
    Ok(layers)
}

/// Per-layer PCC statistics for a set of reconstructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean PCC per layer over the evaluated examples.
    pub layer_pcc: Vec<f64>,
    /// Standard deviation of the per-layer PCC over examples (zero for one).
    pub layer_pcc_std: Vec<f64>,
    /// Mean of `layer_pcc`.
    pub mean_pcc: f64,
    pub examples: usize,
    /// Per-layer calibration applied before scoring, if any.
    pub calibration: Option<Vec<AffineCalibration>>,
    pub cost_history: Vec<f64>,
    /// Wall-clock seconds per named stage.
    pub timings: BTreeMap<String, f64>,
}

impl ReconstructionReport {
    pub fn layer_pcc_percent(&self) -> Vec<f64> {
        self.layer_pcc.iter().map(|v| 100.0 * v).collect()
    }

    pub fn mean_pcc_percent(&self) -> f64 {
        100.0 * self.mean_pcc
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: &f64| v.is_finite() && (-1.0..=1.0).contains(v);
        if !self.layer_pcc.iter().all(in_range) || !in_range(&self.mean_pcc) {
            return Err(Error::invalid("PCC outside [-1, 1]"));
        }
        if self.timings.values().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::invalid("negative timing"));
        }
        if self.layer_pcc_std.len() != self.layer_pcc.len() {
            return Err(Error::invalid("layer PCC and std lengths differ"));
        }
        Ok(())
    }

    /// Plain-text table with PCC in percent, one decimal.
    pub fn table(&self, label: &str) -> String {
        let mut out = format!("{:<12}", "layer");
        for l in 0..self.layer_pcc.len() {
            out.push_str(&format!("{:>14}", l + 1));
        }
        out.push_str(&format!("{:>14}\n{:<12}", "mean", label));
        for (m, s) in self.layer_pcc.iter().zip(&self.layer_pcc_std) {
            if self.examples > 1 {
                out.push_str(&format!("{:>14}", format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)));
            } else {
                out.push_str(&format!("{:>14.1}", 100.0 * m));
            }
        }
        out.push_str(&format!("{:>14.1}\n", self.mean_pcc_percent()));
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("layer,pcc_percent,std_percent\n");
        for (l, (m, s)) in self.layer_pcc.iter().zip(&self.layer_pcc_std).enumerate() {
            out.push_str(&format!("{},{:.1},{:.1}\n", l + 1, 100.0 * m, 100.0 * s));
        }
        out.push_str(&format!("mean,{:.1},\n", self.mean_pcc_percent()));
        out
    }
}

/// Score one reconstruction against its truth.
pub fn evaluate(
    recon: &ObjectStack,
    truth: &ObjectStack,
    calibration: Option<AffineCalibration>,
) -> Result<ReconstructionReport> {
    let calib = calibration.map(|c| vec![c; truth.layer_count()]);
    evaluate_set(std::slice::from_ref(recon), std::slice::from_ref(truth), calib.as_deref())
}

/// Per-layer mean and standard deviation of PCC over a test set, optionally
/// after applying a per-layer calibration.
pub fn evaluate_set(
    recons: &[ObjectStack],
    truths: &[ObjectStack],
    calibration: Option<&[AffineCalibration]>,
) -> Result<ReconstructionReport> {
    let layers = check_pairs(recons, truths)?;
    if let Some(c) = calibration {
        if c.len() != layers {
            return Err(Error::invalid("one calibration per layer is required"));
        }
    }
    let mut scores = vec![Vec::with_capacity(recons.len()); layers];
    for (r, t) in recons.iter().zip(truths) {
        for (l, layer_scores) in scores.iter_mut().enumerate() {
            let value = match calibration {
                Some(c) => pcc(&c[l].apply(r.layer(l)), t.layer(l))?,
                None => pcc(r.layer(l), t.layer(l))?,
            };
            layer_scores.push(value);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let layer_pcc: Vec<f64> = scores.iter().map(|s| mean(s)).collect();
    let layer_pcc_std = scores
        .iter()
        .zip(&layer_pcc)
        .map(|(s, m)| (s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s.len() as f64).sqrt())
        .collect();
    Ok(ReconstructionReport {
        mean_pcc: mean(&layer_pcc),
        layer_pcc,
        layer_pcc_std,
        examples: recons.len(),
        calibration: calibration.map(<[AffineCalibration]>::to_vec),
        cost_history: Vec::new(),
        timings: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::GridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_correlation_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pcc(&a, &[2.0, 4.0, 6.0, 8.0]).unwrap(), 1.0);
        assert_eq!(pcc(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(pcc(&a, &a).unwrap(), 1.0);
        assert_eq!(npcc(&a, &a).unwrap(), -1.0);
        assert_eq!(npcc(&a, &[-1.0, -2.0, -3.0, -4.0]).unwrap(), 1.0);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(pcc(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(pcc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pcc(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn pcc_symmetric_and_affine_invariant(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..64),
            a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assume!(pcc(&x, &y).is_ok());
            let p = pcc(&x, &y).unwrap();
            prop_assert_eq!(p, pcc(&y, &x).unwrap());
            prop_assert!((-1.0..=1.0).contains(&p));
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let ys: Vec<f64> = y.iter().map(|v| c * v + d).collect();
            prop_assert!((pcc(&xs, &ys).unwrap() - p).abs() < 1e-12);
            prop_assert_eq!(npcc(&x, &y).unwrap(), -p);
        }
    }

    #[test]
    fn calibration_exact_cases() {
        let t = vec![vec![0.0, -0.33, -0.33, 0.0], vec![-0.33, 0.0, 0.0, 0.0]];
        let id = affine_calibrate(&t, &t).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12 && id.offset.abs() < 1e-12);
        let out: Vec<Vec<f64>> = t.iter().map(|m| m.iter().map(|v| 2.0 * v + 3.0).collect()).collect();
        let c = affine_calibrate(&out, &t).unwrap();
        assert!((c.scale - 0.5).abs() < 1e-12, "{c:?}");
        assert!((c.offset + 1.5).abs() < 1e-12, "{c:?}");
        assert!(affine_calibrate(&[vec![1.0; 4]], &[vec![0.0, 1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn calibration_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..50).map(|_| if rng.random_bool(0.3) { -0.33 } else { 0.0 }).collect())
            .collect();
        let out: Vec<Vec<f64>> = truth
            .iter()
            .map(|m| m.iter().map(|v| 1.7 * v + 0.2 + rng.random_range(-0.05..0.05)).collect())
            .collect();
        let c = affine_calibrate(&out, &truth).unwrap();

        let sse = |a: f64, b: f64| -> f64 {
            out.iter()
                .zip(&truth)
                .flat_map(|(o, t)| o.iter().zip(t).map(move |(x, y)| (a * x + b - y).powi(2)))
                .sum()
        };
        let (mut a, mut b, mut span) = (0.0, 0.0, 4.0);
        for _ in 0..60 {
            let mut best = (f64::INFINITY, a, b);
            for i in -8..=8 {
                for j in -8..=8 {
                    let (ta, tb) = (a + span * i as f64 / 8.0, b + span * j as f64 / 8.0);
                    let v = sse(ta, tb);
                    if v < best.0 {
                        best = (v, ta, tb);
                    }
                }
            }
            (a, b) = (best.1, best.2);
            span *= 0.6;
        }
        assert!((c.scale - a).abs() < 1e-6, "{} vs {a}", c.scale);
        assert!((c.offset - b).abs() < 1e-6, "{} vs {b}", c.offset);
    }

    fn stack(layers: Vec<Vec<f64>>) -> ObjectStack {
        ObjectStack::new(GridSpec::square(2, 1e-5).unwrap(), 1e-3, layers).unwrap()
    }

    #[test]
    fn evaluate_identity_and_negation() {
        let t = stack(vec![vec![0.0, -0.33, 0.0, 0.0], vec![-0.33, -0.33, 0.0, 0.0]]);
        let r = evaluate(&t, &t, None).unwrap();
        assert_eq!(r.layer_pcc, vec![1.0, 1.0]);
        assert_eq!(r.mean_pcc_percent(), 100.0);
        r.validate().unwrap();

        let neg = stack(vec![t.layer(0).to_vec(), t.layer(1).iter().map(|v| -v).collect()]);
        let r = evaluate(&neg, &t, None).unwrap();
        assert_eq!(r.layer_pcc, vec![1.0, -1.0]);
    }

    #[test]
    fn calibration_leaves_pcc_unchanged() {
        let t = stack(vec![vec![0.0, -0.33, 0.0, -0.33], vec![-0.33, 0.0, 0.0, 0.0]]);
        let r = stack(vec![vec![0.1, -0.2, 0.05, -0.3], vec![-0.1, 0.02, 0.0, 0.03]]);
        let calib = calibrate_stacks(std::slice::from_ref(&r), std::slice::from_ref(&t), CalibrationMode::Pooled).unwrap();
        let plain = evaluate_set(std::slice::from_ref(&r), std::slice::from_ref(&t), None).unwrap();
        let fixed = evaluate_set(std::slice::from_ref(&r), std::slice::from_ref(&t), Some(&calib)).unwrap();
        for (a, b) in plain.layer_pcc.iter().zip(&fixed.layer_pcc) {
            assert!((a - b).abs() < 1e-12);
        }
        let per_layer = calibrate_stacks(&[r], &[t], CalibrationMode::PerLayer).unwrap();
        assert_eq!(per_layer.len(), 2);
        assert_ne!(per_layer[0], per_layer[1]);
    }

    #[test]
    fn set_statistics_and_formatting() {
        let t = stack(vec![vec![0.0, -0.33, 0.0, 0.0]]);
        let good = t.clone();
        let bad = stack(vec![vec![-0.33, 0.0, 0.0, 0.0]]);
        let r = evaluate_set(&[good, bad.clone()], &[t.clone(), t.clone()], None).unwrap();
        let p_bad = pcc(bad.layer(0), t.layer(0)).unwrap();
        assert!((r.layer_pcc[0] - 0.5 * (1.0 + p_bad)).abs() < 1e-12);
        assert!((r.layer_pcc_std[0] - 0.5 * (1.0 - p_bad)).abs() < 1e-12);
        assert!(r.table("approx").contains('±'));
        let single = evaluate(&t, &t, None).unwrap();
        assert!(single.table("x").contains("100.0"));
        assert!(single.csv().starts_with("layer,pcc_percent"));
        assert!(evaluate_set(&[], &[], None).is_err());
    }
}

//! Centralized plaintext trainer used as the reference for federated runs.

use std::collections::HashMap;

use super::dataset::Dataset;
use super::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientKind {
    Taylor,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// Per epoch: mean over all instances of the loss at the weights each
    /// instance's step started from.
    pub losses: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_per_epoch: Vec<Vec<f64>>,
    /// Mean gradient of every step, all epochs in order.
    pub gradients: Vec<Vec<f64>>,
}

/// Mini-batch gradient descent from zero weights over `steps` (lists of ids
/// into `ds`), replayed every epoch. `ds` must carry labels.
pub fn train(ds: &Dataset, steps: &[Vec<u64>], epochs: usize, learning_rate: f64, kind: GradientKind) -> OracleRun {
    let labels = ds.labels.as_ref().expect("oracle needs labels");
    let index: HashMap<u64, usize> = ds.id_index();
    let idx: Vec<Vec<usize>> = steps.iter().map(|s| s.iter().map(|id| index[id]).collect()).collect();
    let h: usize = idx.iter().map(Vec::len).sum();
    let mut theta = vec![0.0; ds.width()];
    let mut run = OracleRun {
        losses: Vec::with_capacity(epochs),
        theta: Vec::new(),
        theta_per_epoch: Vec::with_capacity(epochs),
        gradients: Vec::new(),
    };
    for _ in 0..epochs {
        let mut loss_sum = 0.0;
        for batch in &idx {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| ds.features[i].as_slice()).collect();
            let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let (g, l) = match kind {
                GradientKind::Taylor => (
                    math::taylor_gradient(&theta, &rows, &y),
                    math::taylor_loss(&theta, &rows, &y),
                ),
                GradientKind::Exact => (
                    math::exact_gradient(&theta, &rows, &y),
                    math::exact_loss(&theta, &rows, &y),
                ),
            };
            loss_sum += l.unwrap_or(0.0) * rows.len() as f64;
            for (t, gj) in theta.iter_mut().zip(&g) {
                *t -= learning_rate * gj;
            }
            run.gradients.push(g);
        }
        run.losses.push(loss_sum / h.max(1) as f64);
        run.theta_per_epoch.push(theta.clone());
    }
    run.theta = theta;
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flr::dataset::BatchPlan;
    use crate::flr::synth;

    #[test]
    fn synthetic_data_trains_below_ln2() {
        let ds = synth::generate(400, 4, 3).with_bias();
        let plan = BatchPlan::new(&ds.ids, 32, 1).unwrap();
        let run = train(&ds, &plan.batches, 5, 0.15, GradientKind::Taylor);
        assert!(run.losses.last().unwrap() < &std::f64::consts::LN_2);
        assert!(run.losses.windows(2).all(|w| w[1] < w[0]), "{:?}", run.losses);
        let exact = train(&ds, &plan.batches, 5, 0.15, GradientKind::Exact);
        assert!(exact.losses.last().unwrap() < &std::f64::consts::LN_2);
    }

    #[test]
    fn one_step_from_zero_is_negative_gradient() {
        let ds = synth::generate(10, 3, 5);
        let run = train(&ds, std::slice::from_ref(&ds.ids), 1, 1.0, GradientKind::Taylor);
        let rows = ds.rows();
        let g = math::taylor_gradient(&[0.0; 3], &rows, ds.labels.as_ref().unwrap());
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(run.theta, neg);
        assert!((run.losses[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

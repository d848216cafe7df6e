//! Finite-difference verification of the analytic gradients of the full
//! model plus detection loss.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{model_backward_with, model_forward, BackwardOptions, ForwardCache, ModelWeights, REG_DIM};
use super::tensor::TensorF;
use crate::detect::{total_loss, LossParams, TargetAssignment};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Above this many parameters a seeded random subsample is checked.
    pub max_params: usize,
    /// Seeds the synthetic targets and the subsample.
    pub seed: u64,
    pub loss: LossParams,
    #[doc(hidden)]
    pub fault_layer: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-4,
            max_params: 10_000,
            seed: 0,
            loss: LossParams::default(),
            fault_layer: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the parameter with the largest relative error.
    pub worst_parameter: String,
    pub checked: usize,
    /// Parameters whose perturbation moved a ReLU or a smooth-L1 knee.
    pub skipped: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random labels and regression targets for a single-sample head layout.
pub fn synthetic_targets(anchors: usize, plane: usize, seed: u64) -> TargetAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive: Vec<bool> = (0..anchors).map(|_| rng.random_bool(0.1)).collect();
    let regression = positive
        .iter()
        .enumerate()
        .filter(|(_, p)| **p)
        .map(|(i, _)| (i, 0, std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
        .collect();
    debug_assert!(anchors % plane == 0);
    TargetAssignment { positive, regression }
}

struct Eval {
    loss: f64,
    cache: ForwardCache<f64>,
    knees: Vec<bool>,
}

fn evaluate(w: &ModelWeights<f64>, x: &TensorF<f64>, t: &TargetAssignment, p: &LossParams) -> Result<Eval> {
    let (heads, cache) = model_forward(x, w)?;
    let r = total_loss(&heads, &[t], p)?;
    let plane = heads.cls.shape()[2] * heads.cls.shape()[3];
    let knee = 1.0 / p.sigma_sq;
    let knees = t
        .regression
        .iter()
        .flat_map(|(idx, _, target)| {
            let (a, cell) = (idx / plane, idx % plane);
            let reg = heads.reg.data();
            (0..REG_DIM).map(move |k| (reg[(a * REG_DIM + k) * plane + cell] - target[k]).abs() < knee)
        })
        .collect();
    Ok(Eval { loss: r.total, cache, knees })
}

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter of `w` (or a seeded subsample), using a single-sample
/// input `x` and synthetic targets.
pub fn gradient_check(w: &ModelWeights<f64>, x: &TensorF<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if x.shape().len() != 4 || x.shape()[0] != 1 {
        return Err(Error::shape("gradcheck", "input must be a single 1xCxHxW sample"));
    }
    let mut w = w.clone();
    let (heads, _) = model_forward(x, &w)?;
    let anchors = heads.cls.len();
    let plane = heads.cls.shape()[2] * heads.cls.shape()[3];
    let targets = synthetic_targets(anchors, plane, opts.seed);

    let base = evaluate(&w, x, &targets, &opts.loss)?;
    let r = total_loss(&heads, &[&targets], &opts.loss)?;
    let grads = model_backward_with(
        &r.grads,
        &base.cache,
        &w,
        &BackwardOptions {
            input_grad: false,
            fault_layer: opts.fault_layer.clone(),
        },
    )?;

    let sizes: Vec<usize> = w.params().iter().map(|p| p.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = if total > opts.max_params {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
        index::sample(&mut rng, total, opts.max_params).into_vec()
    } else {
        (0..total).collect()
    };
    picks.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let (mut pi, mut start) = (0, 0);
    for flat in picks {
        while flat >= start + sizes[pi] {
            start += sizes[pi];
            pi += 1;
        }
        let j = flat - start;
        let orig = w.params()[pi].data[j];
        w.params_mut()[pi].data[j] = orig + opts.eps;
        let hi = evaluate(&w, x, &targets, &opts.loss)?;
        w.params_mut()[pi].data[j] = orig - opts.eps;
        let lo = evaluate(&w, x, &targets, &opts.loss)?;
        w.params_mut()[pi].data[j] = orig;

        let smooth = [&hi, &lo]
            .iter()
            .all(|e| e.cache.same_relu_pattern(&base.cache) && e.knees == base.knees);
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let numeric = (hi.loss - lo.loss) / (2.0 * opts.eps);
        let err = relative_error(grads.params[pi][j], numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst_parameter.is_empty() {
            report.max_rel_err = err;
            report.worst_parameter = format!("{}[{j}]", w.params()[pi].name);
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err <= opts.tolerance;
    Ok(report)
}

/// Seeded uniform `[0, 1)` input of the given shape.
pub fn random_input(shape: &[usize], seed: u64) -> Result<TensorF<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    TensorF::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect())
}

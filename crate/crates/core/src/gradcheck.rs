//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coords_per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, net of finite-difference rounding
    /// noise (see [`resolved_error`]).
    pub per_tensor: Vec<f64>,
    /// Max plain [`relative_error`] per input tensor.
    pub raw_per_tensor: Vec<f64>,
    /// Coordinates that fail on the plain metric but pass once rounding noise
    /// is discounted.
    pub below_noise: usize,
    /// `(coordinate, analytic, numeric)` at each tensor's worst coordinate.
    pub worst: Vec<(usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_raw_error(&self) -> f64 {
        self.raw_per_tensor.iter().copied().fold(0.0, f64::max)
    }
}

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Multiple of machine epsilon allowed for rounding in one loss evaluation.
pub const ROUNDING_ULPS: f64 = 64.0;

/// Rounding error bound of a central difference:
/// `ROUNDING_ULPS · ε · max(|f₊|, |f₋|, 1) / span`.
///
/// The floor of 1 stands in for the magnitude of the intermediate terms
/// (cosines, scaled logits), which can cancel to a loss far smaller than
/// themselves.
pub fn rounding_noise(plus: f64, minus: f64, span: f64, epsilon: f64) -> f64 {
    ROUNDING_ULPS * epsilon * plus.abs().max(minus.abs()).max(1.0) / span
}

/// Relative error after discounting the part of the discrepancy that
/// rounding alone can explain: `max(0, |a − n| − noise) / max(|a|, |n|, 1e-12)`.
///
/// Coordinates whose true gradient is below the resolution of a central
/// difference (a loss term that is constant in some input, or a saturated
/// softmax) otherwise report errors near 1 for a correct gradient.
pub fn resolved_error(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<T, F>(loss_fn: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    Ok(loss.item().as_f64())
}

/// Checks `loss_fn`'s gradient with respect to each tensor in `params` with
/// step `h` and the default sampling.
pub fn finite_diff_check<T, F>(loss_fn: F, params: &[Tensor<T>], h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    finite_diff_check_with(
        loss_fn,
        params,
        &GradCheckOptions {
            step: h,
            ..Default::default()
        },
    )
}

pub fn finite_diff_check_with<T, F>(
    loss_fn: F,
    params: &[Tensor<T>],
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(options.step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let first = evaluate(&loss_fn, params)?;
    let second = evaluate(&loss_fn, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "loss function is not deterministic ({first} vs {second})"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = Rng::new(options.seed);
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut raw_per_tensor = Vec::with_capacity(params.len());
    let mut below_noise = 0;
    let epsilon = T::epsilon().as_f64();
    let mut worst_coords = Vec::with_capacity(params.len());
    let mut coords_checked = 0;
    let h = T::lit(options.step);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[t].len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > options.coords_per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(options.coords_per_tensor);
        }
        let mut worst = 0.0f64;
        let mut worst_raw = 0.0f64;
        let mut worst_at = (0, 0.0, 0.0);
        for &c in &coords {
            let base = params[t].data()[c];
            work[t].data_mut()[c] = base + h;
            let plus = evaluate(&loss_fn, &work)?;
            work[t].data_mut()[c] = base - h;
            let minus = evaluate(&loss_fn, &work)?;
            work[t].data_mut()[c] = base;
            // the realized step, which differs from h after rounding at 32-bit
            let span = ((base + h) - (base - h)).as_f64();
            let numeric = (plus - minus) / span;
            let a = analytic.data()[c].as_f64();
            let raw = relative_error(a, numeric);
            let err = resolved_error(a, numeric, rounding_noise(plus, minus, span, epsilon));
            if raw > 1e-6 && err <= 1e-6 {
                below_noise += 1;
            }
            worst_raw = worst_raw.max(raw);
            if err >= worst {
                worst = err;
                worst_at = (c, a, numeric);
            }
        }
        coords_checked += coords.len();
        per_tensor.push(worst);
        raw_per_tensor.push(worst_raw);
        worst_coords.push(worst_at);
    }
    Ok(GradCheckReport {
        per_tensor,
        raw_per_tensor,
        below_noise,
        worst: worst_coords,
        coords_checked,
    })
}

/// The training objectives, by the name used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Teacher alignment of the assistant (stage 1).
    Stage1,
    /// Embedding-layer alignment (stage 2).
    Stage2,
    /// Output imitation of the assistant (stage 3).
    Stage3,
    Mcl,
    /// Teacher distillation term of stage 4.
    Kd,
    Stage4,
    Bool,
    Ce,
    CeNormalized,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::Stage1,
        LossKind::Stage2,
        LossKind::Stage3,
        LossKind::Mcl,
        LossKind::Kd,
        LossKind::Stage4,
        LossKind::Bool,
        LossKind::Ce,
        LossKind::CeNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Stage1 => "stage1",
            LossKind::Stage2 => "stage2",
            LossKind::Stage3 => "stage3",
            LossKind::Mcl => "mcl",
            LossKind::Kd => "kd",
            LossKind::Stage4 => "stage4",
            LossKind::Bool => "bool",
            LossKind::Ce => "ce",
            LossKind::CeNormalized => "ce-normalized",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Number of `[N, D]` input tensors.
    pub fn arity(self) -> usize {
        match self {
            LossKind::Stage2 | LossKind::Stage3 => 4,
            LossKind::Bool => 2,
            _ => 3,
        }
    }

    /// Evaluates the loss on `inputs` recorded on a tape.
    pub fn apply<'t, T: Scalar>(self, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        use crate::losses::*;
        let v = inputs;
        if v.len() != self.arity() {
            return Err(Error::contract(format!("{} takes {} inputs", self.name(), self.arity())));
        }
        let ce = |mode| CeLossConfig {
            temperature: 0.05,
            teacher_weight_mode: mode,
        };
        let loss = match self {
            LossKind::Stage1 | LossKind::Kd => loss_anchor_align(v[0], v[1], v[2])?,
            LossKind::Stage2 | LossKind::Stage3 => loss_pairwise_align(v[0], v[1], v[2], v[3])?,
            LossKind::Mcl => loss_mcl(v[0], v[1], v[2])?,
            LossKind::Stage4 => loss_stage4(v[0], v[1], v[2])?,
            LossKind::Bool => {
                let n = v[0].shape()[0];
                loss_bool(v[0].tape().constant(identity_labels(n)), v[0], v[1])?
            }
            LossKind::Ce => loss_ce(v[0], v[1], v[2], &ce(TeacherWeightMode::Literal))?,
            LossKind::CeNormalized => loss_ce(v[0], v[1], v[2], &ce(TeacherWeightMode::SoftmaxNormalized))?,
        };
        Ok(loss.total)
    }
}

/// Draws standard-normal `[n, d]` inputs for `kind`.
pub fn random_inputs<T: Scalar>(kind: LossKind, n: usize, d: usize, rng: &mut Rng) -> Vec<Tensor<T>> {
    (0..kind.arity()).map(|_| Tensor::randn(&[n, d], 1.0, rng)).collect()
}

/// Finite-difference check of one objective on a random batch.
pub fn check_loss<T: Scalar>(kind: LossKind, n: usize, d: usize, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::new(options.seed).split(n as u64 * 1000 + d as u64);
    let inputs = random_inputs::<T>(kind, n, d, &mut rng);
    finite_diff_check_with(|_, v| kind.apply(v), &inputs, options)
}

/// Batch sizes and widths of the standard gradient grid.
pub const GRID_ROWS: [usize; 3] = [1, 2, 4];
pub const GRID_DIMS: [usize; 2] = [4, 8];

/// Worst case of one objective over the standard grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSummary {
    pub kind: LossKind,
    pub max_error: f64,
    pub max_raw_error: f64,
    /// `(n, d, seed)` of the instance with the largest error.
    pub worst_instance: (usize, usize, u64),
    pub coords_checked: usize,
    pub below_noise: usize,
    pub instances: usize,
}

/// Checks `kind` on every `(n, d)` of the grid with `seeds_per_point`
/// random batches each, seeds counting up from `options.seed`.
pub fn check_suite<T: Scalar>(kind: LossKind, options: &GradCheckOptions, seeds_per_point: u64) -> Result<SuiteSummary> {
    let mut summary = SuiteSummary {
        kind,
        max_error: 0.0,
        max_raw_error: 0.0,
        worst_instance: (0, 0, options.seed),
        coords_checked: 0,
        below_noise: 0,
        instances: 0,
    };
    for n in GRID_ROWS {
        for d in GRID_DIMS {
            for seed in options.seed..options.seed + seeds_per_point {
                let r = check_loss::<T>(kind, n, d, &GradCheckOptions { seed, ..options.clone() })?;
                if r.max_error() >= summary.max_error {
                    summary.max_error = r.max_error();
                    summary.worst_instance = (n, d, seed);
                }
                summary.max_raw_error = summary.max_raw_error.max(r.max_raw_error());
                summary.coords_checked += r.coords_checked;
                summary.below_noise += r.below_noise;
                summary.instances += 1;
            }
        }
    }
    Ok(summary)
}

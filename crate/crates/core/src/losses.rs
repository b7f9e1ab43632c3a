//! Training objectives for the four distillation stages and the two
//! contrastive ablations.
//!
//! All sentence-level inputs are `[N, D]` tensors with one row per sentence.
//! Squared vector differences are reduced as a mean over the `D` coordinates,
//! so loss magnitudes do not depend on the embedding width.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Var, NORM_CLAMP};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::{Rng, Scalar, Tape, Tensor};

/// A scalar loss on the tape plus named component values.
pub struct LossValue<'t, T> {
    pub total: Var<'t, T>,
    pub components: BTreeMap<String, f64>,
}

impl<'t, T: Scalar> LossValue<'t, T> {
    fn single(name: &str, total: Var<'t, T>) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), total.item().as_f64());
        LossValue { total, components }
    }

    pub fn value(&self) -> f64 {
        self.total.item().as_f64()
    }
}

/// Teacher-side weights in the temperature-scaled cross-entropy ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherWeightMode {
    /// Raw teacher cosines.
    #[default]
    Literal,
    /// Teacher cosine rows passed through a softmax at the same temperature.
    SoftmaxNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeLossConfig {
    pub temperature: f64,
    pub teacher_weight_mode: TeacherWeightMode,
}

impl Default for CeLossConfig {
    fn default() -> Self {
        CeLossConfig {
            temperature: 0.05,
            teacher_weight_mode: TeacherWeightMode::Literal,
        }
    }
}

/// Cosine similarity of two vectors with the denominator clamped at
/// [`NORM_CLAMP`].
pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> f64 {
    assert_eq!(x.len(), y.len(), "cosine_similarity: length mismatch");
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    let nx = x.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_CLAMP);
    let ny = y.iter().map(|a| a.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_CLAMP);
    dot / (nx * ny)
}

/// Row-wise cosine `[N, D] x [N, D] -> [N]`.
pub fn cosine_rows<'t, T: Scalar>(x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    x.normalize_rows().mul(y.normalize_rows()).sum_last()
}

/// All-pairs cosine grid `[N, D] x [M, D] -> [N, M]`.
pub fn cosine_grid<'t, T: Scalar>(x: Var<'t, T>, y: Var<'t, T>) -> Var<'t, T> {
    x.normalize_rows().matmul(y.normalize_rows().transpose())
}

fn matrix_shape<T: Scalar>(v: Var<'_, T>, what: &str) -> Result<(usize, usize)> {
    match v.shape().as_slice() {
        &[n, d] if n > 0 && d > 0 => Ok((n, d)),
        other => Err(Error::contract(format!("{what}: expected a non-empty [N, D] matrix, got {other:?}"))),
    }
}

fn same_shape<T: Scalar>(vars: &[(Var<'_, T>, &str)]) -> Result<(usize, usize)> {
    let (first, name) = vars[0];
    let shape = matrix_shape(first, name)?;
    for &(v, what) in &vars[1..] {
        let s = matrix_shape(v, what)?;
        if s != shape {
            return Err(Error::contract(format!(
                "shape mismatch: {name} is {shape:?}, {what} is {s:?}"
            )));
        }
    }
    Ok(shape)
}

/// `sum((a - b)^2) / (N * D)`.
fn mean_squared<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, n: usize, d: usize) -> Var<'t, T> {
    a.sub(b).square().sum().scale(T::lit(1.0 / (n * d) as f64))
}

/// Both sides of each parallel pair regress onto one anchor vector:
/// `(1/N) Σ_i [mse(anchor_i, src_i) + mse(anchor_i, tgt_i)]`.
///
/// This is the stage-1 objective (teacher anchors, assistant outputs) and the
/// distillation half of stage 4 (teacher anchors, student outputs).
pub fn loss_anchor_align<'t, T: Scalar>(
    anchor_src: Var<'t, T>,
    out_src: Var<'t, T>,
    out_tgt: Var<'t, T>,
) -> Result<LossValue<'t, T>> {
    let (n, d) = same_shape(&[(anchor_src, "anchor_src"), (out_src, "out_src"), (out_tgt, "out_tgt")])?;
    let total = mean_squared(anchor_src, out_src, n, d).add(mean_squared(anchor_src, out_tgt, n, d));
    Ok(LossValue::single("anchor_align", total))
}

/// Source and target outputs each regress onto their own reference:
/// `(1/N) Σ_i [mse(ref_src_i, out_src_i) + mse(out_tgt_i, ref_tgt_i)]`.
///
/// Used for stage 2 (embedding-layer references) and stage 3 (assistant
/// outputs as references).
pub fn loss_pairwise_align<'t, T: Scalar>(
    ref_src: Var<'t, T>,
    out_src: Var<'t, T>,
    ref_tgt: Var<'t, T>,
    out_tgt: Var<'t, T>,
) -> Result<LossValue<'t, T>> {
    let (n, d) = same_shape(&[
        (ref_src, "ref_src"),
        (out_src, "out_src"),
        (ref_tgt, "ref_tgt"),
        (out_tgt, "out_tgt"),
    ])?;
    let total = mean_squared(ref_src, out_src, n, d).add(mean_squared(out_tgt, ref_tgt, n, d));
    Ok(LossValue::single("pairwise_align", total))
}

/// Multilingual contrastive loss: the student's source-to-target cosine grid
/// regresses onto the teacher's source-to-source grid, over all `N²` cells
/// including the diagonal.
pub fn loss_mcl<'t, T: Scalar>(
    teacher_src: Var<'t, T>,
    student_src: Var<'t, T>,
    student_tgt: Var<'t, T>,
) -> Result<LossValue<'t, T>> {
    let (n, _) = matrix_shape(teacher_src, "teacher_src")?;
    let (ns, _) = same_shape(&[(student_src, "student_src"), (student_tgt, "student_tgt")])?;
    if ns != n {
        return Err(Error::contract(format!("teacher has {n} rows, student has {ns}")));
    }
    let teacher_grid = cosine_grid(teacher_src, teacher_src);
    let student_grid = cosine_grid(student_src, student_tgt);
    let total = teacher_grid
        .sub(student_grid)
        .square()
        .sum()
        .scale(T::lit(1.0 / (n * n) as f64));
    Ok(LossValue::single("mcl", total))
}

/// Stage-4 objective: contrastive term plus teacher distillation term.
pub fn loss_stage4<'t, T: Scalar>(
    teacher_src: Var<'t, T>,
    student_src: Var<'t, T>,
    student_tgt: Var<'t, T>,
) -> Result<LossValue<'t, T>> {
    let contrastive = loss_mcl(teacher_src, student_src, student_tgt)?;
    let distill = loss_anchor_align(teacher_src, student_src, student_tgt)?;
    Ok(combine(contrastive, distill))
}

/// Sums a contrastive component with the distillation component, keeping
/// both in the breakdown.
pub fn combine<'t, T: Scalar>(contrastive: LossValue<'t, T>, distill: LossValue<'t, T>) -> LossValue<'t, T> {
    let total = contrastive.total.add(distill.total);
    let mut components = contrastive.components;
    components.extend(distill.components);
    LossValue { total, components }
}

/// `N x N` identity used as hard labels for [`loss_bool`].
pub fn identity_labels<T: Scalar>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}

/// Hard-label variant of the contrastive loss:
/// `(1/N²) Σ_ij (label_ij − cos(src_i, tgt_j))²`.
pub fn loss_bool<'t, T: Scalar>(
    labels: Var<'t, T>,
    student_src: Var<'t, T>,
    student_tgt: Var<'t, T>,
) -> Result<LossValue<'t, T>> {
    let (n, _) = same_shape(&[(student_src, "student_src"), (student_tgt, "student_tgt")])?;
    if labels.shape() != [n, n] {
        return Err(Error::contract(format!(
            "labels must be [{n}, {n}], got {:?}",
            labels.shape()
        )));
    }
    let total = labels
        .sub(cosine_grid(student_src, student_tgt))
        .square()
        .sum()
        .scale(T::lit(1.0 / (n * n) as f64));
    Ok(LossValue::single("bool", total))
}

/// Temperature-scaled cross-entropy ablation:
/// `−Σ_i Σ_j w_ij · log softmax_j(cos(src_i, tgt_·) / τ)` with teacher weights
/// `w` taken from the teacher's source cosine grid.
pub fn loss_ce<'t, T: Scalar>(
    teacher_src: Var<'t, T>,
    student_src: Var<'t, T>,
    student_tgt: Var<'t, T>,
    cfg: &CeLossConfig,
) -> Result<LossValue<'t, T>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {}", cfg.temperature)));
    }
    let (n, _) = matrix_shape(teacher_src, "teacher_src")?;
    let (ns, _) = same_shape(&[(student_src, "student_src"), (student_tgt, "student_tgt")])?;
    if ns != n {
        return Err(Error::contract(format!("teacher has {n} rows, student has {ns}")));
    }
    let inv_tau = T::lit(1.0 / cfg.temperature);
    let teacher_grid = cosine_grid(teacher_src, teacher_src);
    let weights = match cfg.teacher_weight_mode {
        TeacherWeightMode::Literal => teacher_grid,
        TeacherWeightMode::SoftmaxNormalized => teacher_grid.scale(inv_tau).softmax(),
    };
    let log_probs = cosine_grid(student_src, student_tgt).scale(inv_tau).log_softmax();
    let total = weights.mul(log_probs).sum().scale(-T::one());
    Ok(LossValue::single("ce", total))
}

/// Trainable linear map from model width to teacher width, for setups where
/// the two differ. Off unless a pipeline enables it.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAdapter<T> {
    params: ParamStore<T>,
    weight: ParamId,
}

impl<T: Scalar> LinearAdapter<T> {
    /// Identity when the widths agree, small Gaussian otherwise.
    pub fn new(from: usize, to: usize, rng: &mut Rng) -> Self {
        let weight = if from == to {
            identity_labels(from)
        } else {
            Tensor::randn(&[from, to], (1.0 / from as f64).sqrt(), rng)
        };
        let mut params = ParamStore::new();
        let id = params.add("adapter.weight", weight, true);
        LinearAdapter { params, weight: id }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundAdapter<'t, T> {
        BoundAdapter {
            bound: self.params.bind(tape, |_| trainable),
            weight: self.weight,
        }
    }
}

pub struct BoundAdapter<'t, T> {
    pub bound: BoundParams<'t, T>,
    weight: ParamId,
}

impl<'t, T: Scalar> BoundAdapter<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(self.bound.get(self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_fixed_values() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn anchor_align_direct_expansion() {
        let tape = Tape::new();
        let a = tape.constant(mat(&[&[0.0]]));
        let s = tape.constant(mat(&[&[1.0]]));
        let t = tape.constant(mat(&[&[2.0]]));
        assert_eq!(loss_anchor_align(a, s, t).unwrap().value(), 5.0);
        assert_eq!(loss_anchor_align(a, a, a).unwrap().value(), 0.0);
    }

    #[test]
    fn pairwise_align_is_symmetric_in_sides() {
        let tape = Tape::new();
        let r1 = tape.constant(mat(&[&[0.1, 0.2], &[0.3, -0.4]]));
        let o1 = tape.constant(mat(&[&[0.5, 0.2], &[0.0, 0.4]]));
        let r2 = tape.constant(mat(&[&[1.0, -1.0], &[0.2, 0.2]]));
        let o2 = tape.constant(mat(&[&[0.3, 0.1], &[0.9, 0.7]]));
        let ab = loss_pairwise_align(r1, o1, r2, o2).unwrap().value();
        let ba = loss_pairwise_align(r2, o2, r1, o1).unwrap().value();
        assert!((ab - ba).abs() < 1e-15);
        assert_eq!(loss_pairwise_align(r1, r1, r2, r2).unwrap().value(), 0.0);
    }

    #[test]
    fn mcl_single_pair_reduces() {
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[0.3, -0.7, 1.1]]));
        let s = tape.constant(mat(&[&[1.0, 2.0, 0.5]]));
        let u = tape.constant(mat(&[&[-0.5, 1.0, 2.0]]));
        let cos = cosine_similarity(&[1.0, 2.0, 0.5], &[-0.5, 1.0, 2.0]);
        let got = loss_mcl(t, s, u).unwrap().value();
        assert!((got - (1.0 - cos).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn mcl_zero_when_grids_match() {
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(loss_mcl(t, t, t).unwrap().value().abs() < 1e-15);
    }

    #[test]
    fn stage4_breakdown_sums() {
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[0.3, -0.7], &[1.0, 0.2]]));
        let s = tape.constant(mat(&[&[0.1, 0.9], &[-0.4, 0.2]]));
        let u = tape.constant(mat(&[&[0.6, 0.6], &[0.1, -1.0]]));
        let loss = loss_stage4(t, s, u).unwrap();
        let parts: f64 = loss.components.values().sum();
        assert!((loss.value() - parts).abs() < 1e-12);
        assert_eq!(loss.components.len(), 2);
    }

    #[test]
    fn bool_fixed_points() {
        let tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let labels = tape.constant(identity_labels(2));
        assert!(loss_bool(labels, x, x).unwrap().value().abs() < 1e-15);
        let a = tape.constant(mat(&[&[1.0, 0.0]]));
        let b = tape.constant(mat(&[&[0.0, 1.0]]));
        let one = tape.constant(identity_labels(1));
        assert_eq!(loss_bool(one, a, b).unwrap().value(), 1.0);
    }

    #[test]
    fn ce_single_candidate_is_zero() {
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[0.3, 0.4]]));
        let s = tape.constant(mat(&[&[1.0, -2.0]]));
        let u = tape.constant(mat(&[&[0.5, 0.5]]));
        assert_eq!(loss_ce(t, s, u, &CeLossConfig::default()).unwrap().value(), 0.0);
    }

    #[test]
    fn ce_uniform_student_row() {
        // every target identical => student cosines constant along each row
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0], &[-1.0, 0.5]]));
        let s = tape.constant(mat(&[&[1.0, 2.0], &[0.5, 0.1], &[-1.0, 0.0], &[0.3, 0.3]]));
        let u = tape.constant(mat(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]));
        let got = loss_ce(t, s, u, &CeLossConfig::default()).unwrap().value();
        let tv = t.to_tensor();
        let mut expected = 0.0;
        for i in 0..4 {
            let row_sum: f64 = (0..4).map(|j| cosine_similarity(tv.row(i), tv.row(j))).sum();
            expected += -row_sum * (0.25f64).ln();
        }
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn ce_rejects_bad_temperature() {
        let tape = Tape::new();
        let t = tape.constant(mat(&[&[0.3, 0.4]]));
        let cfg = CeLossConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(matches!(loss_ce(t, t, t, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let tape = Tape::new();
        let a = tape.constant(mat(&[&[0.0, 1.0]]));
        let b = tape.constant(mat(&[&[0.0, 1.0, 2.0]]));
        assert!(matches!(loss_anchor_align(a, a, b), Err(Error::Contract(_))));
        assert!(matches!(loss_pairwise_align(a, a, a, b), Err(Error::Contract(_))));
        assert!(matches!(loss_mcl(a, a, b), Err(Error::Contract(_))));
    }
}

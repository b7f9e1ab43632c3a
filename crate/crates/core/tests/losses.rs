mod common;

use common::*;
use crosstill::error::Error;
use crosstill::losses::*;
use crosstill::{Rng, Tape};
use proptest::prelude::*;

fn ce_cfg(tau: f64, mode: TeacherWeightMode) -> CeLossConfig {
    CeLossConfig {
        temperature: tau,
        teacher_weight_mode: mode,
    }
}

/// Evaluates a three-input loss on plain rows.
fn eval3(
    rows: [&Rows; 3],
    f: impl for<'t> Fn(
        crosstill::Var<'t, f64>,
        crosstill::Var<'t, f64>,
        crosstill::Var<'t, f64>,
    ) -> crosstill::Result<LossValue<'t, f64>>,
) -> f64 {
    let tape = Tape::new();
    let [a, b, c] = rows.map(|r| tape.constant(to_tensor(r)));
    f(a, b, c).unwrap().value()
}

#[test]
fn cosine_hand_values() {
    assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cosine_similarity(&[0.3, -2.0, 1.1], &[-0.3, 2.0, -1.1]) + 1.0).abs() < 1e-15);
    assert!((cosine_similarity(&[0.3, -2.0, 1.1], &[0.3, -2.0, 1.1]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity::<f64>(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

#[test]
fn anchor_align_direct_expansion() {
    let v = eval3([&vec![vec![0.0]], &vec![vec![1.0]], &vec![vec![2.0]]], loss_anchor_align);
    assert_eq!(v, 5.0);
}

#[test]
fn single_pair_mcl_reduces_to_one_minus_cosine() {
    let mut rng = Rng::new(4);
    let (t, s, g) = (random_rows(1, 5, &mut rng), random_rows(1, 5, &mut rng), random_rows(1, 5, &mut rng));
    let expected = (1.0 - cos(&s[0], &g[0])).powi(2);
    assert!(rel_diff(eval3([&t, &s, &g], loss_mcl), expected) < 1e-12);
}

#[test]
fn hard_label_single_orthogonal_pair_is_one() {
    let tape = Tape::new();
    let labels = tape.constant(identity_labels(1));
    let s = tape.constant(to_tensor(&vec![vec![1.0, 0.0]]));
    let t = tape.constant(to_tensor(&vec![vec![0.0, 3.0]]));
    assert_eq!(loss_bool(labels, s, t).unwrap().value(), 1.0);
}

#[test]
fn literal_cross_entropy_of_one_pair_is_zero() {
    let mut rng = Rng::new(8);
    let rows: Vec<Rows> = (0..3).map(|_| random_rows(1, 4, &mut rng)).collect();
    let v = eval3([&rows[0], &rows[1], &rows[2]], |a, b, c| {
        loss_ce(a, b, c, &ce_cfg(0.05, TeacherWeightMode::Literal))
    });
    assert_eq!(v, 0.0);
}

#[test]
fn uniform_student_row_contributes_teacher_mass_times_log_n() {
    // every student source row is orthogonal to every target row
    let src: Rows = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]; 4];
    let tgt: Rows = (1..5).map(|k| (0..5).map(|d| if d == k { 1.0 } else { 0.0 }).collect()).collect();
    let mut rng = Rng::new(2);
    let teacher = random_rows(4, 3, &mut rng);
    let v = eval3([&teacher, &src, &tgt], |a, b, c| {
        loss_ce(a, b, c, &ce_cfg(0.05, TeacherWeightMode::Literal))
    });
    let mass: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| cos(&teacher[i], &teacher[j])).sum();
    assert!(rel_diff(v, -mass * (0.25f64).ln()) < 1e-12);
}

#[test]
fn losses_match_loop_oracles() {
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let n = rng.range_inclusive(1, 6);
        let d = rng.range_inclusive(1, 8);
        let r: Vec<Rows> = (0..4).map(|_| random_rows(n, d, &mut rng)).collect();
        let tape = Tape::new();
        let v: Vec<_> = r.iter().map(|x| tape.constant(to_tensor(x))).collect();
        let checks = [
            ("anchor", loss_anchor_align(v[0], v[1], v[2]).unwrap().value(), anchor_align(&r[0], &r[1], &r[2])),
            (
                "pairwise",
                loss_pairwise_align(v[0], v[1], v[2], v[3]).unwrap().value(),
                pairwise_align(&r[0], &r[1], &r[2], &r[3]),
            ),
            ("mcl", loss_mcl(v[0], v[1], v[2]).unwrap().value(), mcl(&r[0], &r[1], &r[2])),
            ("stage4", loss_stage4(v[0], v[1], v[2]).unwrap().value(), stage4(&r[0], &r[1], &r[2])),
            (
                "bool",
                loss_bool(tape.constant(identity_labels(n)), v[1], v[2]).unwrap().value(),
                hard_label(&r[1], &r[2]),
            ),
            (
                "ce",
                loss_ce(v[0], v[1], v[2], &ce_cfg(0.05, TeacherWeightMode::Literal))
                    .unwrap()
                    .value(),
                cross_entropy(&r[0], &r[1], &r[2], 0.05, false),
            ),
            (
                "ce-normalized",
                loss_ce(v[0], v[1], v[2], &ce_cfg(0.05, TeacherWeightMode::SoftmaxNormalized))
                    .unwrap()
                    .value(),
                cross_entropy(&r[0], &r[1], &r[2], 0.05, true),
            ),
        ];
        for (name, got, want) in checks {
            // values that cancel to near zero are compared absolutely
            let err = (got - want).abs() / want.abs().max(1e-6);
            assert!(err <= 1e-9, "case {case} {name} n={n} d={d}: {got} vs {want}");
        }
    }
}

#[test]
fn stage4_breakdown_sums_to_total() {
    let mut rng = Rng::new(77);
    let r: Vec<Rows> = (0..3).map(|_| random_rows(5, 6, &mut rng)).collect();
    let tape = Tape::new();
    let v: Vec<_> = r.iter().map(|x| tape.constant(to_tensor(x))).collect();
    let loss = loss_stage4(v[0], v[1], v[2]).unwrap();
    let parts: f64 = loss.components.values().sum();
    assert_eq!(loss.components.len(), 2);
    assert!((loss.value() - parts).abs() < 1e-12);
    assert!((loss.components["mcl"] - mcl(&r[0], &r[1], &r[2])).abs() < 1e-12);
}

#[test]
fn fixed_points_are_zero() {
    let mut rng = Rng::new(5);
    let t = random_rows(4, 3, &mut rng);
    assert_eq!(eval3([&t, &t, &t], loss_anchor_align), 0.0);
    let tape = Tape::new();
    let v = tape.constant(to_tensor(&t));
    assert_eq!(loss_pairwise_align(v, v, v, v).unwrap().value(), 0.0);
    // student grid equal to the teacher grid
    assert!(eval3([&t, &t, &t], loss_mcl) < 1e-28);
    // mutually orthogonal unit rows give an identity cosine grid
    let basis: Rows = (0..3).map(|i| (0..3).map(|d| if d == i { 1.0 } else { 0.0 }).collect()).collect();
    let tape = Tape::new();
    let labels = tape.constant(identity_labels(3));
    let b = tape.constant(to_tensor(&basis));
    assert_eq!(loss_bool(labels, b, b).unwrap().value(), 0.0);
}

#[test]
fn invalid_inputs_are_rejected() {
    let tape = Tape::new();
    let a = tape.constant(to_tensor(&vec![vec![1.0, 2.0]; 2]));
    let b = tape.constant(to_tensor(&vec![vec![1.0, 2.0]; 3]));
    assert!(matches!(loss_anchor_align(a, a, b), Err(Error::Contract(_))));
    assert!(matches!(loss_mcl(a, b, b), Err(Error::Contract(_))));
    for tau in [0.0, -0.5, f64::NAN] {
        let err = loss_ce(a, a, a, &ce_cfg(tau, TeacherWeightMode::Literal)).err();
        assert!(matches!(err, Some(Error::Config(_))), "tau={tau}");
    }
    let wrong = tape.constant(identity_labels(3));
    assert!(matches!(loss_bool(wrong, a, a), Err(Error::Contract(_))));
}

fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Rows> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), n)
}

/// Applies a Givens rotation in the `(p, q)` plane to every row.
fn rotate(rows: &Rows, p: usize, q: usize, angle: f64) -> Rows {
    let (s, c) = angle.sin_cos();
    rows.iter()
        .map(|r| {
            let mut out = r.clone();
            out[p] = c * r[p] - s * r[q];
            out[q] = s * r[p] + c * r[q];
            out
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mse_family_is_non_negative(a in rows_strategy(3, 4), b in rows_strategy(3, 4), c in rows_strategy(3, 4)) {
        prop_assert!(eval3([&a, &b, &c], loss_anchor_align) >= 0.0);
        prop_assert!(eval3([&a, &b, &c], loss_mcl) >= 0.0);
        prop_assert!(eval3([&a, &b, &c], loss_stage4) >= 0.0);
    }

    #[test]
    fn pairwise_is_symmetric_under_side_swap(
        a in rows_strategy(2, 3), b in rows_strategy(2, 3), c in rows_strategy(2, 3), d in rows_strategy(2, 3)
    ) {
        let tape = Tape::new();
        let [a, b, c, d] = [&a, &b, &c, &d].map(|r| tape.constant(to_tensor(r)));
        let forward = loss_pairwise_align(a, b, c, d).unwrap().value();
        let swapped = loss_pairwise_align(d, c, b, a).unwrap().value();
        prop_assert!((forward - swapped).abs() <= 1e-12 * forward.abs().max(1.0));
    }

    #[test]
    fn mcl_ignores_rotations_and_rescaling(
        t in rows_strategy(3, 4), s in rows_strategy(3, 4), g in rows_strategy(3, 4),
        angle in -3.0f64..3.0, scales in proptest::collection::vec(0.1f64..10.0, 9),
    ) {
        prop_assume!(t.iter().chain(&s).chain(&g).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let base = eval3([&t, &s, &g], loss_mcl);
        let rotated = eval3([&rotate(&t, 0, 2, angle), &s, &g], loss_mcl);
        prop_assert!((base - rotated).abs() < 1e-10);
        let rotated = eval3([&t, &rotate(&s, 1, 3, angle), &rotate(&g, 1, 3, angle)], loss_mcl);
        prop_assert!((base - rotated).abs() < 1e-10);
        let scale = |rows: &Rows, off: usize| -> Rows {
            rows.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * scales[off + i]).collect()).collect()
        };
        let rescaled = eval3([&scale(&t, 0), &scale(&s, 3), &scale(&g, 6)], loss_mcl);
        prop_assert!((base - rescaled).abs() < 1e-10);
    }
}

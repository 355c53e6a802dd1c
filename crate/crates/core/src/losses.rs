//! Cross-entropy, the grouped contrastive loss, and their weighted
//! combination `α·Lce + β·(Lscl − Lfcl)`.
//!
//! The contrastive loss is one kernel parameterised by grouping labels: main
//! task labels give the supervised term, protected attributes give the fair
//! term. Each loss also has a gradient form that the network module chains
//! through the encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, logsumexp_unchecked, Matrix, ZERO_NORM_TOL};
use crate::par;

/// Gold-class probabilities are clamped here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            tau: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::validation("alpha", "must be finite and non-negative"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::validation("beta", "must be finite and non-negative"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::validation("tau", "must be positive"));
        }
        Ok(())
    }
}

/// Positive sets for each anchor of a batch. The candidate set of anchor `i`
/// is every other index of the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveIndex {
    pub positives: Vec<Vec<usize>>,
}

impl ContrastiveIndex {
    pub fn new(groups: &[usize]) -> Self {
        let positives = groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                groups
                    .iter()
                    .enumerate()
                    .filter(|&(j, h)| j != i && h == g)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Self { positives }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn candidates(&self, i: usize) -> impl Iterator<Item = usize> {
        (0..self.len()).filter(move |&j| j != i)
    }
}

fn check_gold(rows: usize, classes: usize, gold: &[usize]) -> Result<()> {
    if gold.len() != rows {
        return Err(Error::Dimension {
            context: "cross_entropy",
            expected: rows,
            found: gold.len(),
        });
    }
    if let Some(&y) = gold.iter().find(|&&y| y >= classes) {
        return Err(Error::validation("gold", format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-probability of the gold classes. `probs` holds one
/// probability row per instance.
pub fn cross_entropy(probs: &Matrix, gold: &[usize]) -> Result<f64> {
    check_gold(probs.rows(), probs.cols(), gold)?;
    let n = probs.rows() as f64;
    let total: f64 = gold
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n)
}

/// Cross-entropy from logits with its gradient w.r.t. the logits.
///
/// Rows whose gold probability is below [`PROB_FLOOR`] contribute the
/// clamped constant and a zero gradient.
pub fn cross_entropy_with_grad(logits: &Matrix, gold: &[usize]) -> Result<(f64, Matrix)> {
    check_gold(logits.rows(), logits.cols(), gold)?;
    let n = logits.rows() as f64;
    let log_floor = PROB_FLOOR.ln();
    let mut grad = logits.clone();
    let mut total = 0.0;
    for (i, &y) in gold.iter().enumerate() {
        let row = grad.row_mut(i);
        let lse = logsumexp_unchecked(row);
        let log_p = row[y] - lse;
        if log_p < log_floor {
            total -= log_floor;
            row.iter_mut().for_each(|g| *g = 0.0);
            continue;
        }
        total -= log_p;
        for g in row.iter_mut() {
            *g = (*g - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

fn normalized_rows(h: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut unit = h.clone();
    let mut norms = Vec::with_capacity(h.rows());
    for i in 0..h.rows() {
        let row = unit.row_mut(i);
        let n = numkit::norm(row);
        if !(n > ZERO_NORM_TOL) {
            return Err(Error::Degenerate {
                context: "group_contrastive",
                norm: n,
            });
        }
        row.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

fn check_contrastive(h: &Matrix, groups: &[usize], tau: f64) -> Result<()> {
    if h.rows() < 2 {
        return Err(Error::Contract(format!(
            "contrastive loss needs at least 2 instances, got {}",
            h.rows()
        )));
    }
    if groups.len() != h.rows() {
        return Err(Error::Dimension {
            context: "group_contrastive",
            expected: h.rows(),
            found: groups.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::validation("tau", "must be positive"));
    }
    Ok(())
}

/// Similarities `h̃ᵢ·h̃ⱼ/τ` of the row-normalised representations.
fn scaled_similarities(unit: &Matrix, tau: f64) -> Result<Matrix> {
    let mut s = numkit::matmul_nt(unit, unit)?;
    s.as_mut_slice().iter_mut().for_each(|x| *x /= tau);
    Ok(s)
}

/// Per-anchor softmax over candidates, then `softmax − 1[p ∈ P(i)]/|P(i)|`.
/// Returns the per-anchor losses and the coefficient matrix `∂L/∂S`.
fn anchor_terms(sim: &Matrix, index: &ContrastiveIndex) -> (Vec<f64>, Matrix) {
    let n = sim.rows();
    let mut coeff = Matrix::zeros(n, n);
    let mut losses = vec![0.0; n];
    // loss goes into column i of row i (the diagonal is otherwise unused)
    par::for_each_row(coeff.as_mut_slice(), n, n * n * 4, |i, row| {
        let pos = &index.positives[i];
        if pos.is_empty() {
            return;
        }
        let s = sim.row(i);
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| s[j]).collect();
        let lse = logsumexp_unchecked(&others);
        let k = pos.len() as f64;
        let mean_pos: f64 = pos.iter().map(|&p| s[p]).sum::<f64>() / k;
        for j in 0..n {
            if j != i {
                row[j] = (s[j] - lse).exp();
            }
        }
        for &p in pos {
            row[p] -= 1.0 / k;
        }
        row[i] = lse - mean_pos;
    });
    for (i, l) in losses.iter_mut().enumerate() {
        *l = coeff.get(i, i);
        coeff.set(i, i, 0.0);
    }
    (losses, coeff)
}

/// Contrastive loss of a batch grouped by `groups`:
/// `Σᵢ −1/|P(i)| Σ_{p∈P(i)} log( exp(h̃ᵢ·h̃ₚ/τ) / Σ_{q≠i} exp(h̃ᵢ·h̃_q/τ) )`.
///
/// The sum over anchors is not divided by the batch size. Anchors with no
/// positive contribute zero.
pub fn group_contrastive(h: &Matrix, groups: &[usize], tau: f64) -> Result<f64> {
    check_contrastive(h, groups, tau)?;
    let (unit, _) = normalized_rows(h)?;
    let sim = scaled_similarities(&unit, tau)?;
    let (losses, _) = anchor_terms(&sim, &ContrastiveIndex::new(groups));
    Ok(losses.iter().sum())
}

/// [`group_contrastive`] together with its gradient w.r.t. `h`.
pub fn group_contrastive_with_grad(h: &Matrix, groups: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    check_contrastive(h, groups, tau)?;
    let (unit, norms) = normalized_rows(h)?;
    let sim = scaled_similarities(&unit, tau)?;
    let (losses, coeff) = anchor_terms(&sim, &ContrastiveIndex::new(groups));
    let n = h.rows();
    // S is symmetric, so ∂L/∂h̃ᵢ = (1/τ) Σⱼ (Gᵢⱼ + Gⱼᵢ) h̃ⱼ
    let mut sym = coeff.clone();
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, (coeff.get(i, j) + coeff.get(j, i)) / tau);
        }
    }
    let mut grad = numkit::matmul_nn(&sym, &unit)?;
    // back through the row normalisation: (I − h̃h̃ᵀ)/‖h‖
    for (i, &norm) in norms.iter().enumerate() {
        let u = unit.row(i);
        let g = grad.row_mut(i);
        let radial = numkit::dot(u, g);
        for (gk, uk) in g.iter_mut().zip(u) {
            *gk = (*gk - radial * uk) / norm;
        }
    }
    Ok((losses.iter().sum(), grad))
}

/// `α·ce + β·(scl − fcl)`.
pub fn combined_objective(ce: f64, scl: f64, fcl: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * ce + cfg.beta * (scl - fcl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Brute-force oracle: evaluates the loss term by term from explicit unit
    /// vectors, with no matrix code and no log-sum-exp shift.
    fn brute_force_contrastive(h: &[Vec<f64>], groups: &[usize], tau: f64) -> f64 {
        let unit: Vec<Vec<f64>> = h
            .iter()
            .map(|v| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let sim = |a: usize, b: usize| -> f64 {
            unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>() / tau
        };
        let n = h.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && groups[p] == groups[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&q| q != i).map(|q| sim(i, q).exp()).sum();
            let inner: f64 = pos.iter().map(|&p| (sim(i, p).exp() / denom).ln()).sum();
            total += -inner / pos.len() as f64;
        }
        total
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::new(2, 2, vec![0.5; 4]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&uniform, &[0, 1]).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let onehot = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&onehot, &[0, 1]).unwrap(), 0.0);
        let single = Matrix::new(1, 2, vec![0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&single, &[1]).unwrap(), 0.356674943938732, epsilon = 1e-12);
        // a zero gold probability is clamped, not NaN
        let zero = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&zero, &[1]).unwrap(), -PROB_FLOOR.ln(), epsilon = 1e-12);
        assert!(cross_entropy(&zero, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_from_logits_matches_probability_form() {
        let logits = Matrix::new(3, 3, vec![0.1, 2.0, -1.0, 0.0, 0.0, 0.0, 5.0, -3.0, 1.0]).unwrap();
        let gold = [1, 2, 0];
        let mut probs = logits.clone();
        for i in 0..3 {
            numkit::softmax_in_place(probs.row_mut(i));
        }
        let (v, _) = cross_entropy_with_grad(&logits, &gold).unwrap();
        assert_abs_diff_eq!(v, cross_entropy(&probs, &gold).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn contrastive_two_instance_cases() {
        let h = Matrix::new(2, 3, vec![1.0, 2.0, 0.5, -0.3, 0.2, 1.0]).unwrap();
        assert_abs_diff_eq!(group_contrastive(&h, &[4, 4], 0.07).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(group_contrastive(&h, &[0, 1], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_three_instance_hand_case() {
        // unit vectors at 0°, 60° and 150° in the plane
        let angle = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let rows = vec![angle(0.0), angle(60.0), angle(150.0)];
        let groups = [0, 0, 1];
        let h = Matrix::from_rows(&rows).unwrap();
        let got = group_contrastive(&h, &groups, 1.0).unwrap();
        let oracle = brute_force_contrastive(&rows, &groups, 1.0);
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-10);
        // anchors 0 and 1 each see one positive at cos 60° = 0.5;
        // 2 has no positive
        let l0 = -(0.5f64.exp() / (0.5f64.exp() + (150f64.to_radians().cos()).exp())).ln();
        let l1 = -(0.5f64.exp() / (0.5f64.exp() + (90f64.to_radians().cos()).exp())).ln();
        assert_abs_diff_eq!(got, l0 + l1, epsilon = 1e-12);
    }

    #[test]
    fn identical_representations_in_one_group_give_log_ratio() {
        // every similarity is 1/τ, so each anchor's term is
        // log|Q(i)| − log 1 averaged over |P(i)| identical positives,
        // i.e. log(N−1)
        for n in 2..=4 {
            let rows = vec![vec![0.3, -0.4, 1.2]; n];
            let groups = vec![0; n];
            let h = Matrix::from_rows(&rows).unwrap();
            let got = group_contrastive(&h, &groups, 0.5).unwrap();
            let oracle = brute_force_contrastive(&rows, &groups, 0.5);
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-10);
            assert_abs_diff_eq!(got, n as f64 * ((n - 1) as f64).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn contrastive_rejects_bad_input() {
        let one = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(group_contrastive(&one, &[0], 1.0), Err(Error::Contract(_))));
        let zero_row = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(group_contrastive(&zero_row, &[0, 0], 1.0), Err(Error::Degenerate { .. })));
        let h = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(group_contrastive(&h, &[0, 0], 0.0).is_err());
    }

    #[test]
    fn combined_objective_examples() {
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 1.0,
            tau: 1.0,
        };
        assert_abs_diff_eq!(combined_objective(0.5, 0.2, 0.1, &cfg), 0.6, epsilon = 1e-15);
        let no_beta = LossConfig { beta: 0.0, alpha: 2.0, ..cfg };
        assert_eq!(combined_objective(0.5, 0.2, 0.1, &no_beta), 1.0);
        let base = combined_objective(0.0, 0.2, 0.1, &cfg);
        assert_eq!(combined_objective(0.0, 0.1, 0.2, &cfg), -base);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }

    fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..9).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), n),
                prop::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn contrastive_matches_brute_force((rows, groups) in batch(), tau in 0.05f64..2.0) {
            prop_assume!(rows.iter().all(|r| numkit::norm(r) > 1e-3));
            let h = Matrix::from_rows(&rows).unwrap();
            let got = group_contrastive(&h, &groups, tau).unwrap();
            let oracle = brute_force_contrastive(&rows, &groups, tau);
            prop_assert!((got - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
            prop_assert!(got >= -1e-12);
        }

        #[test]
        fn contrastive_is_scale_invariant((rows, groups) in batch(), scales in prop::collection::vec(0.01f64..100.0, 8)) {
            prop_assume!(rows.iter().all(|r| numkit::norm(r) > 1e-3));
            let h = Matrix::from_rows(&rows).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|x| x * s).collect()).collect();
            let hs = Matrix::from_rows(&scaled).unwrap();
            let a = group_contrastive(&h, &groups, 0.3).unwrap();
            let b = group_contrastive(&hs, &groups, 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn contrastive_is_permutation_invariant((rows, groups) in batch(), rot in 0usize..8) {
            prop_assume!(rows.iter().all(|r| numkit::norm(r) > 1e-3));
            let n = rows.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
            let h = Matrix::from_rows(&rows).unwrap();
            let hp = h.select_rows(&perm);
            let gp: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
            let a = group_contrastive(&h, &groups, 0.2).unwrap();
            let b = group_contrastive(&hp, &gp, 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn cross_entropy_falls_as_gold_probability_rises(p in 0.01f64..0.98, dp in 0.001f64..0.01, rest in prop::collection::vec(0.1f64..1.0, 2)) {
            let q = (p + dp).min(0.999);
            let row = |g: f64| {
                let s: f64 = rest.iter().sum();
                let mut r = vec![g];
                r.extend(rest.iter().map(|x| x / s * (1.0 - g)));
                Matrix::new(1, 3, r).unwrap()
            };
            let lo = cross_entropy(&row(p), &[0]).unwrap();
            let hi = cross_entropy(&row(q), &[0]).unwrap();
            prop_assert!(hi < lo);
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let rows = vec![
            vec![0.4, -1.0, 0.3],
            vec![1.2, 0.1, -0.7],
            vec![-0.2, 0.9, 0.5],
            vec![0.8, 0.8, -0.1],
            vec![-1.1, 0.2, 0.6],
        ];
        let groups = [0, 1, 0, 1, 0];
        let h = Matrix::from_rows(&rows).unwrap();
        let (_, grad) = group_contrastive_with_grad(&h, &groups, 0.5).unwrap();
        let step = 1e-6;
        for k in 0..h.as_slice().len() {
            let mut plus = h.clone();
            plus.as_mut_slice()[k] += step;
            let mut minus = h.clone();
            minus.as_mut_slice()[k] -= step;
            let fd = (group_contrastive(&plus, &groups, 0.5).unwrap()
                - group_contrastive(&minus, &groups, 0.5).unwrap())
                / (2.0 * step);
            assert_abs_diff_eq!(grad.as_slice()[k], fd, epsilon = 1e-7);
        }
    }
}

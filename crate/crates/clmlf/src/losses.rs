//! The three training objectives: softmax classification over the pooled
//! representation, label-based contrastive learning over same-label batch
//! pairs, and data-based contrastive learning against augmented views, plus
//! their weighted combination.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfPairMode {
    /// Positives are other same-label rows; the softmax denominator skips
    /// the diagonal. Training default.
    Exclude,
    /// The anchor itself also counts as a positive and the denominator
    /// ranges over every row, mirroring the gather-with-offsets recipe.
    Include,
}

fn default_tau() -> f64 {
    0.07
}
fn default_true() -> bool {
    true
}
fn default_mode() -> SelfPairMode {
    SelfPairMode::Exclude
}
fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_mode")]
    pub self_pairs: SelfPairMode,
    #[serde(default = "default_lambda")]
    pub lambda_lbcl: f64,
    #[serde(default = "default_lambda")]
    pub lambda_dbcl: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: default_tau(),
            normalize: true,
            self_pairs: SelfPairMode::Exclude,
            lambda_lbcl: 1.0,
            lambda_dbcl: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar values of one step's objectives. The total is the classification
/// loss plus the lambda-weighted contrastive terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sc: f64,
    pub l_lbcl: f64,
    pub l_dbcl: f64,
    pub l_total: f64,
    pub n_pos_pairs: usize,
}

/// Mean cross-entropy of `softmax(GELU(R W + b))` (the GELU is skipped when
/// `apply_gelu` is off) against gold labels.
pub fn classification_loss<T: Scalar>(
    tape: &Tape<T>,
    rep: Var,
    w: Var,
    b: Var,
    labels: &[usize],
    apply_gelu: bool,
) -> Result<Var> {
    let k = tape.value(w).shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let logits = tape.add_broadcast(tape.matmul(rep, w), b);
    let logits = if apply_gelu { tape.gelu(logits) } else { logits };
    Ok(tape.cross_entropy_mean(logits, labels))
}

/// Classifier logits for inference, same path as the loss.
pub fn classifier_logits<T: Scalar>(
    tape: &Tape<T>,
    rep: Var,
    w: Var,
    b: Var,
    apply_gelu: bool,
) -> Var {
    let logits = tape.add_broadcast(tape.matmul(rep, w), b);
    if apply_gelu {
        tape.gelu(logits)
    } else {
        logits
    }
}

fn similarity<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, cfg: &ContrastiveConfig) -> Var {
    let (a, b) = if cfg.normalize {
        (tape.l2_normalize_rows(a), tape.l2_normalize_rows(b))
    } else {
        (a, b)
    };
    let sim = tape.matmul(a, tape.permute(b, &[1, 0]));
    tape.scale(sim, T::from_f64(1.0 / cfg.tau))
}

/// Label-based contrastive loss. Rows of `rep` are L2-normalized when
/// configured, scaled by `1/tau`, and same-label rows act as positives.
/// Returns zero (with zero pairs) when no anchor has a positive.
pub fn lbcl_loss<T: Scalar>(
    tape: &Tape<T>,
    rep: Var,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<(Var, usize)> {
    cfg.validate()?;
    let s = tape.value(rep).shape()[0];
    if labels.len() != s {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            s
        )));
    }
    let sim = similarity(tape, rep, rep, cfg);
    let include = cfg.self_pairs == SelfPairMode::Include;
    Ok(tape.supcon_from_sim(sim, labels, include))
}

/// Data-based contrastive loss: row `i` of the similarity matrix against
/// the augmented views must pick out column `i` (single direction).
pub fn dbcl_loss<T: Scalar>(
    tape: &Tape<T>,
    rep: Var,
    rep_aug: Var,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.value(rep).shape().to_vec();
    if shape != tape.value(rep_aug).shape() {
        return Err(Error::Shape(format!(
            "clean {:?} vs augmented {:?} representation shapes",
            shape,
            tape.value(rep_aug).shape()
        )));
    }
    let sim = similarity(tape, rep, rep_aug, cfg);
    let targets: Vec<usize> = (0..shape[0]).collect();
    Ok(tape.cross_entropy_mean(sim, &targets))
}

/// Combine the three objectives. Fails fast on non-finite components,
/// naming the offender.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    l_sc: Var,
    l_lbcl: Var,
    l_dbcl: Var,
    n_pos_pairs: usize,
    cfg: &ContrastiveConfig,
) -> Result<(Var, LossBundle)> {
    let total = tape.add(
        l_sc,
        tape.add(
            tape.scale(l_lbcl, T::from_f64(cfg.lambda_lbcl)),
            tape.scale(l_dbcl, T::from_f64(cfg.lambda_dbcl)),
        ),
    );
    let bundle = LossBundle {
        l_sc: tape.scalar_value(l_sc).as_f64(),
        l_lbcl: tape.scalar_value(l_lbcl).as_f64(),
        l_dbcl: tape.scalar_value(l_dbcl).as_f64(),
        l_total: tape.scalar_value(total).as_f64(),
        n_pos_pairs,
    };
    for (name, v) in [
        ("l_sc", bundle.l_sc),
        ("l_lbcl", bundle.l_lbcl),
        ("l_dbcl", bundle.l_dbcl),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok((total, bundle))
}

#[cfg(test)]
pub(crate) mod oracles {
    //! Brute-force loop implementations of the contrastive definitions,
    //! kept independent of the tape path they check.

    pub fn l2_normalize(rows: &mut Vec<Vec<f64>>) {
        for row in rows.iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn lbcl(
        rep: &[Vec<f64>],
        labels: &[usize],
        tau: f64,
        normalize: bool,
        include_self: bool,
    ) -> (f64, usize) {
        let s = rep.len();
        let mut rows: Vec<Vec<f64>> = rep.to_vec();
        if normalize {
            l2_normalize(&mut rows);
        }
        let mut loss = 0.0;
        let mut anchors = 0usize;
        let mut n_pos = 0usize;
        for i in 0..s {
            let positives: Vec<usize> = (0..s)
                .filter(|&j| labels[j] == labels[i] && (include_self || j != i))
                .collect();
            n_pos += positives.len();
            if positives.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..s)
                .filter(|&j| include_self || j != i)
                .map(|j| (dot(&rows[i], &rows[j]) / tau).exp())
                .sum();
            let mut term = 0.0;
            for &p in &positives {
                let num = (dot(&rows[i], &rows[p]) / tau).exp();
                term += (num / denom).ln();
            }
            loss -= term / positives.len() as f64;
        }
        if anchors == 0 {
            (0.0, 0)
        } else {
            (loss / anchors as f64, n_pos)
        }
    }

    pub fn dbcl(rep: &[Vec<f64>], rep_aug: &[Vec<f64>], tau: f64, normalize: bool) -> f64 {
        let s = rep.len();
        let mut a: Vec<Vec<f64>> = rep.to_vec();
        let mut b: Vec<Vec<f64>> = rep_aug.to_vec();
        if normalize {
            l2_normalize(&mut a);
            l2_normalize(&mut b);
        }
        let mut loss = 0.0;
        for i in 0..s {
            let denom: f64 = (0..s).map(|j| (dot(&a[i], &b[j]) / tau).exp()).sum();
            let num = (dot(&a[i], &b[i]) / tau).exp();
            loss -= (num / denom).ln();
        }
        loss / s as f64
    }

    pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut loss = 0.0;
        for (row, &gold) in logits.iter().zip(labels) {
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            loss -= (row[gold].exp() / denom).ln();
        }
        loss / logits.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::gelu_f64;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn leaf_from(tape: &Tape<f64>, rows: &[Vec<f64>]) -> Var {
        let (s, d) = (rows.len(), rows[0].len());
        tape.leaf(ArrayD::from_shape_fn(IxDyn(&[s, d]), |ix| {
            rows[ix[0]][ix[1]]
        }))
    }

    fn rand_rows(s: usize, d: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
        (0..s)
            .map(|_| (0..d).map(|_| f64::standard_normal(rng)).collect())
            .collect()
    }

    fn cfg(tau: f64, mode: SelfPairMode) -> ContrastiveConfig {
        ContrastiveConfig {
            tau,
            normalize: true,
            self_pairs: mode,
            lambda_lbcl: 1.0,
            lambda_dbcl: 1.0,
        }
    }

    #[test]
    fn classification_uniform_logits_is_ln_k() {
        // Zero representation with zero weights: logits all equal, so the
        // softmax is uniform over K=3 and the loss is ln 3.
        let tape = Tape::new();
        let rep = tape.leaf(ArrayD::zeros(IxDyn(&[4, 5])));
        let w = tape.leaf(ArrayD::zeros(IxDyn(&[5, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        let loss = classification_loss(&tape, rep, w, b, &[0, 1, 2, 0], true).unwrap();
        assert!((tape.scalar_value(loss) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_large_margin_drives_loss_to_zero() {
        let tape = Tape::new();
        let rep = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), 1.0));
        // Gold logit much larger than the rest; GELU off to control values.
        let w = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![50.0, 0.0, 0.0]).unwrap(),
        );
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        let loss = classification_loss(&tape, rep, w, b, &[0], false).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn classification_matches_by_hand_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rep_rows = rand_rows(4, 6, &mut rng);
        let w_rows = rand_rows(6, 3, &mut rng);
        let b_row: Vec<f64> = (0..3).map(|_| f64::standard_normal(&mut rng)).collect();
        let labels = [0usize, 2, 1, 0];

        let tape = Tape::new();
        let rep = leaf_from(&tape, &rep_rows);
        let w = leaf_from(&tape, &w_rows);
        let b = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), b_row.clone()).unwrap());
        let loss = classification_loss(&tape, rep, w, b, &labels, true).unwrap();

        let logits: Vec<Vec<f64>> = rep_rows
            .iter()
            .map(|r| {
                (0..3)
                    .map(|k| {
                        let pre: f64 =
                            r.iter().zip(w_rows.iter()).map(|(x, wr)| x * wr[k]).sum::<f64>()
                                + b_row[k];
                        gelu_f64(pre)
                    })
                    .collect()
            })
            .collect();
        let expect = oracles::softmax_cross_entropy(&logits, &labels);
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-8);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let tape = Tape::new();
        let rep = tape.leaf(ArrayD::zeros(IxDyn(&[1, 2])));
        let w = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[3])));
        assert!(classification_loss(&tape, rep, w, b, &[3], true).is_err());
    }

    #[test]
    fn lbcl_no_positive_pairs_is_zero() {
        let tape = Tape::new();
        let rep = leaf_from(&tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (loss, n_pos) = lbcl_loss(&tape, rep, &[0, 1], &cfg(1.0, SelfPairMode::Exclude))
            .unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        assert_eq!(n_pos, 0);
    }

    #[test]
    fn lbcl_identical_unit_rows_same_label_is_ln_2() {
        let tape = Tape::new();
        let row = vec![1.0, 0.0, 0.0];
        let rep = leaf_from(&tape, &[row.clone(), row.clone(), row]);
        let (loss, n_pos) =
            lbcl_loss(&tape, rep, &[1, 1, 1], &cfg(1.0, SelfPairMode::Exclude)).unwrap();
        assert!((tape.scalar_value(loss) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(n_pos, 6);
    }

    #[test]
    fn lbcl_matches_brute_force_oracle_in_both_modes() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for case in 0..40 {
            let s = rng.random_range(2..=6);
            let d = rng.random_range(2..=4);
            let rows = rand_rows(s, d, &mut rng);
            let labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..3)).collect();
            let tau = 0.05 + rng.random::<f64>() * 0.95;
            for (mode, include) in [(SelfPairMode::Exclude, false), (SelfPairMode::Include, true)]
            {
                let tape = Tape::new();
                let rep = leaf_from(&tape, &rows);
                let (loss, n_pos) = lbcl_loss(&tape, rep, &labels, &cfg(tau, mode)).unwrap();
                let (expect, expect_pos) = oracles::lbcl(&rows, &labels, tau, true, include);
                assert!(
                    (tape.scalar_value(loss) - expect).abs() < 1e-6,
                    "case {case} mode {mode:?}: {} vs {expect}",
                    tape.scalar_value(loss)
                );
                assert_eq!(n_pos, expect_pos);
            }
        }
    }

    #[test]
    fn lbcl_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let rows = rand_rows(5, 3, &mut rng);
        let labels = [0usize, 1, 0, 2, 1];
        let config = cfg(0.3, SelfPairMode::Exclude);
        let run = |rows: &[Vec<f64>]| {
            let tape = Tape::new();
            let rep = leaf_from(&tape, rows);
            let (loss, _) = lbcl_loss(&tape, rep, &labels, &config).unwrap();
            tape.scalar_value(loss)
        };
        let tape = Tape::new();
        let rep = leaf_from(&tape, &rows);
        let (loss, _) = lbcl_loss(&tape, rep, &labels, &config).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.get(rep).unwrap();
        let eps = 1e-6;
        for i in 0..5 {
            for c in 0..3 {
                let mut plus = rows.clone();
                plus[i][c] += eps;
                let mut minus = rows.clone();
                minus[i][c] -= eps;
                let numeric = (run(&plus) - run(&minus)) / (2.0 * eps);
                assert!(
                    (analytic[[i, c]] - numeric).abs() < 1e-7,
                    "rep[{i}][{c}]: {} vs {numeric}",
                    analytic[[i, c]]
                );
            }
        }
    }

    #[test]
    fn dbcl_orthonormal_identical_views_is_log1p_exp_neg1() {
        let tape = Tape::new();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let rep = leaf_from(&tape, &rows);
        let rep_aug = leaf_from(&tape, &rows);
        let loss = dbcl_loss(&tape, rep, rep_aug, &cfg(1.0, SelfPairMode::Exclude)).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn dbcl_identical_rows_is_ln_s() {
        let tape = Tape::new();
        let row = vec![0.4, -0.3, 0.9];
        let rows = vec![row.clone(), row.clone(), row.clone(), row];
        let rep = leaf_from(&tape, &rows);
        let rep_aug = leaf_from(&tape, &rows);
        let loss = dbcl_loss(&tape, rep, rep_aug, &cfg(0.5, SelfPairMode::Exclude)).unwrap();
        assert!((tape.scalar_value(loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dbcl_matches_brute_force_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..40 {
            let s = rng.random_range(2..=5);
            let d = rng.random_range(2..=8);
            let a = rand_rows(s, d, &mut rng);
            let b = rand_rows(s, d, &mut rng);
            let tau = 0.05 + rng.random::<f64>() * 0.95;
            let tape = Tape::new();
            let rep = leaf_from(&tape, &a);
            let rep_aug = leaf_from(&tape, &b);
            let loss = dbcl_loss(&tape, rep, rep_aug, &cfg(tau, SelfPairMode::Exclude)).unwrap();
            let expect = oracles::dbcl(&a, &b, tau, true);
            assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn dbcl_shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = tape.leaf(ArrayD::zeros(IxDyn(&[3, 3])));
        assert!(dbcl_loss(&tape, a, b, &ContrastiveConfig::default()).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let mk = |v: f64| tape.leaf(ArrayD::from_elem(IxDyn(&[]), v));
        let mut config = ContrastiveConfig::default();
        let (_, bundle) = total_loss(&tape, mk(0.5), mk(0.25), mk(0.125), 3, &config).unwrap();
        assert!((bundle.l_total - 0.875).abs() < 1e-12);
        assert_eq!(bundle.n_pos_pairs, 3);

        config.lambda_lbcl = 0.0;
        config.lambda_dbcl = 0.0;
        let (_, bundle) = total_loss(&tape, mk(0.5), mk(0.25), mk(0.125), 0, &config).unwrap();
        assert!((bundle.l_total - bundle.l_sc).abs() < 1e-12);

        config.lambda_lbcl = 2.0;
        let (_, b2) = total_loss(&tape, mk(0.5), mk(0.25), mk(0.125), 0, &config).unwrap();
        config.lambda_lbcl = 1.0;
        let (_, b1) = total_loss(&tape, mk(0.5), mk(0.25), mk(0.125), 0, &config).unwrap();
        assert!((b2.l_total - b1.l_total - 0.25).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_nan_components() {
        let tape = Tape::new();
        let mk = |v: f64| tape.leaf(ArrayD::from_elem(IxDyn(&[]), v));
        let err = total_loss(
            &tape,
            mk(0.5),
            mk(f64::NAN),
            mk(0.1),
            0,
            &ContrastiveConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref c) if c == "l_lbcl"));
    }

    #[test]
    fn lbcl_invariances() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let rows = rand_rows(6, 4, &mut rng);
        let labels = [0usize, 1, 2, 0, 1, 2];
        let config = cfg(0.2, SelfPairMode::Exclude);
        let eval = |rows: &[Vec<f64>], labels: &[usize]| {
            let tape = Tape::new();
            let rep = leaf_from(&tape, rows);
            let (loss, _) = lbcl_loss(&tape, rep, labels, &config).unwrap();
            tape.scalar_value(loss)
        };
        let base = eval(&rows, &labels);

        // Simultaneous permutation of rows and labels.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert!((eval(&prows, &plabels) - base).abs() < 1e-8);

        // Positive per-row rescaling with normalization on.
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (0.5 + i as f64)).collect())
            .collect();
        assert!((eval(&scaled, &labels) - base).abs() < 1e-8);

        // Bijective relabeling.
        let relabeled: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        assert!((eval(&rows, &relabeled) - base).abs() < 1e-8);
    }

    #[test]
    fn dbcl_orthogonal_transform_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = rand_rows(4, 2, &mut rng);
        let b = rand_rows(4, 2, &mut rng);
        let theta: f64 = 0.83;
        let rot = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    vec![
                        r[0] * theta.cos() - r[1] * theta.sin(),
                        r[0] * theta.sin() + r[1] * theta.cos(),
                    ]
                })
                .collect()
        };
        let eval = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let tape = Tape::new();
            let rep = leaf_from(&tape, a);
            let rep_aug = leaf_from(&tape, b);
            tape.scalar_value(
                dbcl_loss(&tape, rep, rep_aug, &cfg(0.4, SelfPairMode::Exclude)).unwrap(),
            )
        };
        assert!((eval(&rot(&a), &rot(&b)) - eval(&a, &b)).abs() < 1e-10);
    }
}

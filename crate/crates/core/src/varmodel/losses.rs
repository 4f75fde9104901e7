//! Contrastive training objectives over hypersphere embeddings, computed on
//! the tape so gradients flow back through both encoder branches.

use super::{encode_images_on_tape, encode_sounds_on_tape, VarConfig, VarError};
use crate::numerics::{ef, Element, ParamStore, Tape, Tensor, Var};

/// Parameters bound onto a tape in store order, trainable or frozen.
pub struct BoundVar<E: Element> {
    names: Vec<String>,
    vars: Vec<Var<E>>,
}

impl<E: Element> BoundVar<E> {
    pub fn trainable(tape: &Tape<E>, store: &ParamStore<E>) -> Self {
        Self {
            names: store.names().to_vec(),
            vars: store.tensors().iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    pub fn frozen(tape: &Tape<E>, store: &ParamStore<E>) -> Self {
        Self {
            names: store.names().to_vec(),
            vars: store.tensors().iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Bind pre-existing tape vars (used by verification harnesses that
    /// probe parameters coordinate by coordinate).
    pub fn from_vars(names: Vec<String>, vars: Vec<Var<E>>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Var<E> {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unbound parameter {name}"));
        self.vars[i].clone()
    }

    pub fn vars(&self) -> &[Var<E>] {
        &self.vars
    }
}

/// Pairwise similarity matrix z z^T / tau with the diagonal pushed to -inf
/// (practically: -1e30) so each anchor excludes itself from the log-sum-exp.
fn masked_similarities<E: Element>(tape: &Tape<E>, z: &Var<E>, tau: f64) -> (Var<E>, Var<E>) {
    let n = z.shape()[0];
    let sims = z.matmul_nt(z).mul_scalar(1.0 / tau);
    let mut diag = vec![E::zero(); n * n];
    for k in 0..n {
        diag[k * n + k] = ef::<E>(-1e30);
    }
    let masked = sims.add(&tape.constant(Tensor::new(vec![n, n], diag).unwrap()));
    (sims, masked)
}

/// Supervised contrastive loss over 2N embeddings with intent labels.
/// Anchors whose positive set is empty are skipped; if every anchor is
/// skipped the batch is degenerate and an error is returned.
pub fn supcon_loss<E: Element>(tape: &Tape<E>, z: &Var<E>, labels: &[usize], tau: f64) -> Result<Var<E>, VarError> {
    let n = z.shape()[0];
    if labels.len() != n {
        return Err(VarError::ShapeMismatch(format!("{} labels for {} embeddings", labels.len(), n)));
    }
    if n < 2 {
        return Err(VarError::BatchTooSmall(n));
    }
    let mut pos_weight = vec![E::zero(); n * n];
    let mut active = vec![E::zero(); n];
    let mut any_active = false;
    for k in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != k && labels[p] == labels[k]).collect();
        if positives.is_empty() {
            continue;
        }
        any_active = true;
        active[k] = E::one();
        let w = ef::<E>(1.0 / positives.len() as f64);
        for p in positives {
            pos_weight[k * n + p] = w;
        }
    }
    if !any_active {
        return Err(VarError::AllAnchorsSkipped);
    }
    let (sims, masked) = masked_similarities(tape, z, tau);
    let lse = masked.logsumexp_rows();
    let lse_term = lse.dot(&tape.constant(Tensor::new(vec![n], active).unwrap()));
    let pos_term = sims.mul(&tape.constant(Tensor::new(vec![n, n], pos_weight).unwrap())).sum_all();
    Ok(lse_term.sub(&pos_term))
}

/// Self-supervised contrastive loss: each element's only positive is its
/// paired partner. `pairing[k]` must be an involution without fixed points.
pub fn ssc_loss<E: Element>(tape: &Tape<E>, z: &Var<E>, pairing: &[usize], tau: f64) -> Result<Var<E>, VarError> {
    let n = z.shape()[0];
    if pairing.len() != n {
        return Err(VarError::UnpairedElement(format!("{} pairing entries for {} embeddings", pairing.len(), n)));
    }
    for k in 0..n {
        let p = pairing[k];
        if p >= n || p == k || pairing[p] != k {
            return Err(VarError::UnpairedElement(format!("element {k} pairs to {p}")));
        }
    }
    let mut pos = vec![E::zero(); n * n];
    for k in 0..n {
        pos[k * n + pairing[k]] = E::one();
    }
    let (sims, masked) = masked_similarities(tape, z, tau);
    let lse = masked.logsumexp_rows();
    let lse_term = lse.dot(&tape.constant(Tensor::full(vec![n], E::one())));
    let pos_term = sims.mul(&tape.constant(Tensor::new(vec![n, n], pos).unwrap())).sum_all();
    Ok(lse_term.sub(&pos_term))
}

/// Hinge triplet loss max(0, z_i . z_neg - z_i . z_pos + margin) for unit
/// vectors.
pub fn triplet_loss<E: Element>(
    tape: &Tape<E>,
    z_anchor: &Var<E>,
    z_pos: &Var<E>,
    z_neg: &Var<E>,
    margin: f64,
) -> Var<E> {
    let d_pos = z_anchor.dot(z_pos);
    let d_neg = z_anchor.dot(z_neg);
    d_neg.sub(&d_pos).add(&tape.constant(Tensor::scalar(ef::<E>(margin)))).relu()
}

/// Mean hinge triplet loss over rows of [B,d] anchor/positive/negative
/// matrices.
pub fn triplet_loss_batch<E: Element>(
    tape: &Tape<E>,
    z_anchor: &Var<E>,
    z_pos: &Var<E>,
    z_neg: &Var<E>,
    margin: f64,
) -> Var<E> {
    let b = z_anchor.shape()[0];
    let d_pos = z_anchor.mul(z_pos).row_sum();
    let d_neg = z_anchor.mul(z_neg).row_sum();
    let m = tape.constant(Tensor::full(vec![b], ef::<E>(margin)));
    d_neg.sub(&d_pos).add(&m).relu().mean_all()
}

/// Per-element binary cross entropy against hard labels, probabilities
/// clipped to [1e-7, 1 - 1e-7].
pub fn bce_terms<E: Element>(tape: &Tape<E>, probs: &Var<E>, targets: &[f64]) -> Var<E> {
    let n = probs.shape()[0];
    assert_eq!(targets.len(), n, "bce target length mismatch");
    let p = probs.clamp(1e-7, 1.0 - 1e-7);
    let ones = tape.constant(Tensor::full(vec![n], E::one()));
    let e = tape.constant(Tensor::from_f64(vec![n], targets).unwrap());
    let not_e = ones.sub(&e);
    let one_minus_p = ones.sub(&p);
    e.mul(&p.ln_()).add(&not_e.mul(&one_minus_p.ln_())).neg()
}

/// Non-empty targets (1.0 unless the label is the empty intent).
fn nonempty_targets(labels: &[usize], empty: usize) -> Vec<f64> {
    labels.iter().map(|&y| if y == empty { 0.0 } else { 1.0 }).collect()
}

/// The combined batch objective: alpha1 * SupCon over all 2N embeddings
/// plus alpha2 * mean over the batch of both binary-head BCE terms.
/// Embedding order is [images 0..N, sounds 0..N].
pub fn var_loss<E: Element>(
    tape: &Tape<E>,
    bound: &BoundVar<E>,
    cfg: &VarConfig,
    images: &Var<E>,
    sounds: &Var<E>,
    labels: &[usize],
) -> Result<Var<E>, VarError> {
    let n = labels.len();
    if n < 2 {
        return Err(VarError::BatchTooSmall(n));
    }
    let img = encode_images_on_tape(bound, cfg, images)?;
    let snd = encode_sounds_on_tape(bound, cfg, sounds)?;
    let z = img.z.concat_rows(&snd.z);
    let mut both: Vec<usize> = labels.to_vec();
    both.extend_from_slice(labels);
    let contrastive = supcon_loss(tape, &z, &both, cfg.temperature)?;
    let mut loss = contrastive.mul_scalar(cfg.alpha1);
    if cfg.centered {
        let targets = nonempty_targets(labels, cfg.empty_intent());
        let bce = bce_terms(tape, &img.e_hat, &targets).add(&bce_terms(tape, &snd.e_hat, &targets)).mean_all();
        loss = loss.add(&bce.mul_scalar(cfg.alpha2));
    }
    Ok(loss)
}

/// The fine-tuning objective: SupCon replaced by the self-supervised loss
/// with pairing k <-> k+N; empty labels derived from the sound being the
/// all-zero matrix (`empties`).
pub fn finetune_loss<E: Element>(
    tape: &Tape<E>,
    bound: &BoundVar<E>,
    cfg: &VarConfig,
    images: &Var<E>,
    sounds: &Var<E>,
    empties: &[bool],
) -> Result<Var<E>, VarError> {
    let n = empties.len();
    if n < 2 {
        return Err(VarError::BatchTooSmall(n));
    }
    let img = encode_images_on_tape(bound, cfg, images)?;
    let snd = encode_sounds_on_tape(bound, cfg, sounds)?;
    let z = img.z.concat_rows(&snd.z);
    let pairing: Vec<usize> = (0..2 * n).map(|k| if k < n { k + n } else { k - n }).collect();
    let contrastive = ssc_loss(tape, &z, &pairing, cfg.temperature)?;
    let mut loss = contrastive.mul_scalar(cfg.alpha1);
    if cfg.centered {
        let targets: Vec<f64> = empties.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
        let bce = bce_terms(tape, &img.e_hat, &targets).add(&bce_terms(tape, &snd.e_hat, &targets)).mean_all();
        loss = loss.add(&bce.mul_scalar(cfg.alpha2));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::seeding;
    use rand::Rng;

    fn unit_rows(data: &[f64], rows: usize, cols: usize) -> Tensor<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(row.iter().map(|x| x / norm));
        }
        Tensor::new(vec![rows, cols], out).unwrap()
    }

    fn random_unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeding::rng(seed, "loss-test", 0);
        let raw: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        unit_rows(&raw, rows, cols)
    }

    /// Direct high-precision evaluation of the supervised contrastive loss,
    /// summing over all anchor/positive pairs without the log-sum-exp trick.
    pub(crate) fn supcon_oracle(z: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
        let (n, d) = (z.shape()[0], z.shape()[1]);
        let dot = |a: usize, b: usize| -> f64 {
            (0..d).map(|j| z.data()[a * d + j] * z.data()[b * d + j]).sum::<f64>()
        };
        let mut total = 0.0;
        for k in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&p| p != k && labels[p] == labels[k]).collect();
            if positives.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&j| j != k).map(|j| (dot(k, j) / tau).exp()).sum();
            let mut anchor = 0.0;
            for &p in &positives {
                anchor += ((dot(k, p) / tau).exp() / denom).ln();
            }
            total -= anchor / positives.len() as f64;
        }
        total
    }

    pub(crate) fn ssc_oracle(z: &Tensor<f64>, pairing: &[usize], tau: f64) -> f64 {
        let (n, d) = (z.shape()[0], z.shape()[1]);
        let dot = |a: usize, b: usize| -> f64 {
            (0..d).map(|j| z.data()[a * d + j] * z.data()[b * d + j]).sum::<f64>()
        };
        let mut total = 0.0;
        for k in 0..n {
            let denom: f64 = (0..n).filter(|&j| j != k).map(|j| (dot(k, j) / tau).exp()).sum();
            total -= ((dot(k, pairing[k]) / tau).exp() / denom).ln();
        }
        total
    }

    fn eval_supcon(z: Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
        let tape = Tape::new();
        let zv = tape.constant(z);
        supcon_loss(&tape, &zv, labels, tau).unwrap().value().item()
    }

    #[test]
    fn single_pair_supcon_is_zero() {
        let z = random_unit_rows(2, 4, 3);
        let loss = eval_supcon(z, &[0, 0], 0.1);
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn identical_embeddings_equal_labels_give_logs_of_batch_size() {
        // N = 2 pairs, all four embeddings identical: each ratio 1/3,
        // loss = 4 ln 3, independent of tau
        let one = [1.0, 0.0, 0.0];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&one);
        }
        let z = Tensor::new(vec![4, 3], data).unwrap();
        for tau in [0.05, 0.1, 1.0] {
            let loss = eval_supcon(z.clone(), &[0, 0, 0, 0], tau);
            assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-9, "tau {tau}: {loss}");
        }
    }

    #[test]
    fn supcon_matches_bruteforce_oracle() {
        for seed in 0..20u64 {
            let mut rng = seeding::rng(seed, "supcon-oracle", 1);
            let n2 = 6; // N = 3 pairs
            let z = random_unit_rows(n2, 5, seed + 100);
            let labels: Vec<usize> = {
                let half: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
                half.iter().chain(half.iter()).cloned().collect()
            };
            let expected = supcon_oracle(&z, &labels, 0.1);
            if labels.iter().all(|&l| labels.iter().filter(|&&x| x == l).count() == 1) {
                continue;
            }
            let got = eval_supcon(z, &labels, 0.1);
            assert!((got - expected).abs() < 1e-9, "seed {seed}: {got} vs {expected}");
        }
    }

    #[test]
    fn supcon_all_unique_labels_errors() {
        let tape = Tape::new();
        let z = tape.constant(random_unit_rows(3, 4, 9));
        assert!(matches!(supcon_loss(&tape, &z, &[0, 1, 2], 0.1), Err(VarError::AllAnchorsSkipped)));
    }

    #[test]
    fn supcon_invariant_to_batch_permutation() {
        let mut rng = seeding::rng(77, "perm", 0);
        let z = random_unit_rows(8, 4, 42);
        let labels = vec![0, 1, 0, 2, 1, 2, 0, 1];
        let base = eval_supcon(z.clone(), &labels, 0.1);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut pd = Vec::with_capacity(32);
            let mut pl = Vec::with_capacity(8);
            for &p in &perm {
                pd.extend_from_slice(&z.data()[p * 4..(p + 1) * 4]);
                pl.push(labels[p]);
            }
            let permuted = eval_supcon(Tensor::new(vec![8, 4], pd).unwrap(), &pl, 0.1);
            assert!((permuted - base).abs() < 1e-9);
        }
    }

    #[test]
    fn ssc_single_pair_is_zero_and_axes_case_matches_closed_form() {
        let tape = Tape::new();
        let z = tape.constant(random_unit_rows(2, 4, 5));
        let loss = ssc_loss(&tape, &z, &[1, 0], 1.0).unwrap().value().item();
        assert!(loss.abs() < 1e-12);

        // 2N = 4 with z1 = z2 = e1, z3 = z4 = e2, tau = 1:
        // per-anchor term log(e + 2) - 1, total 4 (log(e+2) - 1)
        let data = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let z = Tensor::new(vec![4, 2], data).unwrap();
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let loss = ssc_loss(&tape, &zv, &[1, 0, 3, 2], 1.0).unwrap().value().item();
        let expected = 4.0 * ((std::f64::consts::E + 2.0).ln() - 1.0);
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        assert!((loss - 2.2057).abs() < 1e-3);
        assert!((loss - ssc_oracle(&z, &[1, 0, 3, 2], 1.0)).abs() < 1e-9);
    }

    #[test]
    fn ssc_rejects_bad_pairings() {
        let tape = Tape::new();
        let z = tape.constant(random_unit_rows(4, 3, 8));
        assert!(matches!(ssc_loss(&tape, &z, &[0, 1, 3, 2], 0.1), Err(VarError::UnpairedElement(_))));
        assert!(matches!(ssc_loss(&tape, &z, &[2, 3, 0], 0.1), Err(VarError::UnpairedElement(_))));
        assert!(matches!(ssc_loss(&tape, &z, &[2, 3, 1, 0], 0.1), Err(VarError::UnpairedElement(_))));
    }

    #[test]
    fn ssc_equals_supcon_when_every_class_has_one_pair() {
        for seed in 0..20u64 {
            let n = 4; // pairs
            let z = random_unit_rows(2 * n, 6, seed + 500);
            let labels: Vec<usize> = (0..n).chain(0..n).collect();
            let pairing: Vec<usize> = (0..2 * n).map(|k| if k < n { k + n } else { k - n }).collect();
            let tape = Tape::new();
            let zv = tape.constant(z.clone());
            let a = supcon_loss(&tape, &zv, &labels, 0.1).unwrap().value().item();
            let b = ssc_loss(&tape, &zv, &pairing, 0.1).unwrap().value().item();
            assert!((a - b).abs() < 1e-9, "seed {seed}: supcon {a} vs ssc {b}");
        }
    }

    #[test]
    fn triplet_cases() {
        let tape: Tape<f64> = Tape::new();
        let e1 = tape.constant(Tensor::from_f64(vec![3], &[1.0, 0.0, 0.0]).unwrap());
        let e2 = tape.constant(Tensor::from_f64(vec![3], &[0.0, 1.0, 0.0]).unwrap());
        // positive = anchor, negative orthogonal: max(0, 0 - 1 + 0.5) = 0
        let loss = triplet_loss(&tape, &e1, &e1, &e2, 0.5).value().item();
        assert_eq!(loss, 0.0);
        // negative = anchor, positive orthogonal: 1 - 0 + 0.5 = 1.5
        let loss = triplet_loss(&tape, &e1, &e2, &e1, 0.5).value().item();
        assert!((loss - 1.5).abs() < 1e-12);
    }

    #[test]
    fn triplet_random_matches_formula_and_range() {
        for seed in 0..20u64 {
            let z = random_unit_rows(3, 5, seed + 900);
            let row = |k: usize| Tensor::new(vec![5], z.data()[k * 5..(k + 1) * 5].to_vec()).unwrap();
            let tape = Tape::new();
            let (a, p, ng) = (tape.constant(row(0)), tape.constant(row(1)), tape.constant(row(2)));
            let got = triplet_loss(&tape, &a, &p, &ng, 0.5).value().item();
            let dot = |x: &Tensor<f64>, y: &Tensor<f64>| -> f64 {
                x.data().iter().zip(y.data()).map(|(u, v)| u * v).sum()
            };
            let expected = (dot(&row(0), &row(2)) - dot(&row(0), &row(1)) + 0.5).max(0.0);
            assert!((got - expected).abs() < 1e-12);
            assert!((0.0..=2.5).contains(&got));
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        for seed in 0..10u64 {
            let z = random_unit_rows(6, 4, seed);
            let labels = [0, 1, 0, 0, 1, 0];
            let loss = eval_supcon(z.clone(), &labels, 0.1);
            assert!(loss >= 0.0);
            let pairing = [3, 4, 5, 0, 1, 2];
            let tape = Tape::new();
            let zv = tape.constant(z);
            let loss = ssc_loss(&tape, &zv, &pairing, 0.1).unwrap().value().item();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn temperature_preserves_argmax_of_inner_ratio() {
        let z = random_unit_rows(6, 8, 31);
        let d = 8;
        let dot = |a: usize, b: usize| -> f64 { (0..d).map(|j| z.data()[a * d + j] * z.data()[b * d + j]).sum() };
        for k in 0..6 {
            let mut best_small = (0, f64::MIN);
            let mut best_large = (0, f64::MIN);
            for j in 0..6 {
                if j == k {
                    continue;
                }
                let s_small = (dot(k, j) / 0.05).exp();
                let s_large = (dot(k, j) / 1.0).exp();
                if s_small > best_small.1 {
                    best_small = (j, s_small);
                }
                if s_large > best_large.1 {
                    best_large = (j, s_large);
                }
            }
            assert_eq!(best_small.0, best_large.0);
        }
    }

    #[test]
    fn supcon_gradient_through_normalization_checks_out() {
        for seed in 0..5u64 {
            let mut rng = seeding::rng(seed, "supcon-grad", 0);
            let raw: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let theta = Tensor::new(vec![4, 5], raw).unwrap();
            let labels = [0, 1, 0, 1];
            let err = grad_check(&[theta], 1e-5, |tape, vars| {
                let z = vars[0].l2_normalize_rows().unwrap();
                supcon_loss(tape, &z, &labels, 0.1).unwrap()
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }
}

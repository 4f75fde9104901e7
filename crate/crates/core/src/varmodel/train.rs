//! Representation training loops for the contrastive objective and the
//! triplet baseline.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{bce_terms, triplet_loss_batch, var_loss, BoundVar};
use super::{encode_images_on_tape, encode_sounds_on_tape, images_to_tensor, sounds_to_tensor, VarError, VarParams};
use crate::envsim::VisualAudioPair;
use crate::numerics::{adam_step, AdamConfig, AdamState, Element, Tape};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Label-aware contrastive objective plus binary centering terms.
    Supcon,
    /// The triplet baseline: anchors are images, positives their own
    /// sounds, negatives sounds sampled from a different intent.
    Triplet,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn batch_tensors<'a, E: Element>(
    params: &VarParams<E>,
    dataset: &'a [VisualAudioPair],
    idx: &[usize],
) -> Result<(crate::numerics::Tensor<E>, crate::numerics::Tensor<E>, Vec<usize>), VarError> {
    let images: Vec<_> = idx.iter().map(|&i| &dataset[i].image).collect();
    let sounds: Vec<_> = idx.iter().map(|&i| &dataset[i].sound).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| dataset[i].intent).collect();
    Ok((
        images_to_tensor(&images, params.cfg.image_size)?,
        sounds_to_tensor(&sounds, params.cfg.sound_shape)?,
        labels,
    ))
}

/// Train the representation in place with seeded shuffling and per-batch
/// adaptive-moment updates. Returns the per-epoch mean loss curve and
/// optionally writes a final checkpoint.
pub fn train_var<E: Element>(
    params: &mut VarParams<E>,
    dataset: &[VisualAudioPair],
    epochs: usize,
    batch: usize,
    opt: AdamConfig,
    seed: u64,
    mode: LossMode,
    checkpoint_out: Option<&Path>,
) -> Result<TrainReport, VarError> {
    if batch < 2 {
        return Err(VarError::BatchTooSmall(batch));
    }
    if dataset.len() < 2 * batch.min(dataset.len().max(1)) && dataset.len() < 4 {
        return Err(VarError::DegenerateDataset(format!("{} pairs is too few", dataset.len())));
    }
    {
        let first = dataset[0].intent;
        if dataset.iter().all(|p| p.intent == first) {
            return Err(VarError::DegenerateDataset("single intent class".into()));
        }
    }

    let mut adam = AdamState::for_params(opt, params.store.tensors());
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = seeding::rng(seed, "var-epoch", epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let (images, sounds, labels) = batch_tensors(params, dataset, chunk)?;
            let tape = Tape::new();
            let bound = BoundVar::trainable(&tape, &params.store);
            let images = tape.constant(images);
            let sounds = tape.constant(sounds);
            let loss = match mode {
                LossMode::Supcon => var_loss(&tape, &bound, &params.cfg, &images, &sounds, &labels)?,
                LossMode::Triplet => {
                    triplet_objective(&tape, &bound, params, dataset, chunk, &labels, &images, &sounds, &mut rng)?
                }
            };
            total += loss.value().item().to_f64().unwrap();
            batches += 1;
            let grads = loss.backward()?;
            let grad_tensors: Vec<_> = bound.vars().iter().map(|v| grads.wrt(v)).collect();
            adam_step(params.store.tensors_mut(), &grad_tensors, &mut adam)?;
        }
        curve.push(if batches > 0 { total / batches as f64 } else { f64::NAN });
    }
    if let Some(path) = checkpoint_out {
        params.save(path)?;
    }
    Ok(TrainReport { epoch_losses: curve })
}

/// Triplet objective for one batch: anchor images against their own sounds
/// and a negative sound of a different intent drawn from the dataset.
#[allow(clippy::too_many_arguments)]
fn triplet_objective<E: Element>(
    tape: &Tape<E>,
    bound: &BoundVar<E>,
    params: &VarParams<E>,
    dataset: &[VisualAudioPair],
    chunk: &[usize],
    labels: &[usize],
    images: &crate::numerics::Var<E>,
    sounds: &crate::numerics::Var<E>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<crate::numerics::Var<E>, VarError> {
    // negatives: for each batch element, a sound from any other intent
    let mut neg_idx = Vec::with_capacity(chunk.len());
    for &label in labels {
        let mut tries = 0;
        let neg = loop {
            let cand = rng.random_range(0..dataset.len());
            if dataset[cand].intent != label {
                break cand;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(VarError::DegenerateDataset("cannot sample a negative with a different intent".into()));
            }
        };
        neg_idx.push(neg);
    }
    let neg_sounds: Vec<_> = neg_idx.iter().map(|&i| &dataset[i].sound).collect();
    let neg = tape.constant(sounds_to_tensor(&neg_sounds, params.cfg.sound_shape)?);

    let img = encode_images_on_tape(bound, &params.cfg, images)?;
    let pos = encode_sounds_on_tape(bound, &params.cfg, sounds)?;
    let negenc = encode_sounds_on_tape(bound, &params.cfg, &neg)?;
    let mut loss = triplet_loss_batch(tape, &img.z, &pos.z, &negenc.z, params.cfg.margin);
    if params.cfg.centered {
        let targets: Vec<f64> =
            labels.iter().map(|&y| if y == params.cfg.empty_intent() { 0.0 } else { 1.0 }).collect();
        let bce = bce_terms(tape, &img.e_hat, &targets).add(&bce_terms(tape, &pos.e_hat, &targets)).mean_all();
        loss = loss.add(&bce.mul_scalar(params.cfg.alpha2));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{MfccConfig, SynthConfig};
    use crate::envsim::{collect_pairs, DomainParams, EnvConfig};
    use crate::varmodel::tiny_config;

    fn tiny_dataset(count: usize, seed: u64) -> (Vec<VisualAudioPair>, crate::varmodel::VarConfig) {
        let env_cfg = EnvConfig { image_size: 16, intent_count: 3, ..EnvConfig::default() };
        let domain = DomainParams::clean(3);
        let mfcc = MfccConfig { target_frames: 20, coefficient_count: 5, ..MfccConfig::default() };
        let pairs = collect_pairs(&env_cfg, &domain, &SynthConfig::default(), &mfcc, count, seed).unwrap();
        (pairs, tiny_config())
    }

    #[test]
    fn two_epoch_run_is_bit_deterministic() {
        let (pairs, cfg) = tiny_dataset(24, 5);
        let mut a = VarParams::<f64>::init(cfg.clone(), 1);
        let mut b = VarParams::<f64>::init(cfg, 1);
        let ra = train_var(&mut a, &pairs, 2, 8, AdamConfig::default(), 7, LossMode::Supcon, None).unwrap();
        let rb = train_var(&mut b, &pairs, 2, 8, AdamConfig::default(), 7, LossMode::Supcon, None).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn loss_decreases_with_training() {
        let (pairs, cfg) = tiny_dataset(60, 9);
        let mut params = VarParams::<f64>::init(cfg, 3);
        let report =
            train_var(&mut params, &pairs, 10, 12, AdamConfig::with_lr(1e-3), 11, LossMode::Supcon, None).unwrap();
        assert!(
            report.epoch_losses[9] < report.epoch_losses[0],
            "loss curve {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn single_class_dataset_rejected() {
        let (mut pairs, cfg) = tiny_dataset(12, 2);
        for p in &mut pairs {
            p.intent = 1;
            p.sound = crate::audio::MfccMatrix::new(20, 5, vec![0.5; 100]);
        }
        let mut params = VarParams::<f64>::init(cfg, 3);
        let r = train_var(&mut params, &pairs, 1, 4, AdamConfig::default(), 0, LossMode::Supcon, None);
        assert!(matches!(r, Err(VarError::DegenerateDataset(_))));
    }

    #[test]
    fn triplet_mode_trains() {
        let (pairs, cfg) = tiny_dataset(40, 13);
        let mut params = VarParams::<f64>::init(cfg, 5);
        let report =
            train_var(&mut params, &pairs, 6, 10, AdamConfig::with_lr(1e-3), 3, LossMode::Triplet, None).unwrap();
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert!(report.epoch_losses[5] < report.epoch_losses[0] + 0.05);
    }

    #[test]
    fn training_separates_intent_clusters() {
        let (pairs, cfg) = tiny_dataset(90, 21);
        let mut params = VarParams::<f64>::init(cfg, 8);
        train_var(&mut params, &pairs, 12, 16, AdamConfig::with_lr(1.5e-3), 5, LossMode::Supcon, None).unwrap();
        // gated joint-space separation: intra-class cosine vs inter-class
        let images: Vec<_> = pairs.iter().map(|p| &p.image).collect();
        let outs = crate::varmodel::encode_image_batch(&params, &images).unwrap();
        let (mut intra, mut ni) = (0.0, 0usize);
        let (mut inter, mut nx) = (0.0, 0usize);
        for a in 0..outs.len() {
            for b in (a + 1)..outs.len() {
                if pairs[a].intent == 3 || pairs[b].intent == 3 {
                    continue; // empty intent gates to zero
                }
                let dot: f64 = outs[a].z.data().iter().zip(outs[b].z.data()).map(|(x, y)| x * y).sum();
                if pairs[a].intent == pairs[b].intent {
                    intra += dot;
                    ni += 1;
                } else {
                    inter += dot;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra > inter, "intra {intra} <= inter {inter}");
    }
}

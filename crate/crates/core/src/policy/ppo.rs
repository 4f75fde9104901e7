//! Clipped-surrogate PPO update over sequence-chunked recurrent minibatches.

use rand::seq::SliceRandom;

use super::gae::compute_gae;
use super::{ef_vec, forward_step_on_tape, LstmState, PolicyError, PolicyParams, PpoConfig};
use crate::envsim::ObsImage;
use crate::numerics::{adam_step, AdamState, Element, Tape, Tensor, Var};
use crate::seeding;
use crate::varmodel::{images_to_tensor, BoundVar};

/// One stored environment step. `hidden` is the recurrent state *before*
/// the step, so chunk replay can restart anywhere.
#[derive(Debug, Clone)]
pub struct Transition {
    pub image: ObsImage,
    pub v_image: Vec<f64>,
    pub v_goal: Vec<f64>,
    pub robot_state: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub hidden: LstmState,
}

/// A fixed-length rollout plus the bootstrap value of the truncated tail
/// and per-episode bookkeeping for logging.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub steps: Vec<Transition>,
    pub bootstrap_value: f64,
    pub episode_returns: Vec<f64>,
    pub episode_successes: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

struct MinibatchTensors<E: Element> {
    images: Vec<Tensor<E>>,
    v_image: Vec<Tensor<E>>,
    v_goal: Vec<Tensor<E>>,
    robot: Vec<Tensor<E>>,
    actions: Vec<Vec<usize>>,
    old_log_probs: Vec<Tensor<E>>,
    advantages: Vec<Tensor<E>>,
    returns: Vec<Tensor<E>>,
    reset_masks: Vec<Option<Tensor<E>>>,
    h0: Tensor<E>,
    c0: Tensor<E>,
}

fn gather_minibatch<E: Element>(
    rollout: &Rollout,
    chunk_starts: &[usize],
    chunk_len: usize,
    img_size: usize,
    advantages: &[f64],
    returns: &[f64],
    hidden: usize,
) -> Result<MinibatchTensors<E>, PolicyError> {
    let b = chunk_starts.len();
    let v_dim = rollout.steps[0].v_image.len();
    let a_dim = rollout.steps[0].robot_state.len();
    let mut out = MinibatchTensors {
        images: Vec::with_capacity(chunk_len),
        v_image: Vec::with_capacity(chunk_len),
        v_goal: Vec::with_capacity(chunk_len),
        robot: Vec::with_capacity(chunk_len),
        actions: Vec::with_capacity(chunk_len),
        old_log_probs: Vec::with_capacity(chunk_len),
        advantages: Vec::with_capacity(chunk_len),
        returns: Vec::with_capacity(chunk_len),
        reset_masks: Vec::with_capacity(chunk_len),
        h0: Tensor::zeros(vec![b, hidden]),
        c0: Tensor::zeros(vec![b, hidden]),
    };
    {
        let mut h = Vec::with_capacity(b * hidden);
        let mut c = Vec::with_capacity(b * hidden);
        for &s in chunk_starts {
            h.extend(ef_vec::<E>(&rollout.steps[s].hidden.h));
            c.extend(ef_vec::<E>(&rollout.steps[s].hidden.c));
        }
        out.h0 = Tensor::new(vec![b, hidden], h).unwrap();
        out.c0 = Tensor::new(vec![b, hidden], c).unwrap();
    }
    for t in 0..chunk_len {
        let rows: Vec<usize> = chunk_starts.iter().map(|&s| s + t).collect();
        let imgs: Vec<&ObsImage> = rows.iter().map(|&i| &rollout.steps[i].image).collect();
        out.images.push(images_to_tensor(&imgs, img_size)?);
        let mut vi = Vec::with_capacity(b * v_dim);
        let mut vg = Vec::with_capacity(b * v_dim);
        let mut mt = Vec::with_capacity(b * a_dim);
        let mut acts = Vec::with_capacity(b);
        let mut old = Vec::with_capacity(b);
        let mut adv = Vec::with_capacity(b);
        let mut ret = Vec::with_capacity(b);
        for &i in &rows {
            let s = &rollout.steps[i];
            vi.extend(ef_vec::<E>(&s.v_image));
            vg.extend(ef_vec::<E>(&s.v_goal));
            mt.extend(ef_vec::<E>(&s.robot_state));
            acts.push(s.action);
            old.push(s.log_prob);
            adv.push(advantages[i]);
            ret.push(returns[i]);
        }
        out.v_image.push(Tensor::new(vec![b, v_dim], vi).unwrap());
        out.v_goal.push(Tensor::new(vec![b, v_dim], vg).unwrap());
        out.robot.push(Tensor::new(vec![b, a_dim], mt).unwrap());
        out.actions.push(acts);
        out.old_log_probs.push(Tensor::from_f64(vec![b], &old)?);
        out.advantages.push(Tensor::from_f64(vec![b], &adv)?);
        out.returns.push(Tensor::from_f64(vec![b], &ret)?);
        // hidden resets between steps: mask by (1 - done) of the previous step
        out.reset_masks.push(if t == 0 {
            None
        } else {
            let mask: Vec<f64> =
                chunk_starts.iter().map(|&s| if rollout.steps[s + t - 1].done { 0.0 } else { 1.0 }).collect();
            Some(Tensor::from_f64(vec![b], &mask)?)
        });
    }
    Ok(out)
}

/// One PPO update: `cfg.epochs` passes of chunked minibatches over the
/// rollout, minimizing the clipped surrogate plus value and entropy terms.
/// Advantages are normalized over the whole rollout. Returns averaged
/// diagnostics; a non-finite loss aborts the update.
pub fn ppo_update<E: Element>(
    params: &mut PolicyParams<E>,
    rollout: &Rollout,
    cfg: &PpoConfig,
    adam: &mut AdamState<E>,
    seed: u64,
) -> Result<PpoDiagnostics, PolicyError> {
    cfg.validate()?;
    let n = rollout.steps.len();
    if n == 0 {
        return Err(PolicyError::EmptyTrajectory);
    }
    if n % cfg.chunk_len != 0 {
        return Err(PolicyError::InvalidConfig(format!("rollout length {n} not a multiple of chunk_len {}", cfg.chunk_len)));
    }
    let rewards: Vec<f64> = rollout.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = rollout.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = rollout.steps.iter().map(|s| s.done).collect();
    let (mut advantages, returns) = compute_gae(&rewards, &values, &dones, rollout.bootstrap_value, cfg.gamma, cfg.lambda)?;

    // normalize advantages over the update batch
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    for a in &mut advantages {
        *a = (*a - mean) / std;
    }

    let chunk_starts: Vec<usize> = (0..n).step_by(cfg.chunk_len).collect();
    let chunks_per_mb = (cfg.minibatch / cfg.chunk_len).max(1);
    let hidden = params.cfg.hidden;
    let img_size = params.cfg.image_size;

    let mut diag = PpoDiagnostics::default();
    let mut minibatches = 0usize;
    let mut clip_hits = 0usize;
    let mut clip_total = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = chunk_starts.clone();
        let mut rng = seeding::rng(seed, "ppo-epoch", epoch as u64);
        order.shuffle(&mut rng);
        for mb in order.chunks(chunks_per_mb) {
            let tensors =
                gather_minibatch::<E>(rollout, mb, cfg.chunk_len, img_size, &advantages, &returns, hidden)?;
            let b = mb.len();
            let tape: Tape<E> = Tape::new();
            let bound = BoundVar::trainable(&tape, &params.store);
            let mut h = tape.constant(tensors.h0.clone());
            let mut c = tape.constant(tensors.c0.clone());
            let mut policy_acc: Option<Var<E>> = None;
            let mut value_acc: Option<Var<E>> = None;
            let mut entropy_acc: Option<Var<E>> = None;
            for t in 0..cfg.chunk_len {
                if let Some(mask) = &tensors.reset_masks[t] {
                    let m = tape.constant(mask.clone()).broadcast_col(hidden);
                    h = h.mul(&m);
                    c = c.mul(&m);
                }
                let images = tape.constant(tensors.images[t].clone());
                let vi = tape.constant(tensors.v_image[t].clone());
                let vg = tape.constant(tensors.v_goal[t].clone());
                let mt = tape.constant(tensors.robot[t].clone());
                let step = forward_step_on_tape(&bound, &params.cfg, &images, &vi, &vg, &mt, &h, &c);
                h = step.h;
                c = step.c;

                let selected = step.log_probs.select_cols(&tensors.actions[t]);
                let old = tape.constant(tensors.old_log_probs[t].clone());
                let adv = tape.constant(tensors.advantages[t].clone());
                let ratio = selected.sub(&old).exp_();
                for r in ratio.value().data() {
                    let r = r.to_f64().unwrap();
                    clip_total += 1;
                    if (r - 1.0).abs() > cfg.clip {
                        clip_hits += 1;
                    }
                }
                let surr1 = ratio.mul(&adv);
                let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip).mul(&adv);
                let clipped_obj = surr1.minimum(&surr2).sum_all();
                policy_acc = Some(match policy_acc {
                    Some(acc) => acc.add(&clipped_obj),
                    None => clipped_obj,
                });

                let ret = tape.constant(tensors.returns[t].clone());
                let vdiff = step.value.sub(&ret);
                let vterm = vdiff.square().sum_all();
                value_acc = Some(match value_acc {
                    Some(acc) => acc.add(&vterm),
                    None => vterm,
                });

                let probs = step.log_probs.exp_();
                let ent = probs.mul(&step.log_probs).row_sum().neg().sum_all();
                entropy_acc = Some(match entropy_acc {
                    Some(acc) => acc.add(&ent),
                    None => ent,
                });
            }
            let count = (b * cfg.chunk_len) as f64;
            let policy_loss = policy_acc.unwrap().mul_scalar(-1.0 / count);
            let value_loss = value_acc.unwrap().mul_scalar(1.0 / count);
            let entropy = entropy_acc.unwrap().mul_scalar(1.0 / count);
            let loss = policy_loss
                .add(&value_loss.mul_scalar(cfg.value_coef))
                .sub(&entropy.mul_scalar(cfg.entropy_coef));

            let pl = policy_loss.value().item().to_f64().unwrap();
            let vl = value_loss.value().item().to_f64().unwrap();
            let en = entropy.value().item().to_f64().unwrap();
            if !loss.value().item().is_finite() {
                return Err(PolicyError::NonFinite { policy_loss: pl, value_loss: vl });
            }
            let grads = loss.backward()?;
            let grad_tensors: Vec<_> = bound.vars().iter().map(|v| grads.wrt(v)).collect();
            adam_step(params.store.tensors_mut(), &grad_tensors, adam)?;

            diag.policy_loss += pl;
            diag.value_loss += vl;
            diag.entropy += en;
            minibatches += 1;
        }
    }
    let m = minibatches.max(1) as f64;
    diag.policy_loss /= m;
    diag.value_loss /= m;
    diag.entropy /= m;
    diag.clip_fraction = if clip_total > 0 { clip_hits as f64 / clip_total as f64 } else { 0.0 };
    Ok(diag)
}

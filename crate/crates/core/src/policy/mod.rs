//! Recurrent policy/value network and its PPO trainer. The policy consumes
//! the MDP state [image, v_image, v_goal, robot state]: a fresh CNN encodes
//! the image (independently of the representation encoders), the two
//! joint-space vectors fuse by element-wise addition, and everything feeds
//! an LSTM cell with twin policy/value heads.

mod gae;
mod ppo;
mod train;

pub use gae::compute_gae;
pub use ppo::{ppo_update, PpoDiagnostics, Rollout, Transition};
pub use train::{collect_rollout, train_rl, RolloutState, UpdateLog};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::envsim::{EnvError, ObsImage, ACTION_COUNT};
use crate::numerics::{ef, Element, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::seeding;
use crate::varmodel::{images_to_tensor, BoundVar, VarError};
use rand_distr::{Distribution, Normal};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("non-finite loss during update (policy {policy_loss}, value {value_loss})")]
    NonFinite { policy_loss: f64, value_loss: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Var(#[from] VarError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub image_size: usize,
    /// Joint-space dimension of the fused command/image vectors.
    pub v_dim: usize,
    pub action_count: usize,
    pub cnn_channels: (usize, usize),
    pub cnn_fc_dim: usize,
    pub fusion_dim: usize,
    /// LSTM hidden size H.
    pub hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            v_dim: 32,
            action_count: ACTION_COUNT,
            cnn_channels: (8, 16),
            cnn_fc_dim: 64,
            fusion_dim: 128,
            hidden: 128,
        }
    }
}

impl PolicyConfig {
    fn cnn_spatial(&self) -> usize {
        let s1 = (self.image_size - 8) / 4 + 1; // k=8, stride 4
        (s1 - 4) / 2 + 1 // k=4, stride 2
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let s = self.cnn_spatial();
        let flat = self.cnn_channels.1 * s * s;
        let lstm_in = self.fusion_dim;
        vec![
            ("pol.conv0.w".into(), vec![self.cnn_channels.0, 3, 8, 8]),
            ("pol.conv0.b".into(), vec![self.cnn_channels.0]),
            ("pol.conv1.w".into(), vec![self.cnn_channels.1, self.cnn_channels.0, 4, 4]),
            ("pol.conv1.b".into(), vec![self.cnn_channels.1]),
            ("pol.fc.w".into(), vec![flat, self.cnn_fc_dim]),
            ("pol.fc.b".into(), vec![self.cnn_fc_dim]),
            ("pol.fuse.w".into(), vec![self.cnn_fc_dim + self.v_dim + self.action_count, self.fusion_dim]),
            ("pol.fuse.b".into(), vec![self.fusion_dim]),
            ("pol.lstm.w".into(), vec![lstm_in + self.hidden, 4 * self.hidden]),
            ("pol.lstm.b".into(), vec![4 * self.hidden]),
            ("pol.pi.w".into(), vec![self.hidden, self.action_count]),
            ("pol.pi.b".into(), vec![self.action_count]),
            ("pol.v.w".into(), vec![self.hidden, 1]),
            ("pol.v.b".into(), vec![1]),
        ]
    }
}

/// PPO hyperparameters and budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub total_steps: usize,
    /// Recurrent minibatches replay fixed-length chunks with their stored
    /// initial hidden states.
    pub chunk_len: usize,
    /// Write a policy checkpoint every this many updates (0 = only final).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            rollout: 2048,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            total_steps: 200_000,
            chunk_len: 16,
            checkpoint_every: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PolicyError::InvalidConfig("need 0 < gamma <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PolicyError::InvalidConfig("need 0 <= lambda <= 1".into()));
        }
        if self.clip <= 0.0 {
            return Err(PolicyError::InvalidConfig("need clip > 0".into()));
        }
        if self.chunk_len == 0 || self.rollout % self.chunk_len != 0 || self.minibatch % self.chunk_len != 0 {
            return Err(PolicyError::InvalidConfig("rollout and minibatch must be multiples of chunk_len".into()));
        }
        Ok(())
    }
}

/// One MDP state x_t = [image, v_image, v_goal, robot state].
#[derive(Debug, Clone)]
pub struct MdpState {
    pub image: ObsImage,
    pub v_image: Vec<f64>,
    pub v_goal: Vec<f64>,
    pub robot_state: Vec<f64>,
}

/// LSTM hidden pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

#[derive(Clone)]
pub struct PolicyParams<E: Element> {
    pub cfg: PolicyConfig,
    pub store: ParamStore<E>,
}

impl<E: Element> PolicyParams<E> {
    pub fn init(cfg: PolicyConfig, seed: u64) -> Self {
        let mut rng = seeding::rng(seed, "policy-init", 0);
        let mut store = ParamStore::new();
        for (name, shape) in cfg.parameter_shapes() {
            let n: usize = shape.iter().product();
            let tensor = if shape.len() == 1 {
                if name == "pol.lstm.b" {
                    // forget-gate bias starts at 1 (gate order i, f, g, o)
                    let h = cfg.hidden;
                    let mut b = vec![0.0; n];
                    for x in b.iter_mut().skip(h).take(h) {
                        *x = 1.0;
                    }
                    Tensor::from_f64(shape, &b).unwrap()
                } else {
                    Tensor::zeros(shape)
                }
            } else {
                let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[0] };
                let gain = match name.as_str() {
                    "pol.pi.w" => 0.01, // near-uniform initial policy
                    "pol.v.w" => 1.0,
                    _ => (2.0f64).sqrt(),
                };
                let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).unwrap();
                Tensor::from_f64(shape, &(0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f64>>()).unwrap()
            };
            store.push(name, tensor);
        }
        Self { cfg, store }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        checkpoint::save(path, &self.store, serde_json::to_value(&self.cfg).expect("config serializes"))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let (store, manifest) = checkpoint::load::<E>(path)?;
        let cfg: PolicyConfig = serde_json::from_value(manifest.config.clone()).map_err(CheckpointError::Manifest)?;
        checkpoint::validate_shapes(&store, &cfg.parameter_shapes())?;
        Ok(Self { cfg, store })
    }
}

/// One batched forward step on a tape.
pub struct PolicyStepVars<E: Element> {
    pub log_probs: Var<E>,
    pub value: Var<E>,
    pub h: Var<E>,
    pub c: Var<E>,
}

/// Batched recurrent step: images [B,3,n,n], v_image/v_goal [B,d],
/// robot state [B,A], hidden h/c [B,H].
#[allow(clippy::too_many_arguments)]
pub fn forward_step_on_tape<E: Element>(
    bound: &BoundVar<E>,
    cfg: &PolicyConfig,
    images: &Var<E>,
    v_image: &Var<E>,
    v_goal: &Var<E>,
    robot_state: &Var<E>,
    h: &Var<E>,
    c: &Var<E>,
) -> PolicyStepVars<E> {
    let x = images
        .conv2d(&bound.get("pol.conv0.w"), &bound.get("pol.conv0.b"), (4, 4), (0, 0))
        .relu()
        .conv2d(&bound.get("pol.conv1.w"), &bound.get("pol.conv1.b"), (2, 2), (0, 0))
        .relu();
    let shape = x.shape();
    let flat = shape[1] * shape[2] * shape[3];
    let feat = x.reshape(vec![shape[0], flat]).affine(&bound.get("pol.fc.w"), &bound.get("pol.fc.b")).relu();

    // element-wise addition fuses the two joint-space vectors
    let fused = v_image.add(v_goal);
    let joined = feat.concat_cols(&fused).concat_cols(robot_state);
    let pre = joined.affine(&bound.get("pol.fuse.w"), &bound.get("pol.fuse.b")).relu();

    let hsz = cfg.hidden;
    let gates = pre.concat_cols(h).affine(&bound.get("pol.lstm.w"), &bound.get("pol.lstm.b"));
    let i_gate = gates.slice_cols(0, hsz).sigmoid();
    let f_gate = gates.slice_cols(hsz, hsz).sigmoid();
    let g_gate = gates.slice_cols(2 * hsz, hsz).tanh_act();
    let o_gate = gates.slice_cols(3 * hsz, hsz).sigmoid();
    let c_next = f_gate.mul(c).add(&i_gate.mul(&g_gate));
    let h_next = o_gate.mul(&c_next.tanh_act());

    let logits = h_next.affine(&bound.get("pol.pi.w"), &bound.get("pol.pi.b"));
    let lse = logits.logsumexp_rows();
    let log_probs = logits.sub(&lse.broadcast_col(cfg.action_count));
    let value = h_next.affine(&bound.get("pol.v.w"), &bound.get("pol.v.b")).reshape(vec![shape[0]]);
    PolicyStepVars { log_probs, value, h: h_next, c: c_next }
}

/// Single-state forward pass: returns the categorical action distribution,
/// the value estimate, and the updated hidden state.
pub fn policy_forward<E: Element>(
    params: &PolicyParams<E>,
    state: &MdpState,
    hidden: &LstmState,
) -> Result<(Vec<f64>, f64, LstmState), PolicyError> {
    let cfg = &params.cfg;
    if state.v_image.len() != cfg.v_dim || state.v_goal.len() != cfg.v_dim {
        return Err(PolicyError::InvalidConfig(format!(
            "v dims {}/{} do not match config {}",
            state.v_image.len(),
            state.v_goal.len(),
            cfg.v_dim
        )));
    }
    let tape: Tape<E> = Tape::new();
    let bound = BoundVar::frozen(&tape, &params.store);
    let images = tape.constant(images_to_tensor(&[&state.image], cfg.image_size)?);
    let vi = tape.constant(Tensor::from_f64(vec![1, cfg.v_dim], &state.v_image)?);
    let vg = tape.constant(Tensor::from_f64(vec![1, cfg.v_dim], &state.v_goal)?);
    let mt = tape.constant(Tensor::from_f64(vec![1, cfg.action_count], &state.robot_state)?);
    let h = tape.constant(Tensor::from_f64(vec![1, cfg.hidden], &hidden.h)?);
    let c = tape.constant(Tensor::from_f64(vec![1, cfg.hidden], &hidden.c)?);
    let step = forward_step_on_tape(&bound, cfg, &images, &vi, &vg, &mt, &h, &c);
    let probs: Vec<f64> = step.log_probs.value().data().iter().map(|lp| lp.to_f64().unwrap().exp()).collect();
    let value = step.value.value().data()[0].to_f64().unwrap();
    let next = LstmState { h: step.h.value().to_f64_vec(), c: step.c.value().to_f64_vec() };
    Ok((probs, value, next))
}

pub(crate) fn ef_vec<E: Element>(xs: &[f64]) -> Vec<E> {
    xs.iter().map(|&x| ef::<E>(x)).collect()
}

#[cfg(test)]
pub(crate) fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        image_size: 16,
        v_dim: 8,
        cnn_channels: (2, 4),
        cnn_fc_dim: 8,
        fusion_dim: 16,
        hidden: 12,
        ..PolicyConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_state(cfg: &PolicyConfig) -> MdpState {
        MdpState {
            image: ObsImage::filled(cfg.image_size, [0, 0, 0]),
            v_image: vec![0.0; cfg.v_dim],
            v_goal: vec![0.0; cfg.v_dim],
            robot_state: vec![0.0; cfg.action_count],
        }
    }

    #[test]
    fn distribution_is_normalized_even_for_zero_inputs() {
        let cfg = tiny_policy_config();
        let params = PolicyParams::<f64>::init(cfg.clone(), 3);
        let (probs, value, _) = policy_forward(&params, &zero_state(&cfg), &LstmState::zeros(cfg.hidden)).unwrap();
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "sum {total}");
        assert!(probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!(value.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_policy_config();
        let params = PolicyParams::<f64>::init(cfg.clone(), 4);
        let mut state = zero_state(&cfg);
        state.v_image = (0..cfg.v_dim).map(|i| (i as f64 * 0.1).sin()).collect();
        state.v_goal = (0..cfg.v_dim).map(|i| (i as f64 * 0.2).cos()).collect();
        let hidden = LstmState::zeros(cfg.hidden);
        let a = policy_forward(&params, &state, &hidden).unwrap();
        let b = policy_forward(&params, &state, &hidden).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn fusion_is_commutative_in_the_joint_vectors() {
        let cfg = tiny_policy_config();
        let params = PolicyParams::<f64>::init(cfg.clone(), 5);
        let mut state = zero_state(&cfg);
        state.v_image = (0..cfg.v_dim).map(|i| 0.3 - i as f64 * 0.05).collect();
        state.v_goal = (0..cfg.v_dim).map(|i| -0.2 + i as f64 * 0.07).collect();
        let hidden = LstmState::zeros(cfg.hidden);
        let (pa, va, ha) = policy_forward(&params, &state, &hidden).unwrap();
        std::mem::swap(&mut state.v_image, &mut state.v_goal);
        let (pb, vb, hb) = policy_forward(&params, &state, &hidden).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(va, vb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = tiny_policy_config();
        let params = PolicyParams::<f32>::init(cfg, 8);
        let dir = std::env::temp_dir().join(format!("pol-ckpt-{}", std::process::id()));
        let path = dir.join("policy.ckpt");
        params.save(&path).unwrap();
        let loaded = PolicyParams::<f32>::load(&path).unwrap();
        assert_eq!(loaded.store, params.store);
        std::fs::remove_dir_all(&dir).ok();
    }
}

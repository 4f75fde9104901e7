//! Rollout collection against the环 environment and the outer PPO training
//! loop with frozen representation rewards.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ppo::{ppo_update, Rollout, Transition};
use super::{policy_forward, LstmState, MdpState, PolicyConfig, PolicyError, PolicyParams, PpoConfig};
use crate::audio::{MfccConfig, MfccMatrix, SynthConfig};
use crate::envsim::{Action, DomainParams, Env, EnvConfig, Observation};
use crate::numerics::{AdamConfig, AdamState, Element};
use crate::reward::{RewardContext, RewardMode};
use crate::seeding;

/// Where goal commands come from during training: the environment's own
/// one-time command, or sounds sampled uniformly from a collected set
/// (self-supervised fine-tuning).
#[derive(Clone)]
pub enum GoalSource {
    EnvCommand,
    Collected(Vec<MfccMatrix>),
}

/// Per-update training metrics, one CSV row each.
#[derive(Debug, Clone)]
pub struct UpdateLog {
    pub update: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

pub const METRICS_HEADER: &str = "update,steps,mean_return,success_rate,policy_loss,value_loss,entropy,clip_frac";

impl UpdateLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.steps,
            self.mean_return,
            self.success_rate,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.clip_frac
        )
    }
}

/// A live episode that persists across rollout boundaries.
pub struct RolloutState<E: Element> {
    pub env: Env,
    pub obs: Observation,
    pub hidden: LstmState,
    pub current_v: Vec<f64>,
    pub v_goal: Vec<f64>,
    pub episode_return: f64,
    pub episode_index: u64,
}

pub struct RolloutWorld<'a, E: Element> {
    pub env_cfg: &'a EnvConfig,
    pub domain: &'a DomainParams,
    pub synth: &'a SynthConfig,
    pub mfcc: &'a MfccConfig,
    pub ctx: &'a mut RewardContext<E>,
    pub goal_source: &'a GoalSource,
    pub reward_mode: RewardMode,
    pub master_seed: u64,
}

impl<'a, E: Element> RolloutWorld<'a, E> {
    fn start_episode(&mut self, episode_index: u64, goal_rng: &mut ChaCha8Rng, hidden_size: usize) -> Result<RolloutState<E>, PolicyError> {
        let episode_seed = seeding::derive(self.master_seed, "episode", episode_index);
        let mut cfg = self.env_cfg.clone();
        cfg.step_sounds = self.reward_mode == RewardMode::Eq5;
        let (env, obs, env_goal) = Env::reset(&cfg, self.domain, self.synth, self.mfcc, episode_seed)?;
        let goal_sound = match self.goal_source {
            GoalSource::EnvCommand => env_goal,
            GoalSource::Collected(set) => {
                if set.is_empty() {
                    return Err(PolicyError::InvalidConfig("goal sampling from an empty collected set".into()));
                }
                set[goal_rng.random_range(0..set.len())].clone()
            }
        };
        self.ctx.set_goal(&goal_sound)?;
        let current_v = self.ctx.image_v(&obs.image)?.to_f64_vec();
        let v_goal = self.ctx.goal_v().to_f64_vec();
        Ok(RolloutState {
            env,
            obs,
            hidden: LstmState::zeros(hidden_size),
            current_v,
            v_goal,
            episode_return: 0.0,
            episode_index,
        })
    }
}

/// Gather `steps` environment steps under the current policy, continuing
/// the live episode and starting new ones as episodes finish.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout<E: Element>(
    world: &mut RolloutWorld<'_, E>,
    live: &mut Option<RolloutState<E>>,
    params: &PolicyParams<E>,
    steps: usize,
    action_rng: &mut ChaCha8Rng,
    goal_rng: &mut ChaCha8Rng,
) -> Result<Rollout, PolicyError> {
    let hidden_size = params.cfg.hidden;
    if live.is_none() {
        *live = Some(world.start_episode(0, goal_rng, hidden_size)?);
    }
    let mut rollout = Rollout::default();
    for _ in 0..steps {
        let state = live.as_mut().expect("live episode");
        let mdp = MdpState {
            image: state.obs.image.clone(),
            v_image: state.current_v.clone(),
            v_goal: state.v_goal.clone(),
            robot_state: state.obs.robot_state.clone(),
        };
        let (probs, value, next_hidden) = policy_forward(params, &mdp, &state.hidden)?;
        let (action, log_prob) = sample_action(&probs, action_rng);
        let pre_hidden = state.hidden.clone();
        let result = state.env.step(Action::from_index(action))?;

        let v_next = world.ctx.image_v(&result.obs.image)?.to_f64_vec();
        let mut reward = dot(&v_next, &state.v_goal);
        if world.reward_mode == RewardMode::Eq5 {
            let sv = world.ctx.sound_v(&result.obs.sound)?;
            reward += sv.data().iter().zip(world.ctx.goal_v().data()).map(|(&a, &b)| (a * b).to_f64().unwrap()).sum::<f64>();
        }
        state.episode_return += reward;

        rollout.steps.push(Transition {
            image: mdp.image,
            v_image: mdp.v_image,
            v_goal: mdp.v_goal,
            robot_state: mdp.robot_state,
            action,
            log_prob,
            value,
            reward,
            done: result.done,
            hidden: pre_hidden,
        });

        if result.done {
            rollout.episode_returns.push(state.episode_return);
            rollout.episode_successes.push(result.success);
            let next_index = state.episode_index + 1;
            *live = Some(world.start_episode(next_index, goal_rng, hidden_size)?);
        } else {
            state.obs = result.obs;
            state.current_v = v_next;
            state.hidden = next_hidden;
        }
    }
    // bootstrap value of the truncated tail state
    let state = live.as_ref().expect("live episode");
    let mdp = MdpState {
        image: state.obs.image.clone(),
        v_image: state.current_v.clone(),
        v_goal: state.v_goal.clone(),
        robot_state: state.obs.robot_state.clone(),
    };
    let (_, bootstrap, _) = policy_forward(params, &mdp, &state.hidden)?;
    rollout.bootstrap_value = bootstrap;
    Ok(rollout)
}

fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (i, p.max(1e-12).ln());
        }
    }
    let last = probs.len() - 1;
    (last, probs[last].max(1e-12).ln())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub struct TrainRl<'a, E: Element> {
    pub env_cfg: &'a EnvConfig,
    pub domain: &'a DomainParams,
    pub synth: &'a SynthConfig,
    pub mfcc: &'a MfccConfig,
    pub policy_cfg: PolicyConfig,
    pub ppo: PpoConfig,
    pub reward_mode: RewardMode,
    pub seed: u64,
    pub goal_source: GoalSource,
    /// Continue training from an existing policy instead of a fresh one.
    pub initial_policy: Option<PolicyParams<E>>,
    pub metrics_out: Option<&'a Path>,
    pub checkpoint_out: Option<&'a Path>,
}

/// The rollout-update loop: trains a policy against intrinsic rewards from
/// the frozen representation. Returns the trained policy and per-update
/// logs.
pub fn train_rl<E: Element>(
    args: TrainRl<'_, E>,
    ctx: &mut RewardContext<E>,
) -> Result<(PolicyParams<E>, Vec<UpdateLog>), PolicyError> {
    args.ppo.validate()?;
    let mut params = match args.initial_policy {
        Some(p) => p,
        None => PolicyParams::init(args.policy_cfg.clone(), seeding::derive(args.seed, "policy-init", 0)),
    };
    let mut adam = AdamState::for_params(AdamConfig::with_lr(args.ppo.lr), params.store.tensors());
    let mut action_rng = seeding::rng(args.seed, "actions", 0);
    let mut goal_rng = seeding::rng(args.seed, "goal-sampling", 0);

    let mut world = RolloutWorld {
        env_cfg: args.env_cfg,
        domain: args.domain,
        synth: args.synth,
        mfcc: args.mfcc,
        ctx,
        goal_source: &args.goal_source,
        reward_mode: args.reward_mode,
        master_seed: args.seed,
    };

    let mut metrics_file = match args.metrics_out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PolicyError::InvalidConfig(format!("metrics dir: {e}")))?;
            }
            let mut f = std::fs::File::create(path)
                .map_err(|e| PolicyError::InvalidConfig(format!("metrics file: {e}")))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
            Some(f)
        }
        None => None,
    };

    let updates = args.ppo.total_steps.div_ceil(args.ppo.rollout);
    let mut live: Option<RolloutState<E>> = None;
    let mut logs = Vec::with_capacity(updates);
    let mut steps_done = 0usize;
    for update in 0..updates {
        let rollout = collect_rollout(&mut world, &mut live, &params, args.ppo.rollout, &mut action_rng, &mut goal_rng)?;
        steps_done += rollout.steps.len();
        let diag = ppo_update(&mut params, &rollout, &args.ppo, &mut adam, seeding::derive(args.seed, "ppo", update as u64))?;
        let episodes = rollout.episode_returns.len();
        let mean_return = if episodes > 0 {
            rollout.episode_returns.iter().sum::<f64>() / episodes as f64
        } else {
            f64::NAN
        };
        let success_rate = if episodes > 0 {
            rollout.episode_successes.iter().filter(|&&s| s).count() as f64 / episodes as f64
        } else {
            f64::NAN
        };
        let log = UpdateLog {
            update,
            steps: steps_done,
            mean_return,
            success_rate,
            policy_loss: diag.policy_loss,
            value_loss: diag.value_loss,
            entropy: diag.entropy,
            clip_frac: diag.clip_fraction,
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", log.csv_row()).map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
        }
        logs.push(log);
        if let Some(path) = args.checkpoint_out {
            if args.ppo.checkpoint_every > 0 && (update + 1) % args.ppo.checkpoint_every == 0 {
                params.save(path)?;
            }
        }
    }
    if let Some(path) = args.checkpoint_out {
        params.save(path)?;
    }
    Ok((params, logs))
}

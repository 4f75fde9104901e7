use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, ObsImage};
use super::EnvError;
use crate::audio::{compute_mfcc, synth_command, MfccConfig, MfccMatrix, SynthConfig, WaveSignal};
use crate::seeding;

pub const ACTION_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stay,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stay => 3,
        }
    }

    pub fn from_index(i: usize) -> Action {
        match i {
            0 => Action::Forward,
            1 => Action::TurnLeft,
            2 => Action::TurnRight,
            3 => Action::Stay,
            _ => panic!("action index {i} out of range"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Stay => "stay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    /// Unit vector in grid coordinates (x east, y south).
    pub fn vector(self) -> (f64, f64) {
        match self {
            Heading::North => (0.0, -1.0),
            Heading::East => (1.0, 0.0),
            Heading::South => (0.0, 1.0),
            Heading::West => (-1.0, 0.0),
        }
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
            Heading::East => Heading::North,
        }
    }

    pub fn right(self) -> Heading {
        self.left().left().left()
    }

    fn all() -> [Heading; 4] {
        [Heading::North, Heading::East, Heading::South, Heading::West]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    /// Number of non-empty intents M; intent M is the reserved empty intent.
    pub intent_count: usize,
    pub image_size: usize,
    pub max_episode_len: usize,
    /// Consecutive in-range steps required for success (K).
    pub success_hold: usize,
    /// Euclidean cell distance within which a lone object is heard.
    pub hear_distance: f64,
    pub hear_cone_deg: f64,
    /// Emit per-step sounds in observations (needed for the reward variant
    /// that uses current sounds; disable to speed up eval-only runs).
    pub step_sounds: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 9,
            intent_count: 4,
            image_size: 64,
            max_episode_len: 100,
            success_hold: 5,
            hear_distance: 2.0,
            hear_cone_deg: 90.0,
            step_sounds: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.intent_count < 2 {
            return Err(EnvError::InvalidConfig("intent_count must be >= 2".into()));
        }
        if self.image_size < 16 {
            return Err(EnvError::InvalidConfig("image_size must be >= 16".into()));
        }
        if self.success_hold < 1 || self.max_episode_len <= self.success_hold {
            return Err(EnvError::InvalidConfig("need max_episode_len > success_hold >= 1".into()));
        }
        if self.grid_size * self.grid_size < self.intent_count + 1 {
            return Err(EnvError::Placement { grid: self.grid_size, needed: self.intent_count });
        }
        Ok(())
    }

    /// Index of the reserved empty intent.
    pub fn empty_intent(&self) -> usize {
        self.intent_count
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [220, 50, 47],
    [60, 180, 75],
    [38, 110, 220],
    [230, 200, 40],
    [200, 60, 200],
    [50, 200, 200],
    [240, 130, 30],
    [130, 70, 200],
];

/// Per-domain appearance, timbre, and dynamics. A seeded shift stands in for
/// new rooms, new speakers, and a dynamics gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub object_colors: Vec<[u8; 3]>,
    pub floor: [u8; 3],
    pub sky: [u8; 3],
    pub timbre_seed: u64,
    pub forward_move_prob: f64,
}

impl DomainParams {
    pub fn clean(intent_count: usize) -> Self {
        assert!(intent_count <= PALETTE.len(), "at most {} intents supported", PALETTE.len());
        Self {
            object_colors: PALETTE[..intent_count].to_vec(),
            floor: [82, 82, 88],
            sky: [186, 203, 229],
            timbre_seed: 0,
            forward_move_prob: 1.0,
        }
    }

    /// Seeded domain shift: permuted object colors, new floor/sky palette,
    /// re-seeded tone timbre, and degraded forward-motion reliability.
    pub fn shifted(intent_count: usize, shift_seed: u64) -> Self {
        let base = Self::clean(intent_count);
        let mut rng = seeding::rng(shift_seed, "domain-shift", 0);
        let mut perm: Vec<usize> = (0..intent_count).collect();
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.rotate_left(1);
        }
        let object_colors = perm.iter().map(|&p| base.object_colors[p]).collect();
        let jitter = |c: [u8; 3], rng: &mut ChaCha8Rng| -> [u8; 3] {
            let mut out = [0u8; 3];
            for (o, ch) in out.iter_mut().zip(c) {
                *o = (ch as i32 + rng.random_range(-45..=45)).clamp(0, 255) as u8;
            }
            out
        };
        Self {
            object_colors,
            floor: jitter(base.floor, &mut rng),
            sky: jitter(base.sky, &mut rng),
            timbre_seed: seeding::derive(shift_seed, "timbre", 1),
            forward_move_prob: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub cell: (i32, i32),
    pub intent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: (i32, i32),
    pub heading: Heading,
    pub objects: Vec<ObjectPlacement>,
    pub t: usize,
    pub goal: usize,
    pub hold: usize,
    pub done: bool,
    pub succeeded: bool,
    pub prev_action: Option<Action>,
}

impl EnvState {
    pub fn goal_cell(&self) -> (i32, i32) {
        self.objects.iter().find(|o| o.intent == self.goal).expect("goal object placed").cell
    }
}

/// One observation: egocentric image, previous-action one-hot, and the
/// current sound (all-zero matrix for the empty intent).
#[derive(Debug, Clone)]
pub struct Observation {
    pub image: ObsImage,
    pub robot_state: Vec<f64>,
    pub sound: MfccMatrix,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub done: bool,
    pub success: bool,
}

fn chebyshev(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

fn in_cone(agent: (i32, i32), heading: Heading, target: (i32, i32), cone_deg: f64) -> bool {
    let v = ((target.0 - agent.0) as f64, (target.1 - agent.1) as f64);
    let norm = (v.0 * v.0 + v.1 * v.1).sqrt();
    if norm == 0.0 {
        return true;
    }
    let f = heading.vector();
    let cos = (v.0 * f.0 + v.1 * f.1) / norm;
    cos + 1e-9 >= (cone_deg.to_radians() / 2.0).cos()
}

fn success_pose(state: &EnvState, cfg: &EnvConfig) -> bool {
    let goal = state.goal_cell();
    chebyshev(state.agent, goal) <= 1 && in_cone(state.agent, state.heading, goal, cfg.hear_cone_deg)
}

/// Intent the agent would hear from this pose: the intent of the single
/// object within `hear_distance` and inside the hear cone, or the empty
/// intent when there is no such object or more than one.
pub fn heard_intent(state: &EnvState, cfg: &EnvConfig) -> usize {
    let mut heard = None;
    for obj in &state.objects {
        let dx = (obj.cell.0 - state.agent.0) as f64;
        let dy = (obj.cell.1 - state.agent.1) as f64;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist <= cfg.hear_distance + 1e-9 && in_cone(state.agent, state.heading, obj.cell, cfg.hear_cone_deg) {
            if heard.is_some() {
                return cfg.empty_intent(); // ambiguous: many objects at once
            }
            heard = Some(obj.intent);
        }
    }
    heard.unwrap_or(cfg.empty_intent())
}

/// Sound emitted at a pose: a freshly seeded tone of the heard intent, or
/// the all-zero matrix paired with the empty intent.
pub fn emit_sound(
    state: &EnvState,
    cfg: &EnvConfig,
    domain: &DomainParams,
    synth: &SynthConfig,
    mfcc: &MfccConfig,
    seed: u64,
) -> Result<(MfccMatrix, usize), EnvError> {
    let y = heard_intent(state, cfg);
    if y == cfg.empty_intent() {
        let (l, m) = mfcc.shape();
        return Ok((MfccMatrix::zero(l, m), y));
    }
    let mut scfg = synth.clone();
    scfg.timbre_seed = domain.timbre_seed;
    let wave = synth_command(&scfg, y, seed)?;
    Ok((compute_mfcc(&wave, mfcc)?, y))
}

/// A single environment instance. Runs one episode at a time; reset returns
/// a fresh instance state plus the one-time goal command.
pub struct Env {
    pub cfg: EnvConfig,
    pub domain: DomainParams,
    pub synth: SynthConfig,
    pub mfcc: MfccConfig,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl Env {
    /// Seeded reset: agent and objects on distinct cells, goal sampled
    /// uniformly. Returns the env, the first observation, and the goal
    /// command S_g.
    pub fn reset(
        cfg: &EnvConfig,
        domain: &DomainParams,
        synth: &SynthConfig,
        mfcc: &MfccConfig,
        episode_seed: u64,
    ) -> Result<(Env, Observation, MfccMatrix), EnvError> {
        Self::reset_inner(cfg, domain, synth, mfcc, episode_seed, None)
    }

    /// Reset with a forced goal intent (used by per-intent evaluation).
    pub fn reset_with_goal(
        cfg: &EnvConfig,
        domain: &DomainParams,
        synth: &SynthConfig,
        mfcc: &MfccConfig,
        episode_seed: u64,
        goal: usize,
    ) -> Result<(Env, Observation, MfccMatrix), EnvError> {
        Self::reset_inner(cfg, domain, synth, mfcc, episode_seed, Some(goal))
    }

    fn reset_inner(
        cfg: &EnvConfig,
        domain: &DomainParams,
        synth: &SynthConfig,
        mfcc: &MfccConfig,
        episode_seed: u64,
        forced_goal: Option<usize>,
    ) -> Result<(Env, Observation, MfccMatrix), EnvError> {
        cfg.validate()?;
        if cfg.intent_count > synth.fundamentals.len() {
            return Err(EnvError::InvalidConfig(format!(
                "intent_count {} exceeds configured fundamentals {}",
                cfg.intent_count,
                synth.fundamentals.len()
            )));
        }
        if domain.object_colors.len() < cfg.intent_count {
            return Err(EnvError::InvalidConfig("domain has fewer colors than intents".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(episode_seed, "episode", 0));
        let state = Self::sample_state(cfg, &mut rng, forced_goal);
        let goal_seed = rng.random::<u64>();
        let mut scfg = synth.clone();
        scfg.timbre_seed = domain.timbre_seed;
        let wave = synth_command(&scfg, state.goal, goal_seed)?;
        let goal_sound = compute_mfcc(&wave, mfcc)?;
        let mut env = Env { cfg: cfg.clone(), domain: domain.clone(), synth: synth.clone(), mfcc: mfcc.clone(), state, rng };
        let obs = env.observe()?;
        Ok((env, obs, goal_sound))
    }

    fn sample_state(cfg: &EnvConfig, rng: &mut ChaCha8Rng, forced_goal: Option<usize>) -> EnvState {
        let g = cfg.grid_size as i32;
        let mut cells: Vec<(i32, i32)> = (0..g).flat_map(|y| (0..g).map(move |x| (x, y))).collect();
        cells.shuffle(rng);
        let agent = cells[0];
        let objects = (0..cfg.intent_count).map(|intent| ObjectPlacement { cell: cells[1 + intent], intent }).collect();
        let heading = *Heading::all().as_slice().choose(rng).unwrap();
        let goal = forced_goal.unwrap_or_else(|| rng.random_range(0..cfg.intent_count));
        assert!(goal < cfg.intent_count, "goal intent out of range");
        EnvState { agent, heading, objects, t: 0, goal, hold: 0, done: false, succeeded: false, prev_action: None }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Render + previous-action one-hot + current sound for the live state.
    pub fn observe(&mut self) -> Result<Observation, EnvError> {
        let image = render(&self.state, &self.cfg, &self.domain);
        let mut robot_state = vec![0.0; ACTION_COUNT];
        if let Some(a) = self.state.prev_action {
            robot_state[a.index()] = 1.0;
        }
        let sound = if self.cfg.step_sounds {
            let seed = self.rng.random::<u64>();
            emit_sound(&self.state, &self.cfg, &self.domain, &self.synth, &self.mfcc, seed)?.0
        } else {
            let (l, m) = self.mfcc.shape();
            MfccMatrix::zero(l, m)
        };
        Ok(Observation { image, robot_state, sound })
    }

    /// Advance one step. Forward moves one cell along the heading unless a
    /// wall or object blocks it (or the domain's dynamics drop the move);
    /// turns rotate 90 degrees. The hold counter tracks consecutive steps
    /// within Chebyshev distance 1 of the goal with the goal in the hear
    /// cone; reaching `success_hold` ends the episode successfully.
    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeDone);
        }
        match action {
            Action::Forward => {
                let d = self.state.heading.delta();
                let target = (self.state.agent.0 + d.0, self.state.agent.1 + d.1);
                let g = self.cfg.grid_size as i32;
                let blocked = target.0 < 0
                    || target.1 < 0
                    || target.0 >= g
                    || target.1 >= g
                    || self.state.objects.iter().any(|o| o.cell == target);
                let moved: f64 = self.rng.random();
                if !blocked && moved < self.domain.forward_move_prob {
                    self.state.agent = target;
                }
            }
            Action::TurnLeft => self.state.heading = self.state.heading.left(),
            Action::TurnRight => self.state.heading = self.state.heading.right(),
            Action::Stay => {}
        }
        self.state.t += 1;
        self.state.prev_action = Some(action);
        if success_pose(&self.state, &self.cfg) {
            self.state.hold = (self.state.hold + 1).min(self.cfg.success_hold);
        } else {
            self.state.hold = 0;
        }
        let success = self.state.hold >= self.cfg.success_hold;
        self.state.succeeded = success;
        self.state.done = success || self.state.t >= self.cfg.max_episode_len;
        let obs = self.observe()?;
        Ok(StepResult { obs, done: self.state.done, success })
    }

    /// Whether the current pose satisfies the success predicate.
    pub fn at_success_pose(&self) -> bool {
        success_pose(&self.state, &self.cfg)
    }

    pub fn emit_sound_now(&mut self) -> Result<(MfccMatrix, usize), EnvError> {
        let seed = self.rng.random::<u64>();
        emit_sound(&self.state, &self.cfg, &self.domain, &self.synth, &self.mfcc, seed)
    }

    /// Shortest-path oracle action for the current state (breadth-first
    /// search over (cell, heading) poses; Stay once a success pose is
    /// reached). Used by scripted-policy baselines and tests.
    pub fn oracle_action(&self) -> Action {
        if success_pose(&self.state, &self.cfg) {
            return Action::Stay;
        }
        bfs_first_action(&self.state, &self.cfg).unwrap_or(Action::Stay)
    }
}

fn bfs_first_action(state: &EnvState, cfg: &EnvConfig) -> Option<Action> {
    use std::collections::VecDeque;
    let g = cfg.grid_size as i32;
    let idx = |pos: (i32, i32), h: Heading| -> usize {
        ((pos.1 * g + pos.0) as usize) * 4
            + match h {
                Heading::North => 0,
                Heading::East => 1,
                Heading::South => 2,
                Heading::West => 3,
            }
    };
    let occupied = |cell: (i32, i32)| state.objects.iter().any(|o| o.cell == cell);
    let mut visited = vec![false; (g * g) as usize * 4];
    let mut queue = VecDeque::new();
    visited[idx(state.agent, state.heading)] = true;
    queue.push_back((state.agent, state.heading, None::<Action>));
    while let Some((pos, heading, first)) = queue.pop_front() {
        let probe = EnvState { agent: pos, heading, ..state.clone() };
        if success_pose(&probe, cfg) {
            return first;
        }
        let mut candidates: Vec<((i32, i32), Heading, Action)> = vec![
            (pos, heading.left(), Action::TurnLeft),
            (pos, heading.right(), Action::TurnRight),
        ];
        let d = heading.delta();
        let fwd = (pos.0 + d.0, pos.1 + d.1);
        if fwd.0 >= 0 && fwd.1 >= 0 && fwd.0 < g && fwd.1 < g && !occupied(fwd) {
            candidates.push((fwd, heading, Action::Forward));
        }
        for (npos, nheading, action) in candidates {
            let i = idx(npos, nheading);
            if !visited[i] {
                visited[i] = true;
                queue.push_back((npos, nheading, Some(first.unwrap_or(action))));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_mfcc() -> MfccConfig {
        MfccConfig { target_frames: 20, ..MfccConfig::default() }
    }

    fn setup(seed: u64) -> (Env, Observation, MfccMatrix) {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        Env::reset(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), seed).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let (mut a, oa, sa) = setup(123);
        let (mut b, ob, sb) = setup(123);
        assert_eq!(a.state(), b.state());
        assert_eq!(oa.image.data, ob.image.data);
        assert_eq!(sa, sb);
        // identical steps stay identical
        for action in [Action::Forward, Action::TurnLeft, Action::Forward] {
            let ra = a.step(action).unwrap();
            let rb = b.step(action).unwrap();
            assert_eq!(a.state(), b.state());
            assert_eq!(ra.obs.image.data, rb.obs.image.data);
            assert_eq!(ra.obs.sound, rb.obs.sound);
        }
    }

    #[test]
    fn placement_error_when_grid_too_small() {
        // 3x3 grid cannot hold 9 objects plus the agent
        let cfg = EnvConfig { grid_size: 3, intent_count: 9, hear_distance: 1.5, ..EnvConfig::default() };
        let domain = DomainParams { object_colors: vec![[0, 0, 0]; 9], ..DomainParams::clean(4) };
        let r = Env::reset(&cfg, &domain, &SynthConfig::default(), &small_mfcc(), 0);
        assert!(matches!(r, Err(EnvError::Placement { .. })));
    }

    #[test]
    fn four_left_turns_restore_heading() {
        let (mut env, _, _) = setup(7);
        let before = env.state().heading;
        for _ in 0..4 {
            env.step(Action::TurnLeft).unwrap();
        }
        assert_eq!(env.state().heading, before);
    }

    #[test]
    fn forward_against_wall_keeps_position_increments_time() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let (mut env, _, _) = setup(11);
        // drive north until the wall, then push again
        while env.state().agent.1 > 0 {
            let y = env.state().agent.1;
            if env.state().heading != Heading::North {
                env.step(Action::TurnLeft).unwrap();
            } else {
                env.step(Action::Forward).unwrap();
                // either moved or was blocked by an object; detour east
                if env.state().agent.1 == y && env.state().heading == Heading::North {
                    env.step(Action::TurnRight).unwrap();
                    env.step(Action::Forward).unwrap();
                    env.step(Action::TurnLeft).unwrap();
                }
            }
            if env.state().t > 60 {
                break;
            }
        }
        if env.state().agent.1 == 0 {
            while env.state().heading != Heading::North {
                env.step(Action::TurnLeft).unwrap();
            }
            let before = env.state().agent;
            let t0 = env.state().t;
            env.step(Action::Forward).unwrap();
            assert_eq!(env.state().agent, before);
            assert_eq!(env.state().t, t0 + 1);
        }
        let _ = (cfg, domain);
    }

    #[test]
    fn oracle_script_succeeds_before_time_limit() {
        for seed in 0..10u64 {
            let (mut env, _, _) = setup(seed);
            let mut success = false;
            while !env.state().done {
                let a = env.oracle_action();
                let r = env.step(a).unwrap();
                success = r.success;
            }
            assert!(success, "oracle failed on seed {seed}");
            assert!(env.state().t < env.cfg.max_episode_len);
        }
    }

    #[test]
    fn step_after_done_errors() {
        let (mut env, _, _) = setup(3);
        while !env.state().done {
            env.step(env.oracle_action()).unwrap();
        }
        assert!(matches!(env.step(Action::Stay), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn success_requires_hold_near_goal() {
        // replay check: success implies the agent spent the last K steps
        // within Chebyshev distance 1 of the goal
        for seed in 20..26u64 {
            let (mut env, _, _) = setup(seed);
            let goal = env.state().goal_cell();
            let k = env.cfg.success_hold;
            let mut near_history: Vec<bool> = Vec::new();
            let mut success = false;
            while !env.state().done {
                let r = env.step(env.oracle_action()).unwrap();
                near_history.push(chebyshev(env.state().agent, goal) <= 1);
                success = r.success;
            }
            assert!(success);
            assert!(near_history.len() >= k);
            assert!(near_history[near_history.len() - k..].iter().all(|&x| x), "seed {seed}");
        }
    }

    #[test]
    fn emit_sound_rules() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let synth = SynthConfig::default();
        let mfcc = small_mfcc();
        let objects = vec![
            ObjectPlacement { cell: (4, 3), intent: 0 },
            ObjectPlacement { cell: (8, 8), intent: 1 },
            ObjectPlacement { cell: (0, 8), intent: 2 },
            ObjectPlacement { cell: (8, 0), intent: 3 },
        ];
        // adjacent and facing object 0 -> heard
        let state = EnvState {
            agent: (4, 4),
            heading: Heading::North,
            objects: objects.clone(),
            t: 0,
            goal: 0,
            hold: 0,
            done: false,
            succeeded: false,
            prev_action: None,
        };
        let (s, y) = emit_sound(&state, &cfg, &domain, &synth, &mfcc, 5).unwrap();
        assert_eq!(y, 0);
        assert!(!s.is_zero());

        // far from everything -> empty
        let far = EnvState { agent: (4, 4), heading: Heading::South, objects: objects.clone(), ..state.clone() };
        let (s, y) = emit_sound(&far, &cfg, &domain, &synth, &mfcc, 6).unwrap();
        assert_eq!(y, cfg.empty_intent());
        assert!(s.is_zero());

        // two objects equidistant in cone -> ambiguity maps to empty
        let twin_objects = vec![
            ObjectPlacement { cell: (3, 3), intent: 0 },
            ObjectPlacement { cell: (5, 3), intent: 1 },
            ObjectPlacement { cell: (0, 8), intent: 2 },
            ObjectPlacement { cell: (8, 8), intent: 3 },
        ];
        let twin = EnvState { agent: (4, 4), heading: Heading::North, objects: twin_objects, ..state.clone() };
        let (s, y) = emit_sound(&twin, &cfg, &domain, &synth, &mfcc, 7).unwrap();
        assert_eq!(y, cfg.empty_intent());
        assert!(s.is_zero());
    }

    #[test]
    fn goal_frequencies_roughly_uniform() {
        let cfg = EnvConfig::default();
        let domain = DomainParams::clean(cfg.intent_count);
        let synth = SynthConfig::default();
        let mfcc = small_mfcc();
        let mut counts = vec![0usize; cfg.intent_count];
        let n = 1000;
        for seed in 0..n {
            let (env, _, _) = Env::reset(&cfg, &domain, &synth, &mfcc, seed as u64).unwrap();
            counts[env.state().goal] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() <= 0.05, "intent {i} frequency {freq}");
        }
    }

    #[test]
    fn shifted_domain_changes_palette_and_dynamics() {
        let clean = DomainParams::clean(4);
        let shifted = DomainParams::shifted(4, 99);
        assert_ne!(clean.object_colors, shifted.object_colors);
        assert_eq!(shifted.forward_move_prob, 0.9);
        assert_ne!(shifted.timbre_seed, 0);
        // same multiset of object colors, permuted
        let mut a = clean.object_colors.clone();
        let mut b = shifted.object_colors.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}

//! Intrinsic rewards from the frozen representation: joint-space dot
//! products between the current image embedding and a cached goal-command
//! embedding, optionally augmented with the current sound.

use crate::audio::MfccMatrix;
use crate::envsim::ObsImage;
use crate::numerics::{Element, Tensor};
use crate::varmodel::{encode_image, encode_sound, VarError, VarParams};

/// Which of the two reward definitions drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// r = v_image . v_goal (no per-step supervision signal).
    Eq4,
    /// r = v_image . v_goal + v_sound . v_goal (current sound included).
    Eq5,
}

/// Frozen representation plus the per-episode goal embedding, computed once
/// at reset. The zero-sound embedding is cached too, since the empty
/// observation is a constant input under frozen parameters.
pub struct RewardContext<E: Element> {
    params: VarParams<E>,
    goal_v: Tensor<E>,
    zero_sound_v: Tensor<E>,
}

impl<E: Element> RewardContext<E> {
    pub fn new(params: VarParams<E>, goal_sound: &MfccMatrix) -> Result<Self, VarError> {
        let goal_v = encode_sound(&params, goal_sound)?.v;
        let (l, m) = params.cfg.sound_shape;
        let zero_sound_v = encode_sound(&params, &MfccMatrix::zero(l, m))?.v;
        Ok(Self { params, goal_v, zero_sound_v })
    }

    /// Swap in a new goal command without re-encoding the zero sound.
    pub fn set_goal(&mut self, goal_sound: &MfccMatrix) -> Result<(), VarError> {
        self.goal_v = encode_sound(&self.params, goal_sound)?.v;
        Ok(())
    }

    pub fn params(&self) -> &VarParams<E> {
        &self.params
    }

    pub fn goal_v(&self) -> &Tensor<E> {
        &self.goal_v
    }

    /// Gated joint-space embedding of an image under the frozen params.
    pub fn image_v(&self, image: &ObsImage) -> Result<Tensor<E>, VarError> {
        Ok(encode_image(&self.params, image)?.v)
    }

    /// Gated joint-space embedding of a per-step sound; the all-zero matrix
    /// hits the cache.
    pub fn sound_v(&self, sound: &MfccMatrix) -> Result<Tensor<E>, VarError> {
        if sound.is_zero() {
            return Ok(self.zero_sound_v.clone());
        }
        Ok(encode_sound(&self.params, sound)?.v)
    }

    /// Reward for a precomputed image embedding.
    pub fn reward_from_v(&self, image_v: &Tensor<E>) -> f64 {
        dot(image_v, &self.goal_v)
    }

    /// r = v_image . v_goal.
    pub fn intrinsic_reward(&self, image: &ObsImage) -> Result<f64, VarError> {
        Ok(self.reward_from_v(&self.image_v(image)?))
    }

    /// r = v_image . v_goal + v_sound . v_goal.
    pub fn intrinsic_reward_with_current(&self, image: &ObsImage, sound: &MfccMatrix) -> Result<f64, VarError> {
        Ok(self.reward_from_v(&self.image_v(image)?) + dot(&self.sound_v(sound)?, &self.goal_v))
    }
}

fn dot<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x * y).to_f64().unwrap()).sum()
}

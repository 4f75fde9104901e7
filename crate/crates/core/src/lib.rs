//! Two-stage command-following pipeline on a synthetic gridworld:
//! a joint visual-audio representation trained with contrastive losses,
//! intrinsic rewards derived from it, PPO policy training, and
//! label-efficient fine-tuning after domain shift.

pub mod audio;
pub mod checkpoint;
pub mod envsim;
pub mod evalharness;
pub mod finetune;
pub mod numerics;
pub mod policy;
pub mod reward;
pub mod seeding;
pub mod varmodel;

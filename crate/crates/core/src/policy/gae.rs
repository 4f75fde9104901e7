//! Generalized advantage estimation over a stored trajectory.

use super::PolicyError;

/// Standard GAE recursion with a bootstrap value for truncation:
/// delta_t = r_t + gamma (1 - done_t) V_{t+1} - V_t,
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}.
/// Returns (advantages, returns) with returns = advantages + values.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    let n = rewards.len();
    if n == 0 {
        return Err(PolicyError::EmptyTrajectory);
    }
    if values.len() != n || dones.len() != n {
        return Err(PolicyError::InvalidConfig(format!(
            "trajectory arity mismatch: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n {
            if dones[t] {
                0.0
            } else {
                values[t + 1]
            }
        } else {
            bootstrap * cont
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

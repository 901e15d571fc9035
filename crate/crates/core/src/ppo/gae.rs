/// Generalized advantage estimates for one env's contiguous step sequence.
///
/// `last_value` bootstraps the step after the final one and is ignored when
/// that step is terminal. Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "rewards, values and dones must align");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts to zero mean and scales to unit (population) variance in place.
pub fn normalize(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        return;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let inv = 1.0 / (var.sqrt() + 1e-12);
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    // second pass removes the residual rounding offset of the mean
    let m2 = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= m2);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_is_one_step_td() {
        let r = [1.0, 0.5, -0.2];
        let v = [0.3, 0.1, 0.7];
        let (a, _) = compute_gae(&r, &v, &[false, false, false], 0.4, 0.9, 0.0);
        let expect = [1.0 + 0.9 * 0.1 - 0.3, 0.5 + 0.9 * 0.7 - 0.1, -0.2 + 0.9 * 0.4 - 0.7];
        for (x, y) in a.iter().zip(expect) {
            assert_eq!(*x, y);
        }
    }

    #[test]
    fn monte_carlo_limit() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let (a, ret) = compute_gae(&r, &[0.0; 4], &[false, false, false, true], 99.0, 1.0, 1.0);
        assert_eq!(a, vec![10.0, 9.0, 7.0, 4.0]);
        assert_eq!(ret, a);
    }

    #[test]
    fn done_cuts_the_bootstrap() {
        let (a, _) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[true, true], 5.0, 0.9, 0.9);
        assert_eq!(a, vec![1.0, 1.0]);
    }

    #[test]
    fn normalized_moments() {
        let mut x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 3.0 + 7.0).collect();
        normalize(&mut x);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

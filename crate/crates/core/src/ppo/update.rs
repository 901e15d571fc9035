use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PpoConfig, PpoError, RolloutBatch};
use crate::encoder::{evaluate, PolicyModel, PolicySample};
use crate::nncore::{clip_grad_norm, Adam, Tape, Tensor};

/// Means over all minibatches of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of the bias-parameter gradients before clipping (0 without biases).
    pub bias_grad_norm: f64,
    pub minibatches: usize,
}

/// `cfg.epochs` passes of shuffled minibatch Adam steps on the clipped
/// surrogate plus value and entropy terms.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut dyn PolicyModel,
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
    update: usize,
) -> Result<LossReport, PpoError> {
    let n = batch.len();
    let mb = cfg.minibatch.min(n).max(1);
    let bias_ids: Vec<usize> = model
        .bias_params()
        .map(|b| b.all_ids().iter().map(|id| id.index()).collect())
        .unwrap_or_default();
    let mut rep = LossReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mi, idx) in order.chunks(mb).enumerate() {
            let samples: Vec<&PolicySample> = idx.iter().map(|&i| &batch.samples[i]).collect();
            let actions: Vec<&[f64]> = idx.iter().map(|&i| batch.actions[i].as_slice()).collect();
            let old_lp = Tensor::from_vec(idx.iter().map(|&i| batch.log_probs[i]).collect());
            let adv = Tensor::from_vec(idx.iter().map(|&i| batch.advantages[i]).collect());
            let ret = Tensor::new(&[idx.len(), 1], idx.iter().map(|&i| batch.returns[i]).collect())?;

            let mut tape = Tape::new();
            let ev = evaluate(&*model, &mut tape, model.store(), &samples, &actions)?;
            let old = tape.constant(old_lp);
            let diff = tape.sub(ev.log_probs, old)?;
            let ratio = tape.exp(diff);
            let s1 = tape.mul_const(ratio, adv.clone())?;
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let s2 = tape.mul_const(clipped, adv)?;
            let surr = tape.minimum(s1, s2)?;
            let surr = tape.mean(surr);
            let pg = tape.scale(surr, -1.0);
            let target = tape.constant(ret);
            let err = tape.sub(ev.values, target)?;
            let sq = tape.square(err);
            let vl = tape.mean(sq);
            let vterm = tape.scale(vl, cfg.value_coef);
            let eterm = tape.scale(ev.entropy, -cfg.entropy_coef);
            let loss = tape.add(pg, vterm)?;
            let loss = tape.add(loss, eterm)?;

            let (p, v, e) = (tape.value(pg).item(), tape.value(vl).item(), tape.value(ev.entropy).item());
            if !(p.is_finite() && v.is_finite() && e.is_finite()) {
                return Err(PpoError::NonFiniteLoss {
                    update,
                    epoch,
                    minibatch: mi,
                    policy: p,
                    value: v,
                    entropy: e,
                });
            }
            let (mut kl, mut clipped_n) = (0.0, 0usize);
            for &r in tape.value(ratio).data() {
                kl += (r - 1.0) - r.ln();
                if (r - 1.0).abs() > cfg.clip {
                    clipped_n += 1;
                }
            }

            let grads = tape.backward(loss)?;
            let mut g = grads.param_grads(model.store());
            for ((_, prm), gi) in model.store().iter().zip(g.iter_mut()) {
                if !prm.trainable {
                    gi.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let bias_norm = bias_ids
                .iter()
                .flat_map(|&i| g[i].data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let norm = clip_grad_norm(&mut g, cfg.max_grad_norm);
            opt.step(model.store_mut(), &g)?;

            rep.policy_loss += p;
            rep.value_loss += v;
            rep.entropy += e;
            rep.approx_kl += kl / idx.len() as f64;
            rep.clip_frac += clipped_n as f64 / idx.len() as f64;
            rep.grad_norm += norm;
            rep.bias_grad_norm += bias_norm;
            rep.minibatches += 1;
        }
    }
    if rep.minibatches > 0 {
        let k = rep.minibatches as f64;
        rep.policy_loss /= k;
        rep.value_loss /= k;
        rep.entropy /= k;
        rep.approx_kl /= k;
        rep.clip_frac /= k;
        rep.grad_norm /= k;
        rep.bias_grad_norm /= k;
    }
    Ok(rep)
}

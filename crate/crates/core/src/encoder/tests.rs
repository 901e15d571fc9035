use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::kingraph::{build_graph, GraphSpec, KinematicGraph, NodeId};
use crate::nncore::{grad_check, GradCheckConfig};

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        heads: 8,
        layers: 2,
        d_ff: 12,
        head_hidden: vec![8],
        ..EncoderConfig::default()
    }
}

fn samples(g: &KinematicGraph, width: usize, count: usize, seed: u64) -> Vec<PolicySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut contacts = ContactSet::default();
            contacts.insert(NodeId(1), g.tool().unwrap()).unwrap();
            PolicySample {
                obs: (0..width).map(|_| rng.random_range(-1.0..1.0)).collect(),
                positions: (0..g.n())
                    .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)])
                    .collect(),
                contacts,
            }
        })
        .collect()
}

#[test]
fn forward_shapes() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let net = PhysGraphNet::new(&g, 5, tiny_cfg(), Arch::PhysGraph, 3).unwrap();
    let s = samples(&g, net.token_map().obs_width(), 3, 0);
    let refs: Vec<_> = s.iter().collect();
    let mut tape = Tape::new();
    let h = net.forward(&mut tape, &refs).unwrap();
    assert_eq!(tape.value(h.mu).shape(), &[3, 5]);
    assert_eq!(tape.value(h.value).shape(), &[3, 1]);
    assert_eq!(tape.value(h.log_std).data(), &[-0.5; 5]);
}

#[test]
fn baseline_default_widths() {
    assert_eq!(BaselineConfig::default_hidden(412), vec![512, 512, 256, 256]);
    assert_eq!(BaselineConfig::default_hidden(64), vec![64, 64, 32, 32]);
}

#[test]
fn nobias_equals_zeroed_coefficients() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let mut full = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, 9).unwrap();
    let nob = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraphNoBias, 9).unwrap();
    assert_eq!(param_count(&full), param_count(&nob));
    let ids = full.bias_params().unwrap().lambda_ids();
    for id in ids {
        full.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let s = samples(&g, full.token_map().obs_width(), 2, 1);
    let refs: Vec<_> = s.iter().collect();
    let a = policy_outputs(&full, &refs).unwrap();
    let b = policy_outputs(&nob, &refs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (u, v) in x.mu.iter().zip(&y.mu) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        assert_eq!(x.value.to_bits(), y.value.to_bits());
    }
    for id in ids {
        assert!(!nob.store().get(id).trainable);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let models: Vec<Box<dyn PolicyModel>> = vec![
        Box::new(PhysGraphNet::new(&g, 3, tiny_cfg(), Arch::PhysGraph, 2).unwrap()),
        Box::new(
            MlpBaseline::new(
                &g,
                3,
                &BaselineConfig {
                    hidden: Some(vec![8, 6]),
                    ..BaselineConfig::default()
                },
                2,
            )
            .unwrap(),
        ),
    ];
    for model in &models {
        let s = samples(&g, model.token_map().obs_width(), 2, 7);
        let refs: Vec<_> = s.iter().collect();
        let acts: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a: Vec<&[f64]> = acts.iter().map(|x| x.as_slice()).collect();
        let report = grad_check(
            |tape, store| {
                let ev = evaluate(model.as_ref(), tape, store, &refs, &a)?;
                let lp = tape.sum(ev.log_probs);
                let v = tape.square(ev.values);
                let v = tape.mean(v);
                let s = tape.add(lp, v)?;
                tape.add(s, ev.entropy)
            },
            model.store(),
            GradCheckConfig::default(),
        )
        .unwrap();
        let worst = report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
        assert!(report.passed, "{}: worst {} rel {:.2e}", model.arch(), worst.name, worst.max_rel_err);
    }
}

#[test]
fn nonfinite_attention_names_layer_and_head() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let mut net = PhysGraphNet::new(&g, 3, tiny_cfg(), Arch::PhysGraph, 2).unwrap();
    // head 5 owns columns 10..12 of the layer-1 value projection
    let id = net.store().id("layer1.attn.v.weight").unwrap();
    net.store_mut().value_mut(id).data_mut()[10] = f64::NAN;
    let s = samples(&g, net.token_map().obs_width(), 1, 0);
    let err = policy_outputs(&net, &[&s[0]]).unwrap_err().to_string();
    assert!(err.contains("layer 1, head 5"), "{err}");
}

/// Observation for `to`'s layout holding the same per-node features as `obs`
/// in `from`'s layout, matched by token name.
fn relayout(obs: &[f64], from: &TokenMap, to: &TokenMap) -> Vec<f64> {
    let mut out = vec![0.0; to.obs_width()];
    for (j, t) in to.tokens().iter().enumerate().skip(1) {
        let i = from.tokens().iter().position(|s| s.name == t.name).unwrap();
        out[t.offset..t.offset + t.width].copy_from_slice(from.slice(obs, i));
        assert_eq!(from.tokens()[i].width, to.tokens()[j].width);
    }
    out
}

#[test]
fn relabeling_nodes_leaves_outputs_unchanged() {
    let g = build_graph(&GraphSpec::bimanual(3, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let mut perm: Vec<usize> = (0..g.n()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let gp = g.permuted(&perm).unwrap();
        let a = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, trial).unwrap();
        let mut b = PhysGraphNet::new(&gp, 4, tiny_cfg(), Arch::PhysGraph, 99).unwrap();
        assert_eq!(param_count(&a), param_count(&b));
        for (_, p) in a.store().iter() {
            let id = b.store().id(&p.name).unwrap();
            *b.store_mut().value_mut(id) = p.value.clone();
        }
        // make the bias matter
        for id in a.bias_params().unwrap().lambda_ids() {
            b.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 1.5);
        }
        let mut a = a;
        for id in a.bias_params().unwrap().lambda_ids() {
            a.store_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 1.5);
        }

        let s = samples(&g, a.token_map().obs_width(), 3, trial);
        let sp: Vec<PolicySample> = s
            .iter()
            .map(|x| {
                let mut positions = vec![[0.0; 3]; g.n()];
                for (old, p) in x.positions.iter().enumerate() {
                    positions[perm[old]] = *p;
                }
                let mut contacts = ContactSet::default();
                for (u, v) in x.contacts.iter() {
                    contacts.insert(NodeId(perm[u.0]), NodeId(perm[v.0])).unwrap();
                }
                PolicySample {
                    obs: relayout(&x.obs, a.token_map(), b.token_map()),
                    positions,
                    contacts,
                }
            })
            .collect();
        let oa = policy_outputs(&a, &s.iter().collect::<Vec<_>>()).unwrap();
        let ob = policy_outputs(&b, &sp.iter().collect::<Vec<_>>()).unwrap();
        for (x, y) in oa.iter().zip(&ob) {
            for (u, v) in x.mu.iter().zip(&y.mu) {
                assert!((u - v).abs() < 1e-10, "trial {trial}: {u} vs {v}");
            }
            assert!((x.value - y.value).abs() < 1e-10);
        }
    }
}

#[test]
fn same_level_tokens_share_a_tokenizer() {
    let g = build_graph(&GraphSpec::bimanual(3, 3)).unwrap();
    let net = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, 1).unwrap();
    let tm = net.token_map();
    let mut obs = vec![0.0; tm.obs_width()];
    let feat: Vec<f64> = (0..crate::encoder::LINK_FEATURES).map(|i| 0.1 * i as f64 - 0.4).collect();
    let level1: Vec<usize> = (0..tm.len())
        .filter(|&i| tm.tokens()[i].signature == Some(TokenSignature::Link(1)))
        .collect();
    assert_eq!(level1.len(), 6);
    for &i in &level1 {
        let t = &tm.tokens()[i];
        obs[t.offset..t.offset + t.width].copy_from_slice(&feat);
    }
    let s = PolicySample {
        obs,
        positions: vec![[0.0; 3]; g.n()],
        contacts: ContactSet::default(),
    };
    let mut tape = Tape::new();
    let x = net.tokenize(&mut tape, net.store(), &[&s]).unwrap();
    let x = tape.value(x);
    let d = tiny_cfg().d_model;
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    for &i in &level1[1..] {
        assert_eq!(row(i), row(level1[0]));
    }
    let names: Vec<_> = net.store().iter().map(|(_, p)| p.name.clone()).filter(|n| n.starts_with("tokenizer.")).collect();
    let projs = names.iter().filter(|n| n.ends_with(".weight") && !n.contains(".norm")).count();
    // hand, palm, link0..2, tool, object
    assert_eq!(projs, 7, "{names:?}");
}

#[test]
fn one_set_of_weights_shape_fits_any_topology() {
    for (f, l) in [(5, 3), (4, 4), (2, 2)] {
        let g = build_graph(&GraphSpec::bimanual(f, l)).unwrap();
        let net = PhysGraphNet::new(&g, 6, tiny_cfg(), Arch::PhysGraph, 0).unwrap();
        assert_eq!(net.token_map().len(), 1 + 2 * (1 + 1 + f * l) + 2);
        let s = samples(&g, net.token_map().obs_width(), 2, 3);
        let out = policy_outputs(&net, &s.iter().collect::<Vec<_>>()).unwrap();
        assert!(out.iter().all(|o| o.mu.iter().all(|v| v.is_finite()) && o.value.is_finite()));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let net = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, 4).unwrap();
    let s = samples(&g, net.token_map().obs_width(), 4, 2);
    let refs: Vec<_> = s.iter().collect();
    let acts = vec![vec![0.3, -0.2, 0.1, 0.5]; 4];
    let a: Vec<&[f64]> = acts.iter().map(|x| x.as_slice()).collect();
    let mut tape = Tape::new();
    let ev = evaluate(&net, &mut tape, net.store(), &refs, &a).unwrap();
    let lp = tape.sum(ev.log_probs);
    let v = tape.sum(ev.values);
    let loss = tape.add(lp, v).unwrap();
    let grads = tape.backward(loss).unwrap();
    let grads = grads.param_grads(net.store());
    let (mut nonzero, mut total) = (0, 0);
    for (g, (_, p)) in grads.iter().zip(net.store().iter()) {
        assert!(g.is_finite(), "{}", p.name);
        total += g.len();
        nonzero += g.data().iter().filter(|v| **v != 0.0).count();
    }
    assert!(nonzero as f64 >= 0.99 * total as f64, "{nonzero}/{total}");
}

#[test]
fn saturating_bias_concentrates_attention() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let net = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, 4).unwrap();
    let h = tiny_cfg().heads;
    let t = net.token_map().len();
    let d = tiny_cfg().d_model;
    let mut tape = Tape::new();
    let mut q = Tensor::zeros(&[1, t, d]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    q.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let v = q.clone();
    let mut bias = Tensor::zeros(&[1, h, t, t]);
    for hh in 0..h {
        for i in 0..t {
            bias.data_mut()[(hh * t + i) * t + (i + 1) % t] = 30.0;
        }
    }
    let qv = tape.constant(q.clone());
    let vv = tape.constant(v.clone());
    let bv = tape.constant(bias);
    let out = tape.attention(qv, qv, vv, Some(bv), h).unwrap();
    let out = tape.value(out);
    // each query copies its favoured key's value rows
    for i in 0..t {
        let j = (i + 1) % t;
        for c in 0..d {
            let got = out.data()[i * d + c];
            let want = v.data()[j * d + c];
            assert!((got - want).abs() < 0.02 * (1.0 + want.abs()), "{i},{c}: {got} vs {want}");
        }
    }
}

#[test]
fn log_std_is_clamped_in_outputs() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let mut net = PhysGraphNet::new(&g, 4, tiny_cfg(), Arch::PhysGraph, 4).unwrap();
    let id = net.log_std_id();
    net.store_mut().value_mut(id).data_mut().copy_from_slice(&[9.0, -9.0, 0.0, 1.0]);
    let s = samples(&g, net.token_map().obs_width(), 1, 0);
    let o = policy_outputs(&net, &[&s[0]]).unwrap();
    assert_eq!(o[0].log_std, vec![LOG_STD_MAX, LOG_STD_MIN, 0.0, 1.0]);
}

#[test]
fn mlp_baseline_sees_node_order() {
    let g = build_graph(&GraphSpec::bimanual(2, 2)).unwrap();
    let net = MlpBaseline::new(&g, 4, &BaselineConfig::default(), 4).unwrap();
    let tm = net.token_map();
    let s = samples(&g, tm.obs_width(), 1, 0).remove(0);
    let mut swapped = s.clone();
    // swap the features of two same-width link tokens
    let links: Vec<_> = tm.tokens().iter().filter(|t| matches!(t.signature, Some(TokenSignature::Link(_)))).collect();
    let (a, b) = (links[0], links[1]);
    for k in 0..a.width {
        swapped.obs.swap(a.offset + k, b.offset + k);
    }
    let x = policy_outputs(&net, &[&s]).unwrap();
    let y = policy_outputs(&net, &[&swapped]).unwrap();
    assert!(x[0].mu.iter().zip(&y[0].mu).any(|(u, v)| (u - v).abs() > 1e-9));
}

mod common;

use common::{rng, tiny_model};
use proptest::prelude::*;
use rand::Rng;
use skiplab::routing::{
    forward_routed, gumbel_noise, gumbel_softmax, route_token, sample_gumbel, straight_through, AnnealSchedule,
    DecisionMode, RouterBank, RouterState, Routing, TokenMode, SKIP,
};
use skiplab::tensor::{Graph, SeqLayout, Tensor};
use skiplab::trace::TraceMatrix;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[test]
fn gumbel_noise_examples() {
    assert!((gumbel_noise((-1f64).exp()) - 0.0).abs() < 1e-12);
    assert!((gumbel_noise(0.5) - 0.366_512_920_581_664_3).abs() < 1e-12);
    assert!(gumbel_noise(0.0).is_finite());
    assert!(gumbel_noise(1.0).is_finite());
}

#[test]
fn gumbel_sample_mean_is_euler_gamma() {
    let mut r = rng(1);
    let n = 1_000_000;
    let mean = (0..n).map(|_| sample_gumbel(&mut r)).sum::<f64>() / n as f64;
    // Standard error is π/√6/√n ≈ 1.3e-3.
    assert!((mean - EULER_GAMMA).abs() < 0.01, "{mean}");
}

#[test]
fn gumbel_softmax_examples() {
    let y = gumbel_softmax(&[0.5f64.ln(), 0.5f64.ln()], &[0.0, 0.0], 1.0).unwrap();
    assert!((y[0] - 0.5).abs() < 1e-15 && (y[1] - 0.5).abs() < 1e-15);
    let y = gumbel_softmax(&[0.0, 0.0], &[1.0, 0.0], 0.5).unwrap();
    let want = 1.0 / (1.0 + (-2f64).exp());
    assert!((y[0] - want).abs() < 1e-15);
    let y = gumbel_softmax(&[0.9f64.ln(), 0.1f64.ln()], &[0.0, 0.0], 1e-3).unwrap();
    assert!(y[0] > 1.0 - 1e-12);
    assert!(gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
    assert!(gumbel_softmax(&[0.0, 0.0], &[0.0], 1.0).is_err());
}

#[test]
fn gumbel_argmax_frequencies_match_probabilities() {
    let p = [0.3f64, 0.7];
    let log_pi = [p[0].ln(), p[1].ln()];
    let mut r = rng(2);
    let n = 200_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let g = [sample_gumbel(&mut r), sample_gumbel(&mut r)];
        let y = gumbel_softmax(&log_pi, &g, 1.0).unwrap();
        if y[1] > y[0] {
            hits += 1;
        }
    }
    let freq = hits as f64 / n as f64;
    // Five standard errors.
    assert!((freq - 0.7).abs() < 5.0 * (0.21f64 / n as f64).sqrt(), "{freq}");
}

#[test]
fn straight_through_examples() {
    let d = straight_through([0.7, 0.3]);
    assert_eq!(d.hard, [1.0, 0.0]);
    assert_eq!(d.soft, [0.7, 0.3]);
    assert!(!d.executes());
    assert_eq!(straight_through([0.2, 0.8]).hard, [0.0, 1.0]);
    assert_eq!(straight_through([0.5, 0.5]).hard, [0.0, 1.0]);
}

#[test]
fn straight_through_graph_value_is_hard_gradient_is_soft() {
    let mut g = Graph::<f64>::new();
    let soft = g.leaf(
        &Tensor::from_f64([2, 2], &[0.7, 0.3, 0.4, 0.6])
            .unwrap()
            .with_requires_grad(true),
    );
    let hard = g.straight_through(soft);
    assert_eq!(g.data(hard), &[1.0, 0.0, 0.0, 1.0]);
    let w = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let prod = g.mul(hard, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(soft).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
}

fn router_with(d: usize, skip_bias: f64) -> RouterState<f64> {
    let mut w = vec![0.0; 2 * d];
    w[SKIP] = skip_bias;
    RouterState {
        module_id: 0,
        weight: skiplab::tensor::Param::new("router", Tensor::new([d, 2], w).unwrap()),
    }
}

#[test]
fn route_token_branches() {
    let x = [1.0, 2.0, 3.0];
    let f = [0.5, -1.0, 4.0];
    let (y, d) = route_token(&router_with(3, 10.0), &x, &f, TokenMode::Argmax).unwrap();
    assert_eq!(y, x.to_vec());
    assert_eq!(d.hard, [1.0, 0.0]);
    assert_eq!(d.mode, DecisionMode::Argmax);
    let (y, d) = route_token(&router_with(3, -10.0), &x, &f, TokenMode::Argmax).unwrap();
    assert_eq!(y, vec![1.5, 1.0, 7.0]);
    assert!(d.executes());

    let mut r = rng(3);
    let (y, d) = route_token(
        &router_with(3, 1e6),
        &x,
        &f,
        TokenMode::SampledSt { tau: 1.0, rng: &mut r },
    )
    .unwrap();
    assert_eq!(y, x.to_vec());
    assert_eq!(d.mode, DecisionMode::SampledSt);
    assert!(route_token(&router_with(3, 0.0), &x, &f[..2], TokenMode::Argmax).is_err());
}

#[test]
fn all_skip_logits_equal_head_of_embeddings() {
    let model = tiny_model(4, false);
    let layout = SeqLayout::new(2, 5);
    let tokens = common::random_tokens(10, 11, &mut rng(5));
    let mask = TraceMatrix::filled(4, 10, 0.0);
    let mut g = Graph::new();
    let out = forward_routed(&mut g, &model, Routing::Fixed(&mask), &tokens, layout).unwrap();
    let mut want = Vec::new();
    for s in tokens.chunks(5) {
        let e = common::oracle::embed(&model, s);
        want.extend(common::oracle::head(&model, &e).into_iter().flatten());
    }
    assert!(common::rel_err(g.data(out.logits), &want) <= 1e-12);
}

#[test]
fn decisions_are_binary_in_every_mode() {
    let model = tiny_model(6, false);
    let routers = RouterBank::<f64>::new(&model.config, &mut rng(7));
    let layout = SeqLayout::new(2, 6);
    let tokens = common::random_tokens(12, 11, &mut rng(8));
    let mut g = Graph::new();
    let mut noise = rng(9);
    let sampled = forward_routed(
        &mut g,
        &model,
        Routing::Sampled {
            routers: &routers,
            tau: 2.0,
            rng: &mut noise,
        },
        &tokens,
        layout,
    )
    .unwrap();
    assert!(sampled.decisions.is_binary());
    assert_eq!((sampled.decisions.rows, sampled.decisions.cols), (4, 12));
    assert_eq!(sampled.soft.len(), 4);
    for &gate in &sampled.gates {
        for row in g.data(gate).chunks(2) {
            assert_eq!(row[0] + row[1], 1.0);
            assert!(row[0] == 0.0 || row[0] == 1.0);
        }
    }
    let arg = forward_routed(&mut g, &model, Routing::Argmax { routers: &routers }, &tokens, layout).unwrap();
    assert!(arg.decisions.is_binary());
    let p = arg.exec_prob.unwrap();
    for (&d, &pr) in arg.decisions.data.iter().zip(&p.data) {
        assert_eq!(d == 1.0, pr >= 0.5);
    }
}

#[test]
fn argmax_routing_is_deterministic() {
    let model = tiny_model(10, true);
    let routers = RouterBank::<f64>::new(&model.config, &mut rng(11));
    let layout = SeqLayout::new(3, 4);
    let tokens = common::random_tokens(12, 11, &mut rng(12));
    let run = || {
        let mut g = Graph::new();
        let out = forward_routed(&mut g, &model, Routing::Argmax { routers: &routers }, &tokens, layout).unwrap();
        (out.decisions, g.data(out.logits).to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn skipped_slot_leaves_state_untouched() {
    // With module 1 skipped everywhere, perturbing its weights changes nothing.
    let model = tiny_model(13, false);
    let mut mask = TraceMatrix::filled(4, 6, 1.0);
    for t in 0..6 {
        mask.set(1, t, 0.0);
    }
    let layout = SeqLayout::new(1, 6);
    let tokens = common::random_tokens(6, 11, &mut rng(14));
    let run = |m: &skiplab::model::Transformer<f64>| {
        let mut g = Graph::new();
        let out = forward_routed(&mut g, m, Routing::Fixed(&mask), &tokens, layout).unwrap();
        g.data(out.logits).to_vec()
    };
    let before = run(&model);
    let mut changed = model.clone();
    let mut r = rng(15);
    for v in changed.layers[0].mlp.w_up.weight.value.data_mut() {
        *v += r.gen::<f64>();
    }
    assert_eq!(before, run(&changed));
}

#[test]
fn skipped_tokens_remain_attention_context() {
    // Skipping attention at token 0 must not hide token 0 from later queries.
    let model = tiny_model(16, false);
    let layout = SeqLayout::new(1, 4);
    let mut mask = TraceMatrix::filled(4, 4, 1.0);
    mask.set(0, 0, 0.0);
    let logits = |tokens: &[usize]| {
        let mut g = Graph::new();
        let out = forward_routed(&mut g, &model, Routing::Fixed(&mask), tokens, layout).unwrap();
        g.data(out.logits)[3 * 11..].to_vec()
    };
    assert_ne!(logits(&[1, 2, 3, 4]), logits(&[5, 2, 3, 4]));
}

#[test]
fn router_weights_initialised_small() {
    let cfg = skiplab::model::ModelConfig::default();
    let bank = RouterBank::<f64>::new(&cfg, &mut rng(17));
    assert_eq!(bank.len(), 16);
    let vals: Vec<f64> = bank.params().flat_map(|p| p.value.data().to_vec()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.001, "{mean} {std}");
    assert_eq!(bank.param_count(), 16 * 256 * 2);
}

#[test]
fn router_gradients_are_nonzero_under_sampling() {
    let model = tiny_model(18, false);
    let mut routers = RouterBank::<f64>::new(&model.config, &mut rng(19));
    routers.set_trainable(true);
    let layout = SeqLayout::new(2, 6);
    let tokens = common::random_tokens(12, 11, &mut rng(20));
    let mut g = Graph::new();
    let mut noise = rng(21);
    let out = forward_routed(
        &mut g,
        &model,
        Routing::Sampled {
            routers: &routers,
            tau: 1.0,
            rng: &mut noise,
        },
        &tokens,
        layout,
    )
    .unwrap();
    let loss = g.cross_entropy(out.logits, &tokens).unwrap();
    g.backward(loss).unwrap();
    for p in routers.params() {
        let grad = g.param_grad(&p.name).expect("router gradient");
        assert!(grad.iter().any(|&v| v != 0.0), "{}", p.name);
    }
}

#[test]
fn anneal_examples() {
    let s = AnnealSchedule {
        tau_start: 5.0,
        tau_end: 1.0,
        total_steps: 100,
    };
    assert_eq!(s.tau(0), 5.0);
    assert_eq!(s.tau(50), 3.0);
    assert_eq!(s.tau(100), 1.0);
    assert_eq!(s.tau(1000), 1.0);
}

proptest! {
    #[test]
    fn anneal_is_monotone_and_bounded(start in 0.1f64..10.0, end in 0.1f64..10.0, total in 1usize..500, a in 0usize..600, b in 0usize..600) {
        let s = AnnealSchedule { tau_start: start, tau_end: end, total_steps: total };
        let (lo, hi) = (start.min(end), start.max(end));
        for step in [a, b] {
            let t = s.tau(step);
            prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12);
        }
        let (x, y) = (a.min(b), a.max(b));
        if start >= end {
            prop_assert!(s.tau(x) >= s.tau(y) - 1e-12);
        } else {
            prop_assert!(s.tau(x) <= s.tau(y) + 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_is_a_distribution(l0 in -20.0f64..0.0, l1 in -20.0f64..0.0, u0 in 0.0f64..1.0, u1 in 0.0f64..1.0, tau in 0.05f64..10.0) {
        let y = gumbel_softmax(&[l0, l1], &[gumbel_noise(u0), gumbel_noise(u1)], tau).unwrap();
        prop_assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

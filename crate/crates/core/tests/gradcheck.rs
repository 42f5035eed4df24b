//! Autodiff gradients against central finite differences.

mod common;

use autoiv::mi::{mi_max_loss, mi_min_conditional_loss, rbf_pair_weights};
use autoiv::nets::{Activation, GaussianHead, Mlp, MlpSpec};
use autoiv::numcore::{backward, Graph, ParamStore};
use common::{max_rel_error, mlp_gradcheck, random_tensor, GRAD_TOL as TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_mlps_match_finite_differences() {
    let worst = mlp_gradcheck(100, 2024);
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

#[test]
fn contrastive_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let n = rng.gen_range(2..=6);
        let v_dim = rng.gen_range(1..=3);
        let rep = rng.gen_range(1..=2);
        let v = random_tensor(&mut rng, n, v_dim);
        let x = random_tensor(&mut rng, n, 1);
        let weights = rbf_pair_weights(&x, 0.5).unwrap();
        let mut store = ParamStore::new();
        let phi = Mlp::init(MlpSpec::new(v_dim, vec![4], rep, Activation::Elu), case, &mut store, "phi").unwrap();
        let head =
            GaussianHead::init(MlpSpec::new(rep, vec![3], 1, Activation::Tanh), case + 100, &mut store, "q").unwrap();
        let mut params = phi.param_ids();
        params.extend(head.param_ids());
        let loss = |g: &mut Graph, s: &ParamStore| {
            let vn = g.constant(v.clone());
            let xn = g.constant(x.clone());
            let z = phi.forward(g, s, vn).unwrap();
            let l = head.cross_log_lik(g, s, z, xn).unwrap();
            let up = mi_max_loss(g, l).unwrap();
            let down = mi_min_conditional_loss(g, l, &weights).unwrap();
            let rows = head.row_log_lik(g, s, z, xn).unwrap();
            let fit = g.mean(rows);
            let a = g.add(up, down).unwrap();
            g.sub(a, fit).unwrap()
        };
        let err = max_rel_error(&mut store, &params, &loss);
        assert!(err <= TOL, "case {case}: relative error {err:e}");
    }
}

#[test]
fn frozen_parameters_still_pass_gradient_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let first = Mlp::init(MlpSpec::new(2, vec![3], 2, Activation::Tanh), 1, &mut store, "a").unwrap();
    let second = Mlp::init(MlpSpec::new(2, vec![3], 1, Activation::Tanh), 2, &mut store, "b").unwrap();
    let x = random_tensor(&mut rng, 4, 2);
    let build = |g: &mut Graph, s: &ParamStore| {
        let xn = g.constant(x.clone());
        let h = first.forward(g, s, xn).unwrap();
        let o = second.forward(g, s, h).unwrap();
        let sq = g.square(o);
        g.sum(sq)
    };
    let mut g = Graph::with_trainable(first.param_ids());
    let l = build(&mut g, &store);
    let grads = backward(&g, l).unwrap();
    assert!(second.param_ids().iter().all(|p| grads.param(*p).is_none()));
    let err = max_rel_error(&mut store, &first.param_ids(), &build);
    assert!(err <= TOL, "relative error {err:e}");
}

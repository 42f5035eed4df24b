//! Helpers shared by the integration tests.
#![allow(dead_code)]

use autoiv::mi::{gap_statistic, lld_loss, rbf_pair_weights};
use autoiv::nets::{cross_loglik_matrix, Activation, GaussianHead, Mlp, MlpSpec};
use autoiv::numcore::{backward, AdamState, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Largest relative error over every scalar of every listed parameter.
pub fn max_rel_error(
    store: &mut ParamStore,
    params: &[ParamId],
    loss: &dyn Fn(&mut Graph, &ParamStore) -> NodeId,
) -> f64 {
    let mut g = Graph::with_trainable(params.iter().copied());
    let l = loss(&mut g, store);
    let grads = backward(&g, l).unwrap();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, s);
        g.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for &p in params {
        let analytic = grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(store.get(p).shape()));
        for k in 0..store.get(p).len() {
            let orig = store.get(p).data()[k];
            store.get_mut(p).data_mut()[k] = orig + H;
            let up = eval(store);
            store.get_mut(p).data_mut()[k] = orig - H;
            let down = eval(store);
            store.get_mut(p).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    let input = rng.gen_range(1..=4);
    let depth = rng.gen_range(0..=2);
    let hidden = (0..depth).map(|_| rng.gen_range(1..=6)).collect();
    let output = rng.gen_range(1..=3);
    let act = [Activation::Tanh, Activation::Elu, Activation::Relu][rng.gen_range(0..3)];
    MlpSpec::new(input, hidden, output, act)
}


/// Worst relative error over `cases` random MLPs under a squared-error loss.
pub fn mlp_gradcheck(cases: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let spec = random_spec(&mut rng);
        let n = rng.gen_range(2..=6);
        let x = random_tensor(&mut rng, n, spec.input_dim);
        let t = random_tensor(&mut rng, n, spec.output_dim);
        let mut store = ParamStore::new();
        let net = Mlp::init(spec, case, &mut store, "net").unwrap();
        let params = net.param_ids();
        // Zero biases can put a ReLU exactly on its kink, where finite
        // differences are meaningless.
        for &p in &params {
            if store.get(p).shape().len() == 1 {
                for b in store.get_mut(p).data_mut() {
                    *b = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let loss = |g: &mut Graph, s: &ParamStore| {
            let xn = g.constant(x.clone());
            let tn = g.constant(t.clone());
            let out = net.forward(g, s, xn).unwrap();
            let d = g.sub(out, tn).unwrap();
            let sq = g.square(d);
            g.mean(sq)
        };
        worst = worst.max(max_rel_error(&mut store, &params, &loss));
    }
    worst
}

/// Trains `q(b | a)` by maximum likelihood and returns the gap statistic of
/// its cross log-likelihood matrix on a fresh sample of the same pair.
pub fn trained_gap(pair: impl Fn(&mut ChaCha8Rng, usize) -> (Tensor, Tensor), seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a_dim = pair(&mut rng, 1).0.cols();
    let head = GaussianHead::init(MlpSpec::new(a_dim, vec![16], 1, Activation::Elu), seed, &mut store, "q").unwrap();
    let mut adam = AdamState::new(0.01);
    for _ in 0..400 {
        let (a, b) = pair(&mut rng, 128);
        let mut g = Graph::with_trainable(head.param_ids());
        let an = g.constant(a);
        let bn = g.constant(b);
        let loss = lld_loss(&mut g, &head, &store, an, bn).unwrap();
        let grads = backward(&g, loss).unwrap();
        adam.step(&mut store, &grads).unwrap();
        head.clamp_log_var(&mut store);
    }
    let (a, b) = pair(&mut rng, 256);
    gap_statistic(&cross_loglik_matrix(&head, &store, &a, &b).unwrap())
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0).unwrap();
    Tensor::matrix(n, d, (0..n * d).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// `X = Z + U + ε`, `Y = -X + 2U + ε'` with a valid instrument `Z` and a
/// confounder `U` that biases OLS upward by about one.
pub fn oracle_dgp(n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let (mut z, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let zi: f64 = rng.sample(rand_distr::StandardNormal);
        let u: f64 = rng.sample(rand_distr::StandardNormal);
        let xi = zi + u + noise.sample(&mut rng);
        z.push(zi);
        x.push(xi);
        y.push(-xi + 2.0 * u + noise.sample(&mut rng));
    }
    (Tensor::column(z), Tensor::column(x), Tensor::column(y))
}

/// Worst row-sum error and smallest entry over `batches` random pair-weight
/// matrices, mixing tight and wide treatment scales.
pub fn pair_weight_extremes(batches: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_sum, mut min_entry) = (0.0f64, f64::INFINITY);
    for _ in 0..batches {
        let n = rng.gen_range(1..=64);
        let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
        let x = Tensor::column((0..n).map(|_| rng.gen_range(-scale..scale)).collect());
        let sigma = 10f64.powf(rng.gen_range(-1.0..1.0));
        let w = rbf_pair_weights(&x, sigma).unwrap().weights;
        for i in 0..n {
            let row = w.row(i);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_entry = row.iter().copied().fold(min_entry, f64::min);
        }
    }
    (worst_sum, min_entry)
}

/// `results.csv` with the trailing `wall_ms` column removed.
pub fn results_without_timing(path: &std::path::Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

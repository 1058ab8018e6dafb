#![allow(dead_code)]

use mcr2::projector::{self, ProjectorParams};
use mcr2::rate::{self, batch_loss_grad, RateConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Random row-stochastic `n × k` memberships with entries bounded away from 0.
pub fn soft_memberships(n: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut pi = Array2::from_shape_simple_fn((n, k), || rng.gen_range(0.1..1.0));
    for mut row in pi.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    pi
}

/// Central differences of `f` over every entry of `x`.
pub fn central_difference<F>(x: &Array2<f64>, mut f: F) -> Array2<f64>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// `‖a − b‖ / max(‖b‖, 1)`: relative for gradients of ordinary size, absolute
/// for tiny ones where central differences lose their digits.
pub fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = numeric.mapv(|v| v * v).sum().sqrt().max(1.0);
    diff / scale
}

pub struct Instance {
    pub z: Array2<f64>,
    pub pi: Array2<f64>,
}

/// `d, n ≤ 16`, `k ≤ 4`, standard normal entries.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let d = rng.gen_range(2..=16);
    let n = 2 * rng.gen_range(1..=8);
    let k = rng.gen_range(1..=4);
    Instance {
        z: gaussian(d, n, rng),
        pi: soft_memberships(n, k, rng),
    }
}

pub fn coding_rate_error(z: &Array2<f64>, eps: f64) -> f64 {
    let analytic = rate::coding_rate_grad(z.view(), eps).unwrap();
    let numeric = central_difference(z, |x| rate::coding_rate(x.view(), eps).unwrap());
    relative_error(&analytic, &numeric)
}

/// Worst error over every cluster, for both the `Z` and the `π` gradient.
pub fn cluster_rate_error(z: &Array2<f64>, pi: &Array2<f64>, eps: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..pi.ncols() {
        let col = pi.column(k).to_owned();
        let (gz, gp) = rate::cluster_rate_grad(z.view(), col.view(), eps).unwrap();
        let nz = central_difference(z, |x| rate::cluster_rate(x.view(), col.view(), eps).unwrap());
        let col2 = col.clone().insert_axis(ndarray::Axis(0));
        let np = central_difference(&col2, |p| {
            rate::cluster_rate(z.view(), p.row(0), eps).unwrap()
        });
        worst = worst.max(relative_error(&gz, &nz));
        worst = worst.max(relative_error(&gp.insert_axis(ndarray::Axis(0)), &np));
    }
    worst
}

/// The full objective on a pair batch `[Z₁ | Z₂]`, gradient in `Ẑ` and `Π`.
pub fn loss_error(z: &Array2<f64>, pi: &Array2<f64>, cfg: &RateConfig) -> f64 {
    let (_, gz, gp) = batch_loss_grad(z.view(), pi.view(), cfg).unwrap();
    let value = |zz: &Array2<f64>, pp: &Array2<f64>| {
        let b = zz.ncols() / 2;
        rate::mcr2_loss(
            zz.view(),
            pp.view(),
            zz.slice(ndarray::s![.., ..b]),
            zz.slice(ndarray::s![.., b..]),
            cfg,
        )
        .unwrap()
    };
    let nz = central_difference(z, |x| value(x, pi));
    let np = central_difference(pi, |p| value(z, p));
    relative_error(&gz, &nz).max(relative_error(&gp, &np))
}

/// Batch loss as a function of projector parameters with fixed Gumbel noise.
pub fn chain_loss(params: &ProjectorParams, z: &Array2<f64>, noise: &Array2<f64>, cfg: &RateConfig) -> f64 {
    let pass = projector::forward(params, z.view()).unwrap();
    let pi = projector::gumbel_softmax_with_noise(pass.logits.view(), noise.view(), cfg.temperature).unwrap();
    batch_loss_grad(pass.features.view(), pi.view(), cfg).unwrap().0.loss
}

pub fn chain_grad(params: &ProjectorParams, z: &Array2<f64>, noise: &Array2<f64>, cfg: &RateConfig) -> (ProjectorParams, Array2<f64>) {
    let pass = projector::forward(params, z.view()).unwrap();
    let pi = projector::gumbel_softmax_with_noise(pass.logits.view(), noise.view(), cfg.temperature).unwrap();
    let (_, gf, gp) = batch_loss_grad(pass.features.view(), pi.view(), cfg).unwrap();
    let gl = projector::gumbel_softmax_backward(pi.view(), gp.view(), cfg.temperature);
    let g = projector::backward(params, z.view(), &pass, gf.view(), gl.view()).unwrap();
    (g.params, g.input)
}

/// Finite differences through forward, Gumbel-Softmax, loss and back, over
/// every parameter and every input entry.
pub fn chain_error(rng: &mut impl Rng) -> f64 {
    let d_in = rng.gen_range(2..=8);
    let d_hidden = rng.gen_range(2..=8);
    let d_feat = rng.gen_range(2..=6);
    let k = rng.gen_range(1..=4);
    let m = 2 * rng.gen_range(2..=6);
    let mut params = ProjectorParams::zeros(d_in, d_hidden, d_feat, k);
    for v in params.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * 0.7;
    }
    let z = gaussian(d_in, m, rng);
    let noise = projector::sample_gumbel(k, m, rng);
    let cfg = RateConfig {
        epsilon_sq: 0.5,
        lambda: rng.gen_range(0.5..4.0),
        temperature: rng.gen_range(0.5..2.0),
        clusters: k,
    };
    let (grads, grad_input) = chain_grad(&params, &z, &noise, &cfg);

    let analytic: Vec<f64> = grads.iter().copied().collect();
    let base: Vec<f64> = params.iter().copied().collect();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            *p.iter_mut().nth(i).unwrap() = base[i] + delta;
            chain_loss(&p, &z, &noise, &cfg)
        };
        numeric.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
    }
    let a = Array2::from_shape_vec((1, analytic.len()), analytic).unwrap();
    let n = Array2::from_shape_vec((1, numeric.len()), numeric).unwrap();
    let input_numeric = central_difference(&z, |x| chain_loss(&params, x, &noise, &cfg));
    relative_error(&a, &n).max(relative_error(&grad_input, &input_numeric))
}

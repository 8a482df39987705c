//! Shared test oracles.
#![allow(dead_code)]

use vlfat::numerics::{Graph, RngStream, Tensor, Var};
use vlfat::params::ParamStore;

pub const FD_STEP: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn random_dims(rng: &mut RngStream, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(max)).collect()
}

/// `||a - b|| / (||a|| + ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        diff
    } else {
        diff / (na + nb)
    }
}

/// Builds `f(inputs)` and reduces it against a fixed random projection.
fn project(g: &mut Graph, out: Var, proj: &[f64]) -> Var {
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, proj.to_vec()).unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

fn output_len<F>(inputs: &[Tensor], f: &F) -> usize
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars);
    g.data(out).len()
}

/// Central finite-difference check of every input of `f`. Returns the
/// worst relative error across inputs.
pub fn check_op<F>(inputs: &[Tensor], f: F, rng: &mut RngStream) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let proj: Vec<f64> = (0..output_len(inputs, &f)).map(|_| rng.normal()).collect();
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars);
        let s = project(&mut g, out, &proj);
        g.scalar(s)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    let s = project(&mut g, out, &proj);
    g.backward(s);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut ts = inputs.to_vec();
            ts[i].data_mut()[j] += FD_STEP;
            let up = eval(&ts);
            ts[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&ts);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of `loss(store)` against its accumulated
/// parameter gradients on `coords` randomly chosen coordinates.
pub fn check_params<L, B>(store: &mut ParamStore, loss: L, backward: B, coords: usize, rng: &mut RngStream) -> f64
where
    L: Fn(&ParamStore) -> f64,
    B: Fn(&mut ParamStore),
{
    store.zero_grad();
    backward(store);
    let sizes: Vec<usize> = store.iter().map(|p| p.tensor.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    let mut flat = store.flatten();
    let grads: Vec<f64> = store
        .iter()
        .flat_map(|p| p.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    for _ in 0..coords {
        let j = rng.below(total);
        let orig = flat[j];
        flat[j] = orig + FD_STEP;
        store.load_flat(&flat).unwrap();
        let up = loss(store);
        flat[j] = orig - FD_STEP;
        store.load_flat(&flat).unwrap();
        let down = loss(store);
        flat[j] = orig;
        store.load_flat(&flat).unwrap();
        analytic.push(grads[j]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    store.zero_grad();
    relative_error(&analytic, &numeric)
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(mode: vlfat::aggregator::AggregatorMode) -> vlfat::model::ModelConfig {
    use vlfat::aggregator::AggregatorMode;
    use vlfat::slice_encoder::EncoderConfig;
    let variable = mode == AggregatorMode::Vlfat;
    vlfat::model::ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            dropout: 0.0,
            pixel_mean: 0.0,
            pixel_std: 1.0,
        },
        aggregator_mode: mode,
        agg_blocks: 1,
        agg_heads: 2,
        num_classes: 3,
        schedule: variable.then(|| vec![2, 4]),
        fixed_train_length: (!variable).then_some(4),
        pe_renorm: false,
    }
}

pub mod criteria;

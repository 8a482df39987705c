//! Deterministic `f64` tensors with reverse-mode differentiation.
//!
//! The free functions here are eager conveniences over a throwaway
//! [`Graph`]; model code records into a shared graph instead.

mod graph;
mod rng;
mod tensor;

pub use graph::{gelu_scalar, interp_coords, Graph, Var};
pub use rng::{fnv1a, RngStream};
pub use tensor::Tensor;

use crate::error::{Error, Result};

fn eager(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    eager(|g| {
        let (x, y) = (g.leaf(a), g.leaf(b));
        g.matmul(x, y)
    })
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    eager(|g| {
        let v = g.leaf(x);
        g.softmax(v, axis)
    })
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    eager(|g| {
        let (v, w, b) = (g.leaf(x), g.leaf(gain), g.leaf(bias));
        g.layer_norm(v, w, b, eps)
    })
}

pub fn gelu(x: &Tensor) -> Tensor {
    eager(|g| {
        let v = g.leaf(x);
        Ok(g.gelu(v))
    })
    .expect("gelu is total")
}

/// Align-corners linear resampling of `src` (n_src, d) to `n_dst` rows.
pub fn interp_linear_rows(src: &Tensor, n_dst: usize) -> Result<Tensor> {
    eager(|g| {
        let v = g.leaf(src);
        g.interp_rows(v, n_dst)
    })
}

/// I.i.d. draws from N(mean, std^2) conditioned on [lo, hi], by rejection.
pub fn truncated_normal_init(
    shape: &[usize],
    mean: f64,
    std: f64,
    lo: f64,
    hi: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if !(lo < hi) || !(std > 0.0) {
        return Err(Error::InvalidInput(format!(
            "truncated normal needs lo < hi and std > 0 (lo={lo}, hi={hi}, std={std})"
        )));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x = mean + std * rng.normal();
        if (lo..=hi).contains(&x) {
            data.push(x);
        }
    }
    Tensor::new(shape, data)
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], the usual linear-layer init.
pub fn scaled_uniform_init(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        let p = matmul(&t(&[&[1.0, 0.0], &[0.0, 0.0]]), &t(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0]);
        let err = matmul(&a, &t(&[&[1.0, 2.0, 3.0]])).unwrap_err();
        assert!(err.to_string().contains("[2, 2]") && err.to_string().contains("[1, 3]"));
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut g = Graph::new();
        let a = g.param(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.leaf(&t(&[&[5.0, 6.0, 7.0], &[8.0, 9.0, 10.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s);
        // ones(2,3) x b^T: each row is the row sums of b
        assert_eq!(g.grad(a).unwrap(), &[18.0, 27.0, 18.0, 27.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[&[0.0, 1.0], &[3f64.ln(), 1.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[2] - 0.75).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let c = Tensor::new(&[1, 3], vec![2.5; 3]).unwrap();
        assert_eq!(layer_norm(&c, &ones, &zeros, 1e-5).unwrap().data(), &[0.0; 3]);
        let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-300).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
        assert!(layer_norm(&x, &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-12);
        // closed form at 40 digits: 0.84119199060827670478...
        assert!((y.data()[2] - 0.841_191_990_608_276_7).abs() < 1e-15);
    }

    #[test]
    fn interp_examples() {
        let src = t(&[&[0.0], &[1.0], &[2.0]]);
        let out = interp_linear_rows(&src, 5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(interp_linear_rows(&src, 3).unwrap(), src);
        let mid = interp_linear_rows(&t(&[&[0.0], &[10.0]]), 3).unwrap();
        assert_eq!(mid.data(), &[0.0, 5.0, 10.0]);
        assert_eq!(interp_linear_rows(&src, 1).unwrap().data(), &[0.0]);
        assert!(interp_linear_rows(&t(&[&[1.0]]), 4).is_err());
    }

    #[test]
    fn interp_identity_is_bitwise() {
        let src = t(&[&[-0.0, 1e-300], &[f64::MIN_POSITIVE, -3.25], &[7.0, 0.1]]);
        let out = interp_linear_rows(&src, 3).unwrap();
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&src));
    }

    #[test]
    fn interp_grad_splits_by_weight() {
        let mut g = Graph::new();
        let x = g.param(&t(&[&[0.0], &[1.0]]));
        let y = g.interp_rows(x, 5).unwrap();
        let s = g.sum_all(y);
        g.backward(s);
        // weights on row 1 are 0, .25, .5, .75, 1
        assert_eq!(g.grad(x).unwrap(), &[2.5, 2.5]);
    }

    #[test]
    fn truncated_normal_examples() {
        let mut r = RngStream::labeled(3, "tn");
        let x = truncated_normal_init(&[1000], 0.0, 0.02, -0.04, 0.04, &mut r).unwrap();
        assert!(x.data().iter().all(|v| v.abs() <= 0.04));
        let mut r2 = RngStream::labeled(3, "tn");
        let y = truncated_normal_init(&[1000], 0.0, 0.02, -0.04, 0.04, &mut r2).unwrap();
        assert_eq!(x, y);
        assert!(truncated_normal_init(&[2], 0.0, 1.0, 1.0, 1.0, &mut r).is_err());
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s);
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s);
        let twice = g.grad(x).unwrap();
        assert_eq!(once, vec![2.0, 4.0, 6.0]);
        assert!(twice.iter().zip(&once).all(|(a, b)| *a == 2.0 * b));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum_all(b);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn dropout_identity_outside_training() {
        let mut g = Graph::new();
        let mut r = RngStream::new(0, 0);
        let x = g.leaf(&Tensor::full(&[4], 1.0));
        assert_eq!(g.dropout(x, 0.5, false, &mut r), x);
        assert_eq!(g.dropout(x, 0.0, true, &mut r), x);
        let y = g.dropout(x, 0.5, true, &mut r);
        assert!(g.data(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(&[2, 3, 4], data.clone()).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(g.data(y)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(z), &data[..]);
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }
}

//! Self-contained checks shared by the integration tests and the
//! acceptance runner. Each returns a one-line summary or the first failure.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::{check_op, check_params, random_dims, random_tensor, tiny_config};
use vlfat::aggregator::{interpolate_pe, interpolate_pe_tensor, AggregatorMode};
use vlfat::data::subsample_indices;
use vlfat::metrics::{auroc_ova, balanced_accuracy, confusion_matrix};
use vlfat::model::{Model, ModelConfig};
use vlfat::numerics::{Graph, RngStream, Tensor, Var};
use vlfat::training::{adamw_step, adamw_store_step, cosine_lr, weighted_ce_loss, weighted_cross_entropy, OptimState};
use vlfat::transformer::Ctx;

pub type Outcome = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_shape(rng: &mut RngStream) -> Vec<usize> {
    let rank = 1 + rng.below(3);
    random_dims(rng, rank, 4)
}

type Trial = Box<dyn Fn(&mut RngStream) -> f64>;

fn unary(f: impl Fn(&mut Graph, Var) -> Var + Clone + 'static, shape: impl Fn(&mut RngStream) -> Vec<usize> + 'static) -> Trial {
    Box::new(move |rng| {
        let x = random_tensor(&shape(rng), rng);
        let f = f.clone();
        check_op(&[x], move |g, v| f(g, v[0]), rng)
    })
}

fn binary_broadcast(kind: &'static str) -> Trial {
    Box::new(move |rng| {
        let a = rand_shape(rng);
        let keep = 1 + rng.below(a.len());
        let b = a[a.len() - keep..].to_vec();
        let inputs = [random_tensor(&a, rng), random_tensor(&b, rng)];
        check_op(
            &inputs,
            |g, v| match kind {
                "add" => g.add(v[0], v[1]).unwrap(),
                "sub" => g.sub(v[0], v[1]).unwrap(),
                _ => g.mul(v[0], v[1]).unwrap(),
            },
            rng,
        )
    })
}

fn op_trials() -> Vec<(String, Trial)> {
    let mut t: Vec<(String, Trial)> = Vec::new();
    for kind in ["add", "sub", "mul"] {
        t.push((kind.into(), binary_broadcast(kind)));
    }
    t.push(("scale".into(), Box::new(|rng| {
        let c = rng.normal();
        let x = random_tensor(&rand_shape(rng), rng);
        check_op(&[x], |g, v| g.scale(v[0], c), rng)
    })));
    t.push(("gelu".into(), unary(|g, x| g.gelu(x), rand_shape)));
    t.push(("matmul".into(), Box::new(|rng| {
        let rank = 2 + rng.below(2);
        let a = random_dims(rng, rank, 4);
        let (k, p) = (a[rank - 1], 1 + rng.below(4));
        let inputs = [random_tensor(&a, rng), random_tensor(&[k, p], rng)];
        check_op(&inputs, |g, v| g.matmul(v[0], v[1]).unwrap(), rng)
    })));
    for trans in [false, true] {
        t.push((if trans { "bmm_nt" } else { "bmm_nn" }.into(), Box::new(move |rng| {
            let d = random_dims(rng, 4, 4);
            let (b, m, k, p) = (d[0], d[1], d[2], d[3]);
            let bs = if trans { [b, p, k] } else { [b, k, p] };
            let inputs = [random_tensor(&[b, m, k], rng), random_tensor(&bs, rng)];
            check_op(&inputs, |g, v| g.bmm(v[0], v[1], trans).unwrap(), rng)
        })));
    }
    t.push(("reshape".into(), Box::new(|rng| {
        let s = random_dims(rng, 3, 4);
        let x = random_tensor(&s, rng);
        check_op(&[x], |g, v| g.reshape(v[0], &[s[0] * s[1], s[2]]).unwrap(), rng)
    })));
    t.push(("permute".into(), Box::new(|rng| {
        let x = random_tensor(&random_dims(rng, 4, 3), rng);
        let mut perm = vec![0, 1, 2, 3];
        rng.shuffle(&mut perm);
        check_op(&[x], |g, v| g.permute(v[0], &perm).unwrap(), rng)
    })));
    t.push(("transpose".into(), unary(|g, x| g.transpose(x).unwrap(), |r| random_dims(r, 2, 4))));
    t.push(("concat".into(), Box::new(|rng| {
        let s = random_dims(rng, 3, 3);
        let axis = rng.below(3);
        let mut s2 = s.clone();
        s2[axis] = 1 + rng.below(3);
        let inputs = [random_tensor(&s, rng), random_tensor(&s2, rng)];
        check_op(&inputs, |g, v| g.concat(&[v[0], v[1]], axis).unwrap(), rng)
    })));
    t.push(("narrow".into(), Box::new(|rng| {
        let s = random_dims(rng, 3, 4);
        let axis = rng.below(3);
        let start = rng.below(s[axis]);
        let len = 1 + rng.below(s[axis] - start);
        let x = random_tensor(&s, rng);
        check_op(&[x], |g, v| g.narrow(v[0], axis, start, len).unwrap(), rng)
    })));
    t.push(("index_select".into(), Box::new(|rng| {
        let s = random_dims(rng, 3, 4);
        let axis = rng.below(3);
        let idx: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(s[axis])).collect();
        let x = random_tensor(&s, rng);
        check_op(&[x], |g, v| g.index_select(v[0], axis, &idx).unwrap(), rng)
    })));
    t.push(("select".into(), Box::new(|rng| {
        let s = random_dims(rng, 3, 4);
        let axis = rng.below(3);
        let i = rng.below(s[axis]);
        let x = random_tensor(&s, rng);
        check_op(&[x], |g, v| g.select(v[0], axis, i).unwrap(), rng)
    })));
    t.push(("repeat".into(), Box::new(|rng| {
        let c = 1 + rng.below(3);
        let x = random_tensor(&rand_shape(rng), rng);
        check_op(&[x], |g, v| g.repeat(v[0], c), rng)
    })));
    for kind in ["sum_axis", "mean_axis", "max_axis", "softmax", "log_softmax"] {
        t.push((kind.into(), Box::new(move |rng| {
            let s = random_dims(rng, 3, 4);
            let axis = rng.below(3);
            let x = random_tensor(&s, rng);
            check_op(
                &[x],
                |g, v| match kind {
                    "sum_axis" => g.sum_axis(v[0], axis).unwrap(),
                    "mean_axis" => g.mean_axis(v[0], axis).unwrap(),
                    "max_axis" => g.max_axis(v[0], axis).unwrap(),
                    "softmax" => g.softmax(v[0], axis).unwrap(),
                    _ => g.log_softmax(v[0], axis).unwrap(),
                },
                rng,
            )
        })));
    }
    t.push(("sum_all".into(), unary(|g, x| g.sum_all(x), rand_shape)));
    t.push(("mean_all".into(), unary(|g, x| g.mean_all(x), rand_shape)));
    t.push(("layer_norm".into(), Box::new(|rng| {
        // at d = 2 the output is ±1 up to eps and its gradient is round-off
        let (rows, d) = (1 + rng.below(4), 3 + rng.below(4));
        let inputs = [random_tensor(&[rows, d], rng), random_tensor(&[d], rng), random_tensor(&[d], rng)];
        check_op(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), rng)
    })));
    t.push(("dropout".into(), Box::new(|rng| {
        let seed = rng.below(1000) as u64;
        let x = random_tensor(&rand_shape(rng), rng);
        check_op(&[x], move |g, v| g.dropout(v[0], 0.3, true, &mut RngStream::new(seed, 3)), rng)
    })));
    t.push(("pick".into(), Box::new(|rng| {
        let s = random_dims(rng, 2, 4);
        let idx: Vec<usize> = (0..s[0]).map(|_| rng.below(s[1])).collect();
        let x = random_tensor(&s, rng);
        check_op(&[x], |g, v| g.pick(v[0], &idx).unwrap(), rng)
    })));
    t.push(("weighted_cross_entropy".into(), Box::new(|rng| {
        let (b, k) = (1 + rng.below(4), 2 + rng.below(3));
        let y: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let w = Tensor::new(&[k], (0..k).map(|_| 0.5 + rng.uniform()).collect()).unwrap();
        let x = random_tensor(&[b, k], rng);
        check_op(&[x], |g, v| weighted_cross_entropy(g, v[0], &y, &w).unwrap(), rng)
    })));
    t.push(("interp_linear_rows".into(), Box::new(|rng| {
        let (n_src, n_dst) = (2 + rng.below(6), 1 + rng.below(10));
        let x = random_tensor(&[n_src, 1 + rng.below(3)], rng);
        check_op(&[x], |g, v| g.interp_rows(v[0], n_dst).unwrap(), rng)
    })));
    t.push(("interpolate_pe".into(), Box::new(|rng| {
        let (n_base, n_dst) = (2 + rng.below(6), 1 + rng.below(10));
        let bank = random_tensor(&[n_base + 1, 1 + rng.below(3)], rng);
        check_op(&[bank], |g, v| interpolate_pe(g, v[0], n_dst).unwrap(), rng)
    })));
    for mode in AggregatorMode::ALL {
        t.push((format!("forward_volume/{mode}"), Box::new(move |rng| model_trial(mode, rng))));
    }
    t
}

fn model_loss(model: &Model, vols: &[Tensor], y: &[usize], g: &mut Graph) -> (Var, vlfat::params::Bound) {
    let bound = model.params().bind(g);
    let mut r = RngStream::new(0, 0);
    let mut ctx = Ctx::eval(&mut r);
    let refs: Vec<&Tensor> = vols.iter().collect();
    let logits = model.forward(g, &bound, &refs, &mut ctx).unwrap();
    let w = Tensor::new(&[3], vec![1.0, 0.7, 1.3]).unwrap();
    (weighted_cross_entropy(g, logits, y, &w).unwrap(), bound)
}

fn model_trial(mode: AggregatorMode, rng: &mut RngStream) -> f64 {
    let seed = rng.below(1 << 20) as u64;
    let mut model = Model::new(tiny_config(mode), seed).unwrap();
    let n = 1 + rng.below(6);
    let b = 1 + rng.below(2);
    let vols: Vec<Tensor> = (0..b).map(|_| random_tensor(&[n, 8, 8], rng)).collect();
    let y: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
    let probe = model.clone();
    let with = |store: &vlfat::params::ParamStore| {
        let mut m = probe.clone();
        *m.params_mut() = store.clone();
        m
    };
    check_params(
        model.params_mut(),
        |store| {
            let mut g = Graph::new();
            let (l, _) = model_loss(&with(store), &vols, &y, &mut g);
            g.scalar(l)
        },
        |store| {
            let mut g = Graph::new();
            let (l, bound) = model_loss(&with(store), &vols, &y, &mut g);
            g.backward(l);
            store.collect_grads(&g, &bound);
        },
        12,
        rng,
    )
}

/// Worst relative finite-difference error per differentiable operation.
pub fn gradient_suite(trials: usize) -> Vec<(String, f64)> {
    op_trials()
        .into_iter()
        .map(|(name, trial)| {
            let mut rng = RngStream::labeled(11, &name);
            let worst = (0..trials).map(|_| trial(&mut rng)).fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn gradients(trials: usize) -> Outcome {
    let results = gradient_suite(trials);
    let (name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .collect();
    if failing.is_empty() {
        Ok(format!("{} ops x {trials} trials, worst {name} at {worst:.2e}", results.len()))
    } else {
        Err(format!("relative error >= {GRAD_TOL:e}: {}", failing.join(", ")))
    }
}

pub fn pe_interpolation() -> Outcome {
    let mut rng = RngStream::labeled(5, "pe-suite");
    for _ in 0..200 {
        let n_base = 2 + rng.below(20);
        let d = 1 + rng.below(6);
        let bank = random_tensor(&[n_base + 1, d], &mut rng);
        let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();

        let same = interpolate_pe_tensor(&bank, n_base).map_err(|e| e.to_string())?;
        ensure(same.data() == bank.data(), || format!("identity broken at n_base {n_base}"))?;

        let n_dst = 1 + rng.below(40);
        let out = interpolate_pe_tensor(&bank, n_dst).map_err(|e| e.to_string())?;
        ensure(out.shape() == [n_dst + 1, d], || format!("shape {:?}", out.shape()))?;
        ensure(row(&out, 0) == row(&bank, 0), || "cls row changed".into())?;
        ensure(row(&out, 1) == row(&bank, 1), || format!("first row moved ({n_base} -> {n_dst})"))?;
        if n_dst >= 2 {
            ensure(row(&out, n_dst) == row(&bank, n_base), || format!("last row moved ({n_base} -> {n_dst})"))?;
        }

        let (a, b): (Vec<f64>, Vec<f64>) = (0..d).map(|_| (rng.normal(), rng.normal())).unzip();
        let mut affine = row(&bank, 0);
        for i in 0..n_base {
            affine.extend((0..d).map(|c| a[c] + b[c] * i as f64));
        }
        let affine = Tensor::new(&[n_base + 1, d], affine).unwrap();
        let out = interpolate_pe_tensor(&affine, n_dst).map_err(|e| e.to_string())?;
        for j in 0..n_dst {
            let x = if n_dst == 1 { 0.0 } else { j as f64 * (n_base - 1) as f64 / (n_dst - 1) as f64 };
            for c in 0..d {
                let want = a[c] + b[c] * x;
                let got = out.data()[(j + 1) * d + c];
                ensure((got - want).abs() <= 1e-12, || {
                    format!("affine bank off by {:e} ({n_base} -> {n_dst})", (got - want).abs())
                })?;
            }
        }
    }

    // one optimizer step at n != n_base moves adjacent bank rows
    let cfg = ModelConfig::toy(AggregatorMode::Vlfat);
    let mut model = Model::new(cfg, 3).map_err(|e| e.to_string())?;
    let id = model.params().find("aggregator.pe_bank").ok_or("no PE bank")?;
    let before = model.params().get(id).clone();
    let n_base = before.shape()[0] - 1;
    let n = 5;
    let vol = random_tensor(&[n, 32, 32], &mut rng);
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let mut r = RngStream::new(0, 0);
    let logits = model.forward(&mut g, &bound, &[&vol], &mut Ctx::eval(&mut r)).map_err(|e| e.to_string())?;
    let w = Tensor::new(&[4], vec![1.0; 4]).unwrap();
    let loss = weighted_cross_entropy(&mut g, logits, &[2], &w).map_err(|e| e.to_string())?;
    g.backward(loss);
    model.params_mut().collect_grads(&g, &bound);
    let mut opt = OptimState::for_store(model.params(), 0.9, 0.999, 1e-8);
    adamw_store_step(model.params_mut(), &mut opt, 1e-3, 0.0);
    let after = model.params().get(id);
    let d = before.shape()[1];
    let moved: Vec<bool> = (1..=n_base)
        .map(|i| before.data()[i * d..(i + 1) * d] != after.data()[i * d..(i + 1) * d])
        .collect();
    let adjacent = moved.windows(2).any(|w| w[0] && w[1]);
    ensure(adjacent, || format!("no two adjacent bank rows moved: {moved:?}"))?;
    Ok(format!(
        "200 random banks exact; {} of {n_base} bank rows updated after one step at n = {n}",
        moved.iter().filter(|&&m| m).count()
    ))
}

pub fn permutation() -> Outcome {
    let mut rng = RngStream::labeled(9, "permutation");
    let mut worst: f64 = 0.0;
    for mode in [AggregatorMode::NoPe, AggregatorMode::AvgPool, AggregatorMode::MaxPool] {
        for trial in 0..5 {
            let model = Model::new(ModelConfig::toy(mode), trial).map_err(|e| e.to_string())?;
            let n = 2 + rng.below(10);
            let vol = random_tensor(&[n, 32, 32], &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let shuffled = permute_slices(&vol, &perm);
            let a = model.forward_volume(&vol, false, &mut RngStream::new(0, 0)).map_err(|e| e.to_string())?;
            let b = model.forward_volume(&shuffled, false, &mut RngStream::new(0, 0)).map_err(|e| e.to_string())?;
            let delta = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            ensure(delta <= 1e-9, || format!("{mode} changed by {delta:e} under permutation"))?;
            worst = worst.max(delta);
        }
    }
    let model = Model::new(ModelConfig::toy(AggregatorMode::Fat), 0).map_err(|e| e.to_string())?;
    let vol = random_tensor(&[8, 32, 32], &mut RngStream::new(0, 1));
    let reversed = permute_slices(&vol, &(0..8).rev().collect::<Vec<_>>());
    let a = model.forward_volume(&vol, false, &mut RngStream::new(0, 0)).map_err(|e| e.to_string())?;
    let b = model.forward_volume(&reversed, false, &mut RngStream::new(0, 0)).map_err(|e| e.to_string())?;
    let delta = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(delta > 1e-6, || format!("learned-PE FAT moved only {delta:e} under reversal"))?;
    Ok(format!("pooled/noPE worst delta {worst:.1e}; FAT delta {delta:.2e}"))
}

pub fn permute_slices(vol: &Tensor, perm: &[usize]) -> Tensor {
    let per = vol.shape()[1] * vol.shape()[2];
    let mut data = Vec::with_capacity(vol.numel());
    for &i in perm {
        data.extend_from_slice(&vol.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(vol.shape(), data).unwrap()
}

/// Exhaustive pair counting: (#correctly ordered + ties / 2) / (P · N).
pub fn auroc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &pi) in positive.iter().enumerate() {
        if pi {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if !pj {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (p > 0 && n > 0).then(|| twice as f64 / 2.0 / (p * n) as f64)
}

/// Frozen 40-digit references for `-w_t · log softmax(z)_t`.
pub const CE_REFERENCES: [(&[f64], usize, &[f64], f64); 5] = [
    (&[1.0, -1.0, 0.0], 2, &[1.0, 1.0, 1.0], 1.407_605_964_444_380_304_482_92),
    (&[0.5, 2.25, -3.0, 1.0], 0, &[0.75, 1.5, 1.25, 0.5], 1.599_160_799_195_219_992_775_261),
    (&[10.0, -10.0], 1, &[1.0, 2.0], 40.000_000_004_122_307_240_628_76),
    (&[0.1, 0.2, 0.3, 0.4], 3, &[2.0, 1.0, 1.0, 1.0], 1.242_535_529_455_162_719_631_028),
    (&[-700.0, 0.0, 3.5], 0, &[1.0, 1.0, 1.0], 703.529_750_418_272_620_565_194_8),
];

pub fn metric_oracles() -> Outcome {
    let mut rng = RngStream::labeled(13, "metrics");
    for inst in 0..1000 {
        let k = 2 + rng.below(4);
        let len = 2 + rng.below(40);
        let y: Vec<usize> = (0..len).map(|_| rng.below(k)).collect();
        // coarse scores force plenty of ties
        let levels = 1 + rng.below(8);
        let scores: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..k).map(|_| rng.below(levels) as f64 / levels as f64).collect())
            .collect();
        let got = auroc_ova(&y, &scores, k).map_err(|e| e.to_string())?;
        let mut defined = Vec::new();
        for c in 0..k {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = y.iter().map(|&t| t == c).collect();
            let want = auroc_pairs(&col, &pos);
            ensure(got.per_class[c] == want, || format!("instance {inst} class {c}: {:?} vs {want:?}", got.per_class[c]))?;
            defined.extend(want);
        }
        let want_macro = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        ensure(got.macro_avg == want_macro, || format!("instance {inst}: macro {:?} vs {want_macro:?}", got.macro_avg))?;

        let pred: Vec<usize> = (0..len).map(|_| rng.below(k)).collect();
        let cm = confusion_matrix(&y, &pred, k).map_err(|e| e.to_string())?;
        let present: Vec<usize> = (0..k).filter(|&c| cm[c].iter().sum::<usize>() > 0).collect();
        let want = present
            .iter()
            .map(|&c| cm[c][c] as f64 / cm[c].iter().sum::<usize>() as f64)
            .sum::<f64>()
            / present.len() as f64;
        if present.len() == k {
            let got = balanced_accuracy(&y, &pred, k).map_err(|e| e.to_string())?;
            ensure(got == want, || format!("instance {inst}: bacc {got} vs {want}"))?;
        }
    }
    let mut worst: f64 = 0.0;
    for (logits, t, w, want) in CE_REFERENCES {
        let got = weighted_ce_loss(logits, t, w).map_err(|e| e.to_string())?;
        let err = (got - want).abs();
        ensure(err <= 1e-12, || format!("CE {logits:?} off by {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("1000 AUROC/BAcc instances exact; CE worst error {worst:.1e}"))
}

/// Probability that the subsampler's rounded, range-rejected normal lands
/// on each index of a volume with `total` slices.
pub fn subsample_pmf(total: usize) -> Vec<f64> {
    let mean = (total - 1) as f64 / 2.0;
    let std = total as f64 / 4.0;
    let normal = Normal::new(mean, std).unwrap();
    let raw: Vec<f64> = (0..total)
        .map(|i| normal.cdf(i as f64 + 0.5) - normal.cdf(i as f64 - 0.5))
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|p| p / z).collect()
}

pub fn subsampling(draws: usize) -> Outcome {
    let total = 101;
    let mut rng = RngStream::labeled(17, "subsample-gof");
    let mut counts = vec![0usize; total];
    for _ in 0..draws {
        let idx = subsample_indices(total, 1, &mut rng).map_err(|e| e.to_string())?;
        counts[idx[0]] += 1;
    }
    let pmf = subsample_pmf(total);
    let stat: f64 = counts
        .iter()
        .zip(&pmf)
        .map(|(&o, &p)| {
            let e = p * draws as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new((total - 1) as f64).unwrap().inverse_cdf(0.99);
    ensure(stat < critical, || format!("chi-square {stat:.1} >= {critical:.1}"))?;
    for _ in 0..draws {
        let n_total = 1 + rng.below(80);
        let n = 1 + rng.below(n_total);
        let idx = subsample_indices(n_total, n, &mut rng).map_err(|e| e.to_string())?;
        ensure(idx.len() == n && idx.windows(2).all(|w| w[0] < w[1]) && idx[n - 1] < n_total, || {
            format!("bad draw {idx:?} for n = {n} of {n_total}")
        })?;
    }
    Ok(format!("chi-square {stat:.1} < {critical:.1} (df {}); {} multi-slice draws sorted and unique", total - 1, draws))
}

pub fn optimizer() -> Outcome {
    let mut p = vec![0.0];
    let mut st = OptimState::new(&[1], 0.9, 0.999, 1e-8);
    for _ in 0..200 {
        let g = 2.0 * (p[0] - 3.0);
        adamw_step(&mut [&mut p], &[&[g]], &mut st, 0.1, 0.0).map_err(|e| e.to_string())?;
    }
    ensure((p[0] - 3.0).abs() < 1e-2, || format!("AdamW ended at {}", p[0]))?;
    let (hi, lo, t) = (1e-3, 1e-5, 780);
    ensure(cosine_lr(0, t, hi, lo) == hi, || "cosine_lr(0) != lr_max".into())?;
    ensure(cosine_lr(t, t, hi, lo) == lo, || "cosine_lr(T) != lr_min".into())?;
    let mid = cosine_lr(t / 2, t, hi, lo);
    ensure(mid == (hi + lo) / 2.0, || format!("cosine_lr(T/2) = {mid:e}"))?;
    Ok(format!("|p - 3| = {:.1e} after 200 steps; cosine endpoints exact", (p[0] - 3.0).abs()))
}

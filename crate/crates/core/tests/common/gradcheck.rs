//! Finite-difference checks of every backward pass, run in `f64`.

use lcarep_core::backbone::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward,
    Backbone, BackboneConfig, Checkpoint,
};
use lcarep_core::classifier::{logreg_loss, logreg_objective};
use lcarep_core::losses::{contrastive_batch, contrastive_loss, pair_distance, smooth_l1};
use lcarep_core::tensor::{l2_normalize, l2_normalize_backward};
use lcarep_core::{lca_backward, lca_forward, LcaConfig, Tensor, Weighting};
use rand::Rng;

use super::*;

pub const CASES: usize = 24;

/// Worst relative error seen for one operation.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.cases >= 20 && self.max_err <= GRAD_REL_TOL
    }
}

fn report(op: &'static str, errs: Vec<f64>) -> OpReport {
    OpReport {
        op,
        cases: errs.len(),
        max_err: errs.into_iter().fold(0.0, f64::max),
    }
}

fn tensor(dims: Vec<usize>, data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims, data.to_vec()).unwrap()
}

pub fn conv() -> Vec<OpReport> {
    let (mut e_in, mut e_k, mut e_b) = (Vec::new(), Vec::new(), Vec::new());
    for case in 0..CASES as u64 {
        let mut r = rng(100 + case);
        let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let x = uniform_vec(&mut r, h * w * cin, -1.0, 1.0);
        let k = uniform_vec(&mut r, 9 * cin * cout, -1.0, 1.0);
        let b = uniform_vec(&mut r, cout, -1.0, 1.0);
        let weights = uniform_vec(&mut r, h * w * cout, -1.0, 1.0);
        let loss = |x: &[f64], k: &[f64], b: &[f64]| {
            let y = conv2d_forward(
                &tensor(vec![h, w, cin], x),
                &tensor(vec![3, 3, cin, cout], k),
                &tensor(vec![cout], b),
            )
            .unwrap();
            weighted_sum(&weights, y.data())
        };
        let (gi, gk, gb) = conv2d_backward(
            &tensor(vec![h, w, cin], &x),
            &tensor(vec![3, 3, cin, cout], &k),
            &tensor(vec![h, w, cout], &weights),
        )
        .unwrap();
        let ci = sample_coords(&mut r, x.len(), 48);
        e_in.push(max_grad_err(&mut |v| loss(v, &k, &b), &x, gi.data(), &ci));
        let ck = sample_coords(&mut r, k.len(), 48);
        e_k.push(max_grad_err(&mut |v| loss(&x, v, &b), &k, gk.data(), &ck));
        let cb: Vec<usize> = (0..cout).collect();
        e_b.push(max_grad_err(&mut |v| loss(&x, &k, v), &b, gb.data(), &cb));
    }
    vec![report("conv/input", e_in), report("conv/kernel", e_k), report("conv/bias", e_b)]
}

pub fn relu() -> OpReport {
    let mut errs = Vec::new();
    for case in 0..CASES as u64 {
        let mut r = rng(200 + case);
        let n = r.random_range(4..=40);
        let x: Vec<f64> = (0..n)
            .map(|_| loop {
                let v: f64 = r.random_range(-1.0..1.0);
                if v.abs() > GUARD_BAND {
                    break v;
                }
            })
            .collect();
        let weights = uniform_vec(&mut r, n, -1.0, 1.0);
        let g = relu_backward(&tensor(vec![n], &x), &tensor(vec![n], &weights)).unwrap();
        let coords: Vec<usize> = (0..n).collect();
        let mut f = |v: &[f64]| weighted_sum(&weights, relu_forward(&tensor(vec![n], v)).data());
        errs.push(max_grad_err(&mut f, &x, g.data(), &coords));
    }
    report("relu", errs)
}

/// Redraws until every 2x2 tile has a unique maximum by at least the
/// guard band.
fn separated_map(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    loop {
        let x = uniform_vec(r, h * w * c, -1.0, 1.0);
        let ok = (0..h / 2).all(|ty| {
            (0..w / 2).all(|tx| {
                (0..c).all(|ch| {
                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x[((2 * ty + dy) * w + 2 * tx + dx) * c + ch])
                        .collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    v[0] - v[1] > GUARD_BAND
                })
            })
        });
        if ok {
            return x;
        }
    }
}

pub fn maxpool() -> OpReport {
    let mut errs = Vec::new();
    for case in 0..CASES as u64 {
        let mut r = rng(300 + case);
        let (h, w, c) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3), r.random_range(1..=3));
        let x = separated_map(&mut r, h, w, c);
        let weights = uniform_vec(&mut r, h * w * c / 4, -1.0, 1.0);
        let input = tensor(vec![h, w, c], &x);
        let (_, argmax) = maxpool2_forward(&input).unwrap();
        let g = maxpool2_backward(&tensor(vec![h / 2, w / 2, c], &weights), &argmax, &[h, w, c]).unwrap();
        let coords: Vec<usize> = (0..x.len()).collect();
        let mut f = |v: &[f64]| {
            let (y, _) = maxpool2_forward(&tensor(vec![h, w, c], v)).unwrap();
            weighted_sum(&weights, y.data())
        };
        errs.push(max_grad_err(&mut f, &x, g.data(), &coords));
    }
    report("maxpool", errs)
}

pub fn lca() -> OpReport {
    let mut errs = Vec::new();
    for case in 0..CASES as u64 {
        let mut r = rng(400 + case);
        let (h, w, c) = (r.random_range(2..=7), r.random_range(2..=7), r.random_range(1..=4));
        let cfg = LcaConfig {
            include_1x1: case % 4 == 3,
            weighting: if case % 2 == 0 {
                Weighting::FlatOverWindows
            } else {
                Weighting::UniformPerSize
            },
        };
        let x = uniform_vec(&mut r, h * w * c, -1.0, 1.0);
        let weights = uniform_vec(&mut r, c, -1.0, 1.0);
        let g = lca_backward(&weights, h, w, &cfg).unwrap();
        let coords = sample_coords(&mut r, x.len(), 64);
        let mut f = |v: &[f64]| weighted_sum(&weights, &lca_forward(&tensor(vec![h, w, c], v), &cfg).unwrap());
        errs.push(max_grad_err(&mut f, &x, g.data(), &coords));
    }
    report("lca", errs)
}

pub fn l2_normalization() -> OpReport {
    let mut errs = Vec::new();
    for case in 0..CASES as u64 {
        let mut r = rng(500 + case);
        let n = r.random_range(2..=12);
        let x = uniform_vec(&mut r, n, -1.0, 1.0);
        let weights = uniform_vec(&mut r, n, -1.0, 1.0);
        let g = l2_normalize_backward(&x, &weights);
        let coords: Vec<usize> = (0..n).collect();
        let mut f = |v: &[f64]| weighted_sum(&weights, &l2_normalize(v));
        errs.push(max_grad_err(&mut f, &x, &g, &coords));
    }
    report("l2_normalize", errs)
}

pub fn contrastive_distance() -> OpReport {
    let mut errs = Vec::new();
    let mut case = 0u64;
    while errs.len() < CASES {
        let mut r = rng(600 + case);
        case += 1;
        let margin = r.random_range(0.5..1.5);
        let d: f64 = r.random_range(GUARD_BAND..2.0);
        let positive = case.is_multiple_of(2);
        if !positive && (d - margin).abs() < GUARD_BAND {
            continue;
        }
        let (_, analytic) = contrastive_loss(d, positive, margin);
        let mut f = |v: &[f64]| contrastive_loss(v[0], positive, margin).0;
        errs.push(max_grad_err(&mut f, &[d], &[analytic], &[0]));
    }
    report("contrastive/distance", errs)
}

pub fn contrastive_embeddings() -> OpReport {
    let mut errs = Vec::new();
    let mut case = 0u64;
    while errs.len() < CASES {
        let mut r = rng(700 + case);
        case += 1;
        let (n_pairs, dim) = (r.random_range(2..=4), r.random_range(2..=6));
        let margin = r.random_range(0.5..2.5);
        let emb: Vec<Vec<f64>> = (0..2 * n_pairs).map(|_| uniform_vec(&mut r, dim, -1.0, 1.0)).collect();
        let positives: Vec<(usize, usize)> = (0..n_pairs).map(|k| (2 * k, 2 * k + 1)).collect();
        let negatives: Vec<(usize, usize)> = (0..2 * n_pairs)
            .map(|i| {
                let other = (i / 2 + 1 + r.random_range(0..n_pairs - 1)) % n_pairs;
                (i, 2 * other + r.random_range(0..2))
            })
            .collect();
        let near_kink = negatives.iter().any(|&(a, b)| {
            let d = pair_distance(&emb[a], &emb[b]).unwrap();
            (d - margin).abs() < GUARD_BAND
        });
        if near_kink {
            continue;
        }
        let flat: Vec<f64> = emb.concat();
        let cb = contrastive_batch(&emb, &positives, &negatives, margin).unwrap();
        let analytic: Vec<f64> = cb.grads.concat();
        let coords: Vec<usize> = (0..flat.len()).collect();
        let mut f = |v: &[f64]| {
            let rows: Vec<Vec<f64>> = v.chunks(dim).map(<[f64]>::to_vec).collect();
            contrastive_batch(&rows, &positives, &negatives, margin).unwrap().loss
        };
        errs.push(max_grad_err(&mut f, &flat, &analytic, &coords));
    }
    report("contrastive/embeddings", errs)
}

pub fn smooth_l1_loss() -> OpReport {
    let mut errs = Vec::new();
    let mut case = 0u64;
    while errs.len() < CASES {
        let mut r = rng(800 + case);
        case += 1;
        let n = r.random_range(1..=8);
        let beta = r.random_range(0.2..2.0);
        let pred = uniform_vec(&mut r, n, -3.0, 3.0);
        let target = uniform_vec(&mut r, n, -3.0, 3.0);
        if pred.iter().zip(&target).any(|(p, t)| ((p - t).abs() - beta).abs() < GUARD_BAND) {
            continue;
        }
        let (_, g) = smooth_l1(&pred, &target, beta).unwrap();
        let coords: Vec<usize> = (0..n).collect();
        let mut f = |v: &[f64]| smooth_l1(v, &target, beta).unwrap().0;
        errs.push(max_grad_err(&mut f, &pred, &g, &coords));
    }
    report("smooth_l1", errs)
}

pub fn logistic_regression() -> Vec<OpReport> {
    let (mut e_w, mut e_b) = (Vec::new(), Vec::new());
    for case in 0..CASES as u64 {
        let mut r = rng(900 + case);
        let (n, d, k) = (r.random_range(3..=10), r.random_range(1..=5), r.random_range(2..=4));
        let x: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut r, d, -2.0, 2.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let w = uniform_vec(&mut r, k * d, -1.0, 1.0);
        let b = uniform_vec(&mut r, k, -1.0, 1.0);
        let l2 = r.random_range(0.0..0.1);
        let (_, gw, gb) = logreg_objective(&w, &b, &x, &y, l2);
        let cw: Vec<usize> = (0..w.len()).collect();
        e_w.push(max_grad_err(&mut |v| logreg_loss(v, &b, &x, &y, l2), &w, &gw, &cw));
        let cb: Vec<usize> = (0..k).collect();
        e_b.push(max_grad_err(&mut |v| logreg_loss(&w, v, &x, &y, l2), &b, &gb, &cb));
    }
    vec![report("logreg/weights", e_w), report("logreg/bias", e_b)]
}

/// Whole embedding chain (conv, ReLU, max-pool, LCA, normalization) with
/// respect to every parameter. Coordinates whose perturbation crosses a
/// ReLU or max-pool kink are detected by disagreement between two step
/// sizes and skipped; at least half of the sampled coordinates must remain.
pub fn embedding_chain() -> OpReport {
    let mut errs = Vec::new();
    for case in 0..CASES as u64 {
        let mut r = rng(1000 + case);
        let cfg = BackboneConfig {
            input_size: 8,
            block_channels: vec![3, 4],
        };
        let mut backbone: Backbone<f64> = Backbone::init(cfg, case).unwrap().cast();
        for layer in &mut backbone.layers {
            for v in layer.bias.data_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
        let lca = LcaConfig {
            include_1x1: false,
            weighting: if case % 2 == 0 {
                Weighting::FlatOverWindows
            } else {
                Weighting::UniformPerSize
            },
        };
        let image = tensor(vec![8, 8, 3], &uniform_vec(&mut r, 8 * 8 * 3, 0.0, 1.0));
        let ckpt = Checkpoint { backbone, lca };
        let weights = uniform_vec(&mut r, 4, -1.0, 1.0);

        let flatten = |c: &Checkpoint<f64>| -> Vec<f64> {
            c.backbone
                .layers
                .iter()
                .flat_map(|l| l.kernel.data().iter().chain(l.bias.data()).copied())
                .collect()
        };
        let unflatten = |v: &[f64]| -> Checkpoint<f64> {
            let mut c = ckpt.clone();
            let mut at = 0;
            for l in &mut c.backbone.layers {
                for slot in l.kernel.data_mut().iter_mut().chain(l.bias.data_mut()) {
                    *slot = v[at];
                    at += 1;
                }
            }
            c
        };
        let params = flatten(&ckpt);
        let (_, trace) = ckpt.embed_traced(&image).unwrap();
        let grads = ckpt.embed_backward(&trace, &weights).unwrap();
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|l| l.kernel.data().iter().chain(l.bias.data()).copied())
            .collect();
        let mut f = |v: &[f64]| weighted_sum(&weights, &unflatten(v).embed(&image).unwrap());
        let coords = sample_coords(&mut r, params.len(), 40);
        let coarse = numeric_grad(&mut f, &params, &coords);
        let fine = numeric_grad_with_step(&mut f, &params, &coords, FD_STEP / 2.0);
        let smooth: Vec<usize> = coords
            .iter()
            .zip(coarse.iter().zip(&fine))
            .filter(|(_, (a, b))| rel_err(**a, **b) < 1e-8)
            .map(|(&i, _)| i)
            .collect();
        assert!(smooth.len() * 2 >= coords.len(), "too many kinked coordinates in case {case}");
        errs.push(max_grad_err(&mut f, &params, &analytic, &smooth));
    }
    report("embedding chain", errs)
}

pub fn all() -> Vec<OpReport> {
    let mut out = conv();
    out.push(relu());
    out.push(maxpool());
    out.push(lca());
    out.push(l2_normalization());
    out.push(contrastive_distance());
    out.push(contrastive_embeddings());
    out.push(smooth_l1_loss());
    out.extend(logistic_regression());
    out.push(embedding_chain());
    out
}

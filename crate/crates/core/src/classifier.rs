//! Multinomial logistic regression on frozen embeddings.
//!
//! Fit by full-batch gradient descent with Armijo backtracking from zero
//! weights, so results depend only on the data.

use std::path::Path;

use crate::ckpt::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 500,
            tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub loss_history: Vec<f64>,
    pub final_grad_inf_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    dim: usize,
    /// Row-major `K x D`.
    weights: Vec<f32>,
    biases: Vec<f32>,
    /// External label of each class row.
    class_labels: Vec<i64>,
    l2: f64,
}

/// Softmax with max-logit subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}

fn logits_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * d..(k + 1) * d];
        *o = b[k] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Mean cross-entropy plus `(l2 / 2) * ||W||^2`.
pub fn logreg_loss(w: &[f64], b: &[f64], x: &[Vec<f64>], y: &[usize], l2: f64) -> f64 {
    let k = b.len();
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        logits_into(w, b, xi, &mut logits);
        total -= log_softmax_at(&logits, yi);
    }
    total / x.len() as f64 + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Objective value with its gradients `(loss, dW, db)`.
pub fn logreg_objective(
    w: &[f64],
    b: &[f64],
    x: &[Vec<f64>],
    y: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let k = b.len();
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| l2 * v).collect();
    let mut gb = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        logits_into(w, b, xi, &mut logits);
        total -= log_softmax_at(&logits, yi);
        let mut p = softmax(&logits);
        p[yi] -= 1.0;
        for (c, &pc) in p.iter().enumerate() {
            let coef = pc / n;
            gb[c] += coef;
            for (g, &v) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                *g += coef * v;
            }
        }
    }
    let loss = total / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, gw, gb)
}

fn to_f64_rows(embeddings: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let d = embeddings.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::invalid("embeddings must be nonempty"));
    }
    embeddings
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != d {
                return Err(Error::invalid(format!("row {i} has dim {}, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::dataset(format!("embedding row {i} is not finite")));
            }
            Ok(row.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

/// Fits a `n_classes`-way model; labels are class indices in `[0, n_classes)`.
pub fn fit_logreg(
    embeddings: &[Vec<f32>],
    labels: &[usize],
    n_classes: usize,
    cfg: &FitConfig,
) -> Result<(LogRegModel, FitReport)> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if n_classes < 2 || embeddings.len() < n_classes {
        return Err(Error::invalid(format!(
            "need N >= K >= 2, got N = {}, K = {n_classes}",
            embeddings.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {n_classes})")));
    }
    if !(cfg.l2 >= 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::invalid("l2 must be >= 0 and tol > 0"));
    }
    let x = to_f64_rows(embeddings)?;
    let d = x[0].len();
    let mut w = vec![0.0f64; n_classes * d];
    let mut b = vec![0.0f64; n_classes];
    let mut step = 1.0f64;
    let mut report = FitReport::default();
    let (mut loss, mut gw, mut gb) = logreg_objective(&w, &b, &x, labels, cfg.l2);
    report.loss_history.push(loss);
    loop {
        let inf_norm = gw.iter().chain(&gb).fold(0.0f64, |m, g| m.max(g.abs()));
        report.final_grad_inf_norm = inf_norm;
        if inf_norm < cfg.tol {
            report.converged = true;
            break;
        }
        if report.iterations >= cfg.max_iters {
            break;
        }
        let sq: f64 = gw.iter().chain(&gb).map(|g| g * g).sum();
        let mut accepted = None;
        for _ in 0..60 {
            let w_try: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let b_try: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
            let l_try = logreg_loss(&w_try, &b_try, &x, labels, cfg.l2);
            if l_try <= loss - 1e-4 * step * sq {
                accepted = Some((w_try, b_try));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, b_new)) = accepted else {
            // no representable descent step left
            report.converged = true;
            break;
        };
        w = w_new;
        b = b_new;
        let (l_new, gw_new, gb_new) = logreg_objective(&w, &b, &x, labels, cfg.l2);
        assert!(l_new <= loss, "line search accepted an increasing step");
        loss = l_new;
        gw = gw_new;
        gb = gb_new;
        report.loss_history.push(loss);
        report.iterations += 1;
        step *= 2.0;
    }
    let model = LogRegModel {
        dim: d,
        weights: w.iter().map(|&v| v as f32).collect(),
        biases: b.iter().map(|&v| v as f32).collect(),
        class_labels: (0..n_classes as i64).collect(),
        l2: cfg.l2,
    };
    Ok((model, report))
}

/// Fits on arbitrary integer labels; class rows are the sorted distinct
/// labels.
pub fn fit_labeled(
    embeddings: &[Vec<f32>],
    labels: &[i64],
    cfg: &FitConfig,
) -> Result<(LogRegModel, FitReport)> {
    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let (mut model, report) = fit_logreg(embeddings, &idx, classes.len(), cfg)?;
    model.class_labels = classes;
    Ok((model, report))
}

impl LogRegModel {
    /// A model with explicit parameters (`weights` row-major `K x D`).
    pub fn from_parts(
        weights: Vec<f32>,
        biases: Vec<f32>,
        class_labels: Vec<i64>,
        l2: f64,
    ) -> Result<Self> {
        let k = biases.len();
        if k < 2 || class_labels.len() != k || weights.is_empty() || !weights.len().is_multiple_of(k) {
            return Err(Error::invalid("inconsistent logistic regression parameters"));
        }
        Ok(Self {
            dim: weights.len() / k,
            weights,
            biases,
            class_labels,
            l2,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_labels(&self) -> &[i64] {
        &self.class_labels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    /// Class-row probabilities `softmax(W x + b)`.
    pub fn probabilities(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding dim {} does not match model dim {}",
                embedding.len(),
                self.dim
            )));
        }
        let logits: Vec<f64> = (0..self.n_classes())
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.biases[k] as f64
                    + row
                        .iter()
                        .zip(embedding)
                        .map(|(&a, &v)| a as f64 * v as f64)
                        .sum::<f64>()
            })
            .collect();
        Ok(softmax(&logits))
    }

    /// Predicted external label (lowest class row wins ties) and the
    /// probability vector over class rows.
    pub fn predict(&self, embedding: &[f32]) -> Result<(i64, Vec<f64>)> {
        let p = self.probabilities(embedding)?;
        let mut best = 0;
        for (k, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = k;
            }
        }
        Ok((self.class_labels[best], p))
    }

    pub fn evaluate(&self, embeddings: &[Vec<f32>], labels: &[i64]) -> Result<f64> {
        if embeddings.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty set"));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let mut correct = 0usize;
        for (e, &l) in embeddings.iter().zip(labels) {
            if self.predict(e)?.0 == l {
                correct += 1;
            }
        }
        Ok(correct as f64 / embeddings.len() as f64)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(
            "W",
            Tensor::new(vec![self.n_classes(), self.dim], self.weights.clone())?,
        )?;
        c.push("b", Tensor::new(vec![self.n_classes()], self.biases.clone())?)?;
        let labels: String = self.class_labels.iter().map(|l| format!("{l}\n")).collect();
        c.push_text("labels", &labels)?;
        c.push_text("config", &format!("l2 = {:?}\n", self.l2))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let w = c.require("W")?;
        let b = c.require("b")?;
        let &[k, _] = w.dims() else {
            return Err(Error::format(0, "entry \"W\" must be rank 2"));
        };
        if b.dims() != [k] {
            return Err(Error::format(0, "entry \"b\" does not match \"W\""));
        }
        let labels = c
            .text("labels")?
            .lines()
            .map(|l| {
                l.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::format(0, format!("bad class label {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != k {
            return Err(Error::format(0, format!("{} labels for {k} classes", labels.len())));
        }
        let l2 = c
            .get("config")
            .map(|_| c.text("config"))
            .transpose()?
            .and_then(|t| {
                t.lines()
                    .find_map(|l| l.strip_prefix("l2 = ").and_then(|v| v.trim().parse().ok()))
            })
            .unwrap_or(0.0);
        Self::from_parts(w.data().to_vec(), b.data().to_vec(), labels, l2)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

//! Two-stage representation learning.
//!
//! 1. A teacher is trained on image pairs with the contrastive loss and
//!    in-batch hard negatives.
//! 2. The teacher embeds clean unlabeled images; those embeddings become
//!    pseudolabels.
//! 3. A freshly initialized student is trained on batches that mix
//!    supervised pairs (contrastive) with augmented unlabeled images
//!    regressed onto their pseudolabels (Smooth L1).
//!
//! Optimization is SGD with momentum. Per-image forward/backward passes may
//! run on a rayon pool, but gradients are always reduced in batch order, so
//! results do not depend on the thread count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentSwitches};
use crate::backbone::{Backbone, BackboneConfig, Checkpoint, EmbedTrace, Gradients};
use crate::dataio::Manifest;
use crate::error::{Error, Result};
use crate::lca::LcaConfig;
use crate::losses::{
    contrastive_batch, mine_hard_negatives, pair_distance, random_negatives, smooth_l1, LossConfig,
};
use crate::store::PseudolabelStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    /// Closest other-pair member in the batch.
    #[default]
    Hard,
    /// Uniformly random other-pair member (ablation).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Fraction of each student batch taken from the pseudolabel store.
    pub pseudo_fraction: f64,
    pub augment: AugmentSwitches,
    pub negatives: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            pseudo_fraction: 0.5,
            augment: AugmentSwitches::all(),
            negatives: NegativeMode::Hard,
        }
    }
}

/// Slot counts of one student batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentSlots {
    pub pairs: usize,
    pub pseudo: usize,
}

impl TrainConfig {
    fn validate_common(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 4, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn validate_teacher(&self) -> Result<()> {
        self.validate_common()
    }

    /// Checks `rho in (0, 1)` and that both sub-batches have whole slots
    /// (the supervised part holds complete pairs).
    pub fn student_slots(&self) -> Result<StudentSlots> {
        self.validate_common()?;
        let rho = self.pseudo_fraction;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!("pseudo_fraction must be in (0, 1), got {rho}")));
        }
        let pseudo = rho * self.batch_size as f64;
        if (pseudo - pseudo.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "batch_size * pseudo_fraction = {pseudo} is not an integer"
            )));
        }
        let pseudo = pseudo.round() as usize;
        let supervised = self.batch_size - pseudo;
        if !supervised.is_multiple_of(2) || supervised < 4 {
            return Err(Error::Config(format!(
                "supervised sub-batch of {supervised} images must hold at least two whole pairs"
            )));
        }
        Ok(StudentSlots {
            pairs: supervised / 2,
            pseudo,
        })
    }
}

/// Architecture of a model to be trained from scratch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub lca: LcaConfig,
}

/// Image pairs loaded into memory.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub images: Vec<Tensor>,
    /// `(pair_id, first image, second image)`.
    pub pairs: Vec<(i64, usize, usize)>,
}

impl PairSet {
    pub fn from_manifest(manifest: &Manifest, side: usize) -> Result<Self> {
        let pairs = manifest.pairs()?;
        if pairs.len() < 2 {
            return Err(Error::dataset(format!(
                "need at least 2 pairs, manifest has {}",
                pairs.len()
            )));
        }
        Ok(Self {
            images: manifest.load_images(side)?,
            pairs,
        })
    }

    pub fn load(path: &Path, side: usize) -> Result<Self> {
        Self::from_manifest(&Manifest::load(path)?, side)
    }
}

/// Unlabeled images with their pseudolabels, in store order.
#[derive(Clone, Debug)]
pub struct PseudoSet {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub targets: Vec<Vec<f32>>,
}

impl PseudoSet {
    pub fn from_store(store: &PseudolabelStore, manifest: &Manifest, side: usize) -> Result<Self> {
        let by_id: std::collections::HashMap<&str, usize> = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let subset = Manifest {
            root: manifest.root.clone(),
            records: store
                .ids()
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|&i| manifest.records[i].clone())
                        .ok_or_else(|| Error::dataset(format!("no image for pseudolabel {id:?}")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            ids: store.ids().to_vec(),
            images: subset.load_images(side)?,
            targets: store.iter().map(|(_, v)| v.to_vec()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_pos_dist: f64,
    pub mean_neg_dist: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

pub fn write_metrics_jsonl(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for m in history {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct Sgd {
    learning_rate: f32,
    momentum: f32,
    velocity: Gradients<f32>,
}

impl Sgd {
    fn new(model: &Backbone, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate as f32,
            momentum: cfg.momentum as f32,
            velocity: Gradients::zeros_like(model),
        }
    }

    /// `v = mu * v + g; p -= lr * v`
    fn step(&mut self, model: &mut Backbone, grads: &Gradients<f32>) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, vel), g) in model.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers) {
            Self::update(lr, mu, &mut layer.kernel, &mut vel.kernel, &g.kernel);
            Self::update(lr, mu, &mut layer.bias, &mut vel.bias, &g.bias);
        }
    }

    fn update(lr: f32, mu: f32, param: &mut Tensor, velocity: &mut Tensor, grad: &Tensor) {
        for ((p, v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Forward passes for a batch of images, in order.
fn embed_batch_traced(
    model: &Checkpoint,
    images: &[Tensor],
) -> Result<(Vec<Vec<f32>>, Vec<EmbedTrace>)> {
    let results: Vec<_> = images
        .par_iter()
        .map(|img| model.embed_traced(img))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

/// Backpropagates per-image embedding gradients and sums them in batch order.
fn accumulate_grads(
    model: &Checkpoint,
    traces: &[EmbedTrace],
    grads: &[Vec<f64>],
) -> Result<Gradients<f32>> {
    let per_image: Vec<Gradients<f32>> = traces
        .par_iter()
        .zip(grads.par_iter())
        .map(|(trace, g)| {
            let g32: Vec<f32> = g.iter().map(|&v| v as f32).collect();
            model.embed_backward(trace, &g32)
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(&model.backbone);
    for g in &per_image {
        total.add_assign(g);
    }
    Ok(total)
}

fn maybe_augment(img: &Tensor, switches: &AugmentSwitches, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if switches.any() {
        augment(img, switches, rng)
    } else {
        Ok(img.clone())
    }
}

/// Augmented images and per-image pair ids for a set of pairs; pair members
/// sit next to each other (`2k`, `2k + 1`).
fn pair_batch(
    pairs: &PairSet,
    chosen: &[usize],
    switches: &AugmentSwitches,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<i64>)> {
    let mut images = Vec::with_capacity(2 * chosen.len());
    let mut ids = Vec::with_capacity(2 * chosen.len());
    for &p in chosen {
        let (pid, a, b) = pairs.pairs[p];
        images.push(maybe_augment(&pairs.images[a], switches, rng)?);
        images.push(maybe_augment(&pairs.images[b], switches, rng)?);
        ids.extend([pid, pid]);
    }
    Ok((images, ids))
}

struct SupervisedTerm {
    loss: f64,
    grads: Vec<Vec<f64>>,
    mean_pos_dist: f64,
    mean_neg_dist: f64,
}

fn supervised_term(
    embeddings: &[Vec<f32>],
    pair_ids: &[i64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SupervisedTerm> {
    let positives: Vec<(usize, usize)> = (0..embeddings.len() / 2).map(|k| (2 * k, 2 * k + 1)).collect();
    let negatives = match cfg.negatives {
        NegativeMode::Hard => mine_hard_negatives(embeddings, pair_ids)?,
        NegativeMode::Random => random_negatives(pair_ids, rng)?,
    };
    let cb = contrastive_batch(embeddings, &positives, &negatives, cfg.loss.margin)?;
    Ok(SupervisedTerm {
        loss: cb.loss,
        grads: cb.grads,
        mean_pos_dist: cb.mean_pos_dist,
        mean_neg_dist: cb.mean_neg_dist,
    })
}

/// Splits `0..n` into shuffled chunks of `size`; a trailing chunk smaller
/// than `min` is merged into the previous one.
fn shuffled_chunks(n: usize, size: usize, min: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < min) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_finite(loss: f64, grads: &Gradients<f32>, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Training(format!(
            "non-finite loss or gradient at epoch {epoch}, step {step} (loss = {loss})"
        )));
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    loss: f64,
    pos: f64,
    neg: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, loss: f64, pos: f64, neg: f64) {
        self.loss += loss;
        self.pos += pos;
        self.neg += neg;
        self.steps += 1;
    }

    fn finish(&self, epoch: usize, started: Instant) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        EpochMetrics {
            epoch,
            mean_loss: self.loss / n,
            mean_pos_dist: self.pos / n,
            mean_neg_dist: self.neg / n,
            wall_ms: started.elapsed().as_millis() as u64,
        }
    }
}

/// Contrastive training on pairs from a seeded initialization.
pub fn train_teacher(pairs: &PairSet, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate_teacher()?;
    if pairs.pairs.len() < 2 {
        return Err(Error::dataset("teacher training needs at least 2 pairs"));
    }
    let mut ckpt = Checkpoint::init(model.backbone.clone(), model.lca, cfg.seed)?;
    let mut opt = Sgd::new(&ckpt.backbone, cfg);
    let mut rng = data_rng(cfg.seed);
    let pairs_per_batch = cfg.batch_size / 2;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut acc = EpochAccumulator::default();
        for (step, chosen) in shuffled_chunks(pairs.pairs.len(), pairs_per_batch, 2, &mut rng)
            .into_iter()
            .enumerate()
        {
            let (images, ids) = pair_batch(pairs, &chosen, &cfg.augment, &mut rng)?;
            let (emb, traces) = embed_batch_traced(&ckpt, &images)?;
            let term = supervised_term(&emb, &ids, cfg, &mut rng)?;
            let grads = accumulate_grads(&ckpt, &traces, &term.grads)?;
            check_finite(term.loss, &grads, epoch, step)?;
            opt.step(&mut ckpt.backbone, &grads);
            acc.add(term.loss, term.mean_pos_dist, term.mean_neg_dist);
        }
        let m = acc.finish(epoch, started);
        log::info!(
            "teacher epoch {epoch}: loss {:.5} pos {:.4} neg {:.4} ({} ms)",
            m.mean_loss,
            m.mean_pos_dist,
            m.mean_neg_dist,
            m.wall_ms
        );
        history.push(m);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history,
    })
}

/// Embeds images in parallel; output order follows input order.
pub fn embed_all(ckpt: &Checkpoint, images: &[Tensor]) -> Result<Vec<Vec<f32>>> {
    images.par_iter().map(|img| ckpt.embed(img)).collect()
}

/// Teacher embeddings of clean images, keyed by manifest id.
pub fn generate_pseudolabels(ckpt: &Checkpoint, images: &Manifest) -> Result<PseudolabelStore> {
    let loaded = images.load_images(ckpt.backbone.config().input_size)?;
    let vectors = embed_all(ckpt, &loaded)?;
    let mut store = PseudolabelStore::new();
    for (rec, v) in images.records.iter().zip(vectors) {
        store.insert(rec.id.clone(), v)?;
    }
    Ok(store)
}

/// One mixed student batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBatch {
    /// Supervised images; pair members at `2k`, `2k + 1`.
    pub pair_images: Vec<Tensor>,
    pub pair_ids: Vec<i64>,
    /// Augmented unlabeled images with the pseudolabel of their clean view.
    pub pseudo_images: Vec<Tensor>,
    pub pseudo_targets: Vec<Vec<f32>>,
    pub pseudo_ids: Vec<String>,
}

/// Samples student batches: pseudolabel couples without replacement within
/// an epoch, pairs from a cursor that reshuffles when exhausted.
pub struct StudentBatcher<'a> {
    pairs: &'a PairSet,
    pseudo: &'a PseudoSet,
    slots: StudentSlots,
    switches: AugmentSwitches,
    pair_order: Vec<usize>,
    pair_pos: usize,
    pseudo_order: Vec<usize>,
    pseudo_pos: usize,
}

impl<'a> StudentBatcher<'a> {
    pub fn new(pairs: &'a PairSet, pseudo: &'a PseudoSet, cfg: &TrainConfig) -> Result<Self> {
        let slots = cfg.student_slots()?;
        if pseudo.images.len() < slots.pseudo {
            return Err(Error::dataset(format!(
                "pseudolabel store holds {} images, fewer than the {} pseudo slots per batch",
                pseudo.images.len(),
                slots.pseudo
            )));
        }
        if pairs.pairs.len() < 2 {
            return Err(Error::dataset("student training needs at least 2 pairs"));
        }
        Ok(Self {
            pairs,
            pseudo,
            slots: StudentSlots {
                pairs: slots.pairs.min(pairs.pairs.len()),
                pseudo: slots.pseudo,
            },
            switches: cfg.augment,
            pair_order: Vec::new(),
            pair_pos: 0,
            pseudo_order: Vec::new(),
            pseudo_pos: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pseudo.images.len() / self.slots.pseudo
    }

    /// Reshuffles the pseudolabel order for a new epoch.
    pub fn start_epoch(&mut self, rng: &mut ChaCha8Rng) {
        self.pseudo_order = (0..self.pseudo.images.len()).collect();
        self.pseudo_order.shuffle(rng);
        self.pseudo_pos = 0;
    }

    pub fn compose(&mut self, rng: &mut ChaCha8Rng) -> Result<StudentBatch> {
        if self.pseudo_pos + self.slots.pseudo > self.pseudo_order.len() {
            self.start_epoch(rng);
        }
        if self.pair_pos + self.slots.pairs > self.pair_order.len() {
            self.pair_order = (0..self.pairs.pairs.len()).collect();
            self.pair_order.shuffle(rng);
            self.pair_pos = 0;
        }
        let chosen = self.pair_order[self.pair_pos..self.pair_pos + self.slots.pairs].to_vec();
        self.pair_pos += self.slots.pairs;
        let (pair_images, pair_ids) = pair_batch(self.pairs, &chosen, &self.switches, rng)?;

        let picks = &self.pseudo_order[self.pseudo_pos..self.pseudo_pos + self.slots.pseudo];
        self.pseudo_pos += self.slots.pseudo;
        let mut pseudo_images = Vec::with_capacity(picks.len());
        for &i in picks {
            pseudo_images.push(maybe_augment(&self.pseudo.images[i], &self.switches, rng)?);
        }
        Ok(StudentBatch {
            pair_images,
            pair_ids,
            pseudo_images,
            pseudo_targets: picks.iter().map(|&i| self.pseudo.targets[i].clone()).collect(),
            pseudo_ids: picks.iter().map(|&i| self.pseudo.ids[i].clone()).collect(),
        })
    }
}

/// Draws one student batch from a fresh sampler seeded with `seed`.
pub fn compose_student_batch(
    pairs: &PairSet,
    pseudo: &PseudoSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StudentBatch> {
    let mut batcher = StudentBatcher::new(pairs, pseudo, cfg)?;
    let mut rng = data_rng(seed);
    batcher.start_epoch(&mut rng);
    batcher.compose(&mut rng)
}

/// Multitask training of a fresh model: `lambda * contrastive + (1 - lambda)
/// * smooth_l1(student(augmented), pseudolabel)`.
pub fn train_student(
    pairs: &PairSet,
    pseudo: &PseudoSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut batcher = StudentBatcher::new(pairs, pseudo, cfg)?;
    let lambda = cfg.loss.lambda;
    let mut ckpt = Checkpoint::init(model.backbone.clone(), model.lca, cfg.seed)?;
    if let Some(t) = pseudo.targets.first() {
        if t.len() != ckpt.backbone.config().embedding_dim() {
            return Err(Error::dataset(format!(
                "pseudolabels have dim {}, student embeds to {}",
                t.len(),
                ckpt.backbone.config().embedding_dim()
            )));
        }
    }
    let mut opt = Sgd::new(&ckpt.backbone, cfg);
    let mut rng = data_rng(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut acc = EpochAccumulator::default();
        batcher.start_epoch(&mut rng);
        for step in 0..batcher.steps_per_epoch() {
            let batch = batcher.compose(&mut rng)?;
            let n_sup = batch.pair_images.len();
            let mut images = batch.pair_images;
            images.extend(batch.pseudo_images);
            let (emb, traces) = embed_batch_traced(&ckpt, &images)?;

            let sup = supervised_term(&emb[..n_sup], &batch.pair_ids, cfg, &mut rng)?;
            let n_pseudo = batch.pseudo_targets.len() as f64;
            let mut pseudo_loss = 0.0;
            let mut grads: Vec<Vec<f64>> = sup
                .grads
                .into_iter()
                .map(|g| g.into_iter().map(|v| lambda * v).collect())
                .collect();
            for (e, t) in emb[n_sup..].iter().zip(&batch.pseudo_targets) {
                let (l, g) = smooth_l1(e, t, cfg.loss.smooth_l1_beta)?;
                pseudo_loss += l / n_pseudo;
                grads.push(g.into_iter().map(|v| (1.0 - lambda) * v / n_pseudo).collect());
            }
            let loss = crate::losses::multitask_loss(sup.loss, pseudo_loss, lambda);
            let total = accumulate_grads(&ckpt, &traces, &grads)?;
            check_finite(loss, &total, epoch, step)?;
            opt.step(&mut ckpt.backbone, &total);
            acc.add(loss, sup.mean_pos_dist, sup.mean_neg_dist);
        }
        let m = acc.finish(epoch, started);
        log::info!(
            "student epoch {epoch}: loss {:.5} pos {:.4} neg {:.4} ({} ms)",
            m.mean_loss,
            m.mean_pos_dist,
            m.mean_neg_dist,
            m.wall_ms
        );
        history.push(m);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        history,
    })
}

/// Mean Smooth L1 between a model's clean-image embeddings and targets.
pub fn mean_smooth_l1(ckpt: &Checkpoint, images: &[Tensor], targets: &[Vec<f32>], beta: f64) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::invalid("need matching, nonempty images and targets"));
    }
    let emb = embed_all(ckpt, images)?;
    let mut total = 0.0;
    for (e, t) in emb.iter().zip(targets) {
        total += smooth_l1(e, t, beta)?.0;
    }
    Ok(total / images.len() as f64)
}

/// Mean positive-pair distance and mean hard-negative distance over a whole
/// pair set (negatives mined across the full set, clean images).
pub fn pair_separation(ckpt: &Checkpoint, pairs: &PairSet) -> Result<(f64, f64)> {
    let emb = embed_all(ckpt, &pairs.images)?;
    let mut ids = vec![i64::MIN; pairs.images.len()];
    let mut pos = 0.0;
    for &(pid, a, b) in &pairs.pairs {
        ids[a] = pid;
        ids[b] = pid;
        pos += pair_distance(&emb[a], &emb[b])?;
    }
    let members: Vec<usize> = (0..emb.len()).filter(|&i| ids[i] != i64::MIN).collect();
    let sub_emb: Vec<Vec<f32>> = members.iter().map(|&i| emb[i].clone()).collect();
    let sub_ids: Vec<i64> = members.iter().map(|&i| ids[i]).collect();
    let mut neg = 0.0;
    let negatives = mine_hard_negatives(&sub_emb, &sub_ids)?;
    for &(a, n) in &negatives {
        neg += pair_distance(&sub_emb[a], &sub_emb[n])?;
    }
    Ok((pos / pairs.pairs.len() as f64, neg / negatives.len() as f64))
}

//! Linear-probe evaluation of frozen features.

use std::time::Instant;

use serde::Serialize;

use crate::backbone::Checkpoint;
use crate::classifier::{fit_labeled, FitConfig};
use crate::dataio::Manifest;
use crate::error::{Error, Result};
use crate::pipeline::{
    embed_all, generate_pseudolabels, mean_smooth_l1, pair_separation, train_student, train_teacher, ModelConfig,
    PairSet, PseudoSet, TrainConfig,
};
use crate::synthetic::SyntheticCorpus;
use crate::tensor::Tensor;

/// Flattened pixel values, the no-learning baseline.
pub fn raw_pixel_features(images: &[Tensor]) -> Vec<Vec<f32>> {
    images.iter().map(|img| img.data().to_vec()).collect()
}

/// Fits logistic regression on the training features and returns accuracy
/// on the test features.
pub fn probe_accuracy(
    train: &[Vec<f32>],
    train_labels: &[i64],
    test: &[Vec<f32>],
    test_labels: &[i64],
    cfg: &FitConfig,
) -> Result<f64> {
    let (model, _) = fit_labeled(train, train_labels, cfg)?;
    model.evaluate(test, test_labels)
}

/// Outcome of the end-to-end synthetic benchmark.
#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub raw_pixel_accuracy: f64,
    pub random_init_accuracy: f64,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub heldout_smooth_l1_init: f64,
    pub heldout_smooth_l1_student: f64,
    pub heldout_pos_dist: f64,
    pub heldout_neg_dist: f64,
    pub teacher_first_epoch_loss: f64,
    pub teacher_last_epoch_loss: f64,
    pub wall_secs: f64,
}

struct ProbeData {
    train: Vec<Tensor>,
    train_labels: Vec<i64>,
    test: Vec<Tensor>,
    test_labels: Vec<i64>,
}

fn labels(m: &Manifest) -> Result<Vec<i64>> {
    m.records
        .iter()
        .map(|r| {
            r.class_id
                .ok_or_else(|| Error::dataset(format!("probe image {:?} has no class_id", r.id)))
        })
        .collect()
}

impl ProbeData {
    fn load(corpus: &SyntheticCorpus, side: usize) -> Result<Self> {
        let train = Manifest::load(&corpus.probe_train)?;
        let test = Manifest::load(&corpus.probe_test)?;
        Ok(Self {
            train: train.load_images(side)?,
            train_labels: labels(&train)?,
            test: test.load_images(side)?,
            test_labels: labels(&test)?,
        })
    }

    fn accuracy_with(&self, ckpt: &Checkpoint, fit: &FitConfig) -> Result<f64> {
        probe_accuracy(
            &embed_all(ckpt, &self.train)?,
            &self.train_labels,
            &embed_all(ckpt, &self.test)?,
            &self.test_labels,
            fit,
        )
    }
}

/// Teacher, pseudolabels, student and linear probes on a generated corpus.
///
/// The random-init baseline and the student share the initialization seed
/// `cfg.seed`, so both start from the same weights as the teacher.
pub fn run_benchmark(
    corpus: &SyntheticCorpus,
    model: &ModelConfig,
    teacher_cfg: &TrainConfig,
    student_cfg: &TrainConfig,
    fit: &FitConfig,
) -> Result<BenchmarkReport> {
    let started = Instant::now();
    let side = model.backbone.input_size;
    let probe = ProbeData::load(corpus, side)?;

    let raw_pixel_accuracy = probe_accuracy(
        &raw_pixel_features(&probe.train),
        &probe.train_labels,
        &raw_pixel_features(&probe.test),
        &probe.test_labels,
        fit,
    )?;
    let init = Checkpoint::init(model.backbone.clone(), model.lca, teacher_cfg.seed)?;
    let random_init_accuracy = probe.accuracy_with(&init, fit)?;

    let pairs = PairSet::load(&corpus.pairs, side)?;
    let teacher = train_teacher(&pairs, model, teacher_cfg)?;
    let teacher_accuracy = probe.accuracy_with(&teacher.checkpoint, fit)?;
    let heldout = PairSet::load(&corpus.heldout_pairs, side)?;
    let (heldout_pos_dist, heldout_neg_dist) = pair_separation(&teacher.checkpoint, &heldout)?;

    let unlabeled = Manifest::load(&corpus.unlabeled)?;
    let store = generate_pseudolabels(&teacher.checkpoint, &unlabeled)?;
    let pseudo = PseudoSet::from_store(&store, &unlabeled, side)?;
    let student = train_student(&pairs, &pseudo, model, student_cfg)?;
    let student_accuracy = probe.accuracy_with(&student.checkpoint, fit)?;

    let holdout = Manifest::load(&corpus.unlabeled_holdout)?;
    let holdout_images = holdout.load_images(side)?;
    let targets = embed_all(&teacher.checkpoint, &holdout_images)?;
    let beta = student_cfg.loss.smooth_l1_beta;
    let student_init = Checkpoint::init(model.backbone.clone(), model.lca, student_cfg.seed)?;
    let heldout_smooth_l1_init = mean_smooth_l1(&student_init, &holdout_images, &targets, beta)?;
    let heldout_smooth_l1_student = mean_smooth_l1(&student.checkpoint, &holdout_images, &targets, beta)?;

    let epoch_loss = |i: usize| teacher.history.get(i).map_or(f64::NAN, |m| m.mean_loss);
    Ok(BenchmarkReport {
        raw_pixel_accuracy,
        random_init_accuracy,
        teacher_accuracy,
        student_accuracy,
        heldout_smooth_l1_init,
        heldout_smooth_l1_student,
        heldout_pos_dist,
        heldout_neg_dist,
        teacher_first_epoch_loss: epoch_loss(0),
        teacher_last_epoch_loss: epoch_loss(teacher.history.len().saturating_sub(1)),
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

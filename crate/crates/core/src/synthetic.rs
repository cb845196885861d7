//! Procedural "product package" corpus.
//!
//! Every class is a deterministic render of layered rectangles, stripe
//! panels and disks in a class palette. Palettes are drawn from a small
//! shared ink set, so classes overlap in colour statistics and differ
//! mainly in layout. Individual images are the class
//! render passed through [`augment_with_probability`] with the distortion
//! level as the per-transform probability. Representation-learning, probe
//! and unlabeled classes are disjoint.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_with_probability, AugmentSwitches};
use crate::dataio::{write_manifest, write_ppm, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Representation-learning classes, emitted as pairs.
    pub n_classes: usize,
    /// Images per representation class; consecutive images form pairs.
    pub images_per_class: usize,
    pub side: usize,
    pub distortion: f64,
    pub seed: u64,
    pub probe_classes: usize,
    pub probe_test_per_class: usize,
    pub unlabeled_classes: usize,
    pub unlabeled_per_class: usize,
    /// Extra unlabeled images per unlabeled class kept out of training.
    pub holdout_per_class: usize,
    /// Classes emitted as pairs that no model trains on.
    pub heldout_pair_classes: usize,
    /// Size of the shared ink set class palettes are drawn from.
    pub ink_count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 40,
            images_per_class: 2,
            side: 64,
            distortion: 0.5,
            seed: 1,
            probe_classes: 20,
            probe_test_per_class: 10,
            unlabeled_classes: 40,
            unlabeled_per_class: 4,
            holdout_per_class: 1,
            heldout_pair_classes: 10,
            ink_count: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.images_per_class < 2 || !self.images_per_class.is_multiple_of(2) {
            return bad(format!(
                "images_per_class must be a positive even number, got {}",
                self.images_per_class
            ));
        }
        if self.side < 8 {
            return bad(format!("side must be >= 8, got {}", self.side));
        }
        if self.ink_count < PALETTE_SIZE {
            return bad(format!("ink_count must be >= {PALETTE_SIZE}, got {}", self.ink_count));
        }
        if !(0.0..=1.0).contains(&self.distortion) {
            return bad(format!("distortion must be in [0, 1], got {}", self.distortion));
        }
        Ok(())
    }

    fn total_classes(&self) -> usize {
        self.n_classes + self.probe_classes + self.unlabeled_classes + self.heldout_pair_classes
    }
}

/// Paths of everything [`gen_synthetic`] wrote.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub pairs: PathBuf,
    pub probe_train: PathBuf,
    pub probe_test: PathBuf,
    pub unlabeled: PathBuf,
    pub unlabeled_holdout: PathBuf,
    pub heldout_pairs: PathBuf,
}

const PALETTE_SIZE: usize = 4;

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Stripes { y0: f32, x0: f32, y1: f32, x1: f32, period: f32, angle: f32, alt: usize },
    Disk { cy: f32, cx: f32, r: f32 },
}

struct Layer {
    shape: Shape,
    color: usize,
}

struct Design {
    palette: [[f32; 3]; PALETTE_SIZE],
    background: usize,
    layers: Vec<Layer>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn random_design(rng: &mut ChaCha8Rng, inks: &[[f32; 3]]) -> Design {
    let mut palette = [[0.0; 3]; PALETTE_SIZE];
    let picks = rand::seq::index::sample(rng, inks.len(), PALETTE_SIZE);
    for (c, i) in palette.iter_mut().zip(picks.iter()) {
        *c = inks[i];
    }
    let n_layers = rng.random_range(3..=6);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let color = rng.random_range(0..PALETTE_SIZE);
        let mut span = || {
            let a: f32 = rng.random_range(0.0..0.8);
            let len: f32 = rng.random_range(0.2..(1.0 - a).max(0.21));
            (a, (a + len).min(1.0))
        };
        let (y0, y1) = span();
        let (x0, x1) = span();
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect { y0, x0, y1, x1 },
            1 => Shape::Stripes {
                y0,
                x0,
                y1,
                x1,
                period: rng.random_range(0.06..0.2),
                angle: rng.random_range(0.0..std::f32::consts::PI),
                alt: rng.random_range(0..PALETTE_SIZE),
            },
            _ => Shape::Disk {
                cy: rng.random_range(0.2..0.8),
                cx: rng.random_range(0.2..0.8),
                r: rng.random_range(0.08..0.3),
            },
        };
        layers.push(Layer { shape, color });
    }
    Design {
        palette,
        background: rng.random_range(0..PALETTE_SIZE),
        layers,
    }
}

fn render(design: &Design, side: usize) -> Tensor {
    let mut data = Vec::with_capacity(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            let y = (py as f32 + 0.5) / side as f32;
            let x = (px as f32 + 0.5) / side as f32;
            let mut color = design.background;
            for layer in &design.layers {
                match layer.shape {
                    Shape::Rect { y0, x0, y1, x1 } => {
                        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                            color = layer.color;
                        }
                    }
                    Shape::Stripes { y0, x0, y1, x1, period, angle, alt } => {
                        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                            let t = (x * angle.cos() + y * angle.sin()) / period;
                            color = if t.rem_euclid(1.0) < 0.5 { layer.color } else { alt };
                        }
                    }
                    Shape::Disk { cy, cx, r } => {
                        if (y - cy).powi(2) + (x - cx).powi(2) < r * r {
                            color = layer.color;
                        }
                    }
                }
            }
            data.extend_from_slice(&design.palette[color]);
        }
    }
    Tensor::new(vec![side, side, 3], data).expect("render shape")
}

/// Fraction of pixels whose largest channel difference exceeds 0.1.
pub fn differing_fraction(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .chunks(3)
        .zip(b.data().chunks(3))
        .filter(|(p, q)| p.iter().zip(*q).any(|(x, y)| (x - y).abs() > 0.1))
        .count();
    diff as f64 / (a.len() / 3) as f64
}

pub const MIN_CLASS_DIFFERENCE: f64 = 0.1;

/// Canonical renders for every class, in global class order. A class whose
/// render is too close to an earlier one is redrawn from the next sub-seed.
pub fn canonical_renders(spec: &SyntheticSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inks: Vec<[f32; 3]> = (0..spec.ink_count).map(|_| random_color(&mut rng)).collect();
    let mut renders: Vec<Tensor> = Vec::with_capacity(spec.total_classes());
    for class in 0..spec.total_classes() {
        let mut attempts = 0;
        loop {
            let img = render(&random_design(&mut rng, &inks), spec.side);
            if renders
                .iter()
                .all(|r| differing_fraction(r, &img) >= MIN_CLASS_DIFFERENCE)
            {
                renders.push(img);
                break;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::dataset(format!(
                    "could not render a discriminable design for class {class}"
                )));
            }
        }
    }
    Ok(renders)
}

fn distorted(canonical: &Tensor, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    augment_with_probability(canonical, &AugmentSwitches::all(), spec.distortion, rng)
}

/// Writes the corpus under `out`: `images/*.ppm` plus the manifests
/// `pairs.jsonl`, `probe_train.jsonl`, `probe_test.jsonl`,
/// `unlabeled.jsonl`, `unlabeled_holdout.jsonl` and `heldout_pairs.jsonl`.
///
/// Probe training images are the clean class renders; every other image is
/// a distorted view.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticCorpus> {
    let renders = canonical_renders(spec)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    // one stream per class so classes do not shift when counts change
    let class_rng = |class: usize| ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0000_0000 ^ (class as u64) << 20);

    let emit = |id: String, img: &Tensor, class: usize, pair: Option<i64>| -> Result<ImageRecord> {
        let rel = format!("images/{id}.ppm");
        write_ppm(&out.join(&rel), img)?;
        Ok(ImageRecord {
            id,
            path: rel,
            class_id: Some(class as i64),
            pair_id: pair,
        })
    };

    let pair_records = |classes: std::ops::Range<usize>, per_class: usize, first_pair: usize| {
        let mut records = Vec::new();
        for (n, class) in classes.enumerate() {
            let mut rng = class_rng(class);
            for k in 0..per_class {
                let pair = (first_pair + n * per_class / 2 + k / 2) as i64;
                let img = distorted(&renders[class], spec, &mut rng)?;
                let side = if k % 2 == 0 { 'a' } else { 'b' };
                records.push(emit(format!("pair{pair:05}{side}"), &img, class, Some(pair))?);
            }
        }
        Ok::<_, Error>(records)
    };
    let pairs = pair_records(0..spec.n_classes, spec.images_per_class, 0)?;

    let mut probe_train = Vec::new();
    let mut probe_test = Vec::new();
    for class in spec.n_classes..spec.n_classes + spec.probe_classes {
        let mut rng = class_rng(class);
        probe_train.push(emit(format!("probe{class:04}_train"), &renders[class], class, None)?);
        for k in 0..spec.probe_test_per_class {
            let img = distorted(&renders[class], spec, &mut rng)?;
            probe_test.push(emit(format!("probe{class:04}_test{k:03}"), &img, class, None)?);
        }
    }

    let mut unlabeled = Vec::new();
    let mut holdout = Vec::new();
    let first_unlabeled = spec.n_classes + spec.probe_classes;
    for class in first_unlabeled..first_unlabeled + spec.unlabeled_classes {
        let mut rng = class_rng(class);
        for k in 0..spec.unlabeled_per_class + spec.holdout_per_class {
            let img = distorted(&renders[class], spec, &mut rng)?;
            let id = format!("unl{class:04}_{k:03}");
            let mut rec = emit(id, &img, class, None)?;
            rec.class_id = None;
            if k < spec.unlabeled_per_class {
                unlabeled.push(rec);
            } else {
                holdout.push(rec);
            }
        }
    }

    let first_heldout = first_unlabeled + spec.unlabeled_classes;
    let heldout_pairs = pair_records(
        first_heldout..spec.total_classes(),
        2,
        spec.n_classes * spec.images_per_class / 2,
    )?;

    let corpus = SyntheticCorpus {
        root: out.to_path_buf(),
        pairs: out.join("pairs.jsonl"),
        probe_train: out.join("probe_train.jsonl"),
        probe_test: out.join("probe_test.jsonl"),
        unlabeled: out.join("unlabeled.jsonl"),
        unlabeled_holdout: out.join("unlabeled_holdout.jsonl"),
        heldout_pairs: out.join("heldout_pairs.jsonl"),
    };
    write_manifest(&corpus.pairs, &pairs)?;
    write_manifest(&corpus.probe_train, &probe_train)?;
    write_manifest(&corpus.probe_test, &probe_test)?;
    write_manifest(&corpus.unlabeled, &unlabeled)?;
    write_manifest(&corpus.unlabeled_holdout, &holdout)?;
    write_manifest(&corpus.heldout_pairs, &heldout_pairs)?;
    Ok(corpus)
}

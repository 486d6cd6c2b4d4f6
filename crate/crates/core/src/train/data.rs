//! Deterministic toy datasets.
//!
//! `synthetic-sequence`: `k` Gaussian clusters on the token line. A sequence
//! draws its label first, takes more than half its tokens from that
//! cluster and the rest from the others, then shuffles positions; the label
//! is therefore the majority cluster. `tiny-image`: a bright blob in one of
//! four quadrants over Gaussian noise; the label is the quadrant.
//!
//! Every example is generated from its own counter-based stream, so any split
//! is reproducible from the seed alone. Eval examples that duplicate a train
//! example are skipped, which keeps the splits disjoint.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::seeds::mix;
use crate::error::{Error, Result};
use crate::model::{Batch, EmbedConfig};
use crate::tensor::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    SyntheticSequence,
    TinyImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub classes: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Token vocabulary (synthetic-sequence).
    pub vocab: usize,
    /// Tokens per sequence (synthetic-sequence).
    pub seq_len: usize,
    /// Spread of each token cluster.
    pub cluster_std: f64,
    /// Image side (tiny-image, single channel).
    pub image_size: usize,
    /// Pixel noise (tiny-image).
    pub pixel_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticSequence,
            seed: 1,
            classes: 4,
            train_size: 2048,
            eval_size: 512,
            vocab: 32,
            seq_len: 8,
            cluster_std: 1.5,
            image_size: 8,
            pixel_noise: 0.3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.classes < 2 {
            return fail("data.classes", "need at least 2 classes".into());
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return fail("data.train_size", "splits must be non-empty".into());
        }
        match self.kind {
            DatasetKind::SyntheticSequence => {
                if self.seq_len == 0 || self.vocab < self.classes {
                    return fail("data.vocab", "need seq_len >= 1 and vocab >= classes".into());
                }
                if !(self.cluster_std >= 0.0) {
                    return fail("data.cluster_std", "must be >= 0".into());
                }
            }
            DatasetKind::TinyImage => {
                if self.classes > 4 {
                    return fail("data.classes", "tiny-image has 4 quadrant classes at most".into());
                }
                if self.image_size < 2 || self.image_size % 2 != 0 {
                    return fail("data.image_size", "must be even and >= 2".into());
                }
                if !(self.pixel_noise >= 0.0) {
                    return fail("data.pixel_noise", "must be >= 0".into());
                }
            }
        }
        Ok(())
    }

    /// Errors unless the model's embedding can consume this data.
    pub fn check_model(&self, embed: &EmbedConfig, num_classes: usize) -> Result<()> {
        if num_classes != self.classes {
            return Err(Error::config(
                "model.num_classes",
                format!("model has {num_classes} classes, data has {}", self.classes),
            ));
        }
        match (self.kind, embed) {
            (DatasetKind::SyntheticSequence, EmbedConfig::Token { vocab, max_len, .. }) => {
                if *vocab < self.vocab || *max_len != self.seq_len {
                    return Err(Error::config(
                        "model.embed",
                        format!(
                            "token embed (vocab {vocab}, max_len {max_len}) does not fit data (vocab {}, seq_len {})",
                            self.vocab, self.seq_len
                        ),
                    ));
                }
            }
            (
                DatasetKind::TinyImage,
                EmbedConfig::Patch {
                    image_size, channels, ..
                },
            ) => {
                if *image_size != self.image_size || *channels != 1 {
                    return Err(Error::config(
                        "model.embed",
                        format!("patch embed expects {image_size}px × {channels}ch, data is {}px × 1ch", self.image_size),
                    ));
                }
            }
            _ => {
                return Err(Error::config(
                    "model.embed",
                    "embedding kind does not match the dataset kind".to_string(),
                ))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Generated examples of both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: DataConfig,
    train: Examples,
    eval: Examples,
}

#[derive(Clone, Debug, PartialEq)]
enum Inputs {
    Tokens(Vec<Vec<usize>>),
    Images(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
struct Examples {
    inputs: Inputs,
    labels: Vec<usize>,
}

impl Examples {
    fn len(&self) -> usize {
        self.labels.len()
    }
}

const TRAIN_TAG: u64 = 0x7472_6169_6e;
const EVAL_TAG: u64 = 0x6576_616c;

enum Example {
    Tokens(Vec<usize>),
    Image(Vec<f64>),
}

impl Example {
    fn key(&self) -> Vec<u64> {
        match self {
            Example::Tokens(t) => t.iter().map(|&v| v as u64).collect(),
            Example::Image(p) => p.iter().map(|v| v.to_bits()).collect(),
        }
    }
}

impl ToyDataset {
    pub fn generate(config: DataConfig) -> Result<Self> {
        config.validate()?;
        let mut seen = HashSet::new();
        let train = Self::split(&config, TRAIN_TAG, config.train_size, |k| {
            seen.insert(k);
            true
        })?;
        let eval = Self::split(&config, EVAL_TAG, config.eval_size, |k| !seen.contains(&k))?;
        Ok(Self { config, train, eval })
    }

    fn split(config: &DataConfig, tag: u64, size: usize, mut accept: impl FnMut(Vec<u64>) -> bool) -> Result<Examples> {
        let mut labels = Vec::with_capacity(size);
        let mut tokens = Vec::new();
        let mut images = Vec::new();
        let mut i = 0u64;
        while labels.len() < size {
            if i > 100 * size as u64 + 1000 {
                return Err(Error::invalid("could not generate enough distinct examples"));
            }
            let mut rng = RngStream::new(mix(&[config.seed, tag, i]));
            i += 1;
            let (label, ex) = match config.kind {
                DatasetKind::SyntheticSequence => sequence_example(config, &mut rng),
                DatasetKind::TinyImage => image_example(config, &mut rng),
            };
            if !accept(ex.key()) {
                continue;
            }
            labels.push(label);
            match ex {
                Example::Tokens(t) => tokens.push(t),
                Example::Image(p) => images.push(p),
            }
        }
        let inputs = match config.kind {
            DatasetKind::SyntheticSequence => Inputs::Tokens(tokens),
            DatasetKind::TinyImage => Inputs::Images(images),
        };
        Ok(Examples { inputs, labels })
    }

    fn examples(&self, split: Split) -> &Examples {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.examples(split).len()
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        &self.examples(split).labels
    }

    /// Builds a batch from example indices of `split`.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
        let ex = self.examples(split);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ex.len()) {
            return Err(Error::invalid(format!("example {bad} out of range ({} examples)", ex.len())));
        }
        let labels = indices.iter().map(|&i| ex.labels[i]).collect();
        let batch = match &ex.inputs {
            Inputs::Tokens(t) => Batch::Tokens {
                ids: indices.iter().flat_map(|&i| t[i].iter().copied()).collect(),
                batch: indices.len(),
            },
            Inputs::Images(p) => Batch::Images {
                pixels: indices.iter().flat_map(|&i| p[i].iter().copied()).collect(),
                batch: indices.len(),
            },
        };
        Ok((batch, labels))
    }

    /// Training batch for `step`: `size` indices drawn uniformly with
    /// replacement from a stream positioned by the step alone.
    pub fn train_batch(&self, step: usize, size: usize) -> Result<(Batch, Vec<usize>)> {
        let mut rng = RngStream::at(mix(&[self.config.seed, TRAIN_TAG, u64::MAX]), (step * size) as u64);
        let n = self.len(Split::Train);
        let idx: Vec<usize> = (0..size).map(|_| rng.next_index(n)).collect();
        self.batch(Split::Train, &idx)
    }
}

fn cluster_center(config: &DataConfig, c: usize) -> f64 {
    (c as f64 + 0.5) * config.vocab as f64 / config.classes as f64
}

fn sequence_example(config: &DataConfig, rng: &mut RngStream) -> (usize, Example) {
    let (k, l) = (config.classes, config.seq_len);
    let label = rng.next_index(k);
    let majority = l / 2 + 1;
    let own = majority + rng.next_index(l - majority + 1);
    let mut sources: Vec<usize> = vec![label; own];
    while sources.len() < l {
        // any cluster other than the label
        let other = (label + 1 + rng.next_index(k - 1)) % k;
        sources.push(other);
    }
    // Fisher–Yates
    for i in (1..l).rev() {
        let j = rng.next_index(i + 1);
        sources.swap(i, j);
    }
    let max = (config.vocab - 1) as f64;
    let tokens = sources
        .iter()
        .map(|&c| {
            let v = cluster_center(config, c) + config.cluster_std * rng.next_gaussian();
            v.round().clamp(0.0, max) as usize
        })
        .collect();
    (label, Example::Tokens(tokens))
}

fn image_example(config: &DataConfig, rng: &mut RngStream) -> (usize, Example) {
    let s = config.image_size;
    let half = s / 2;
    let label = rng.next_index(config.classes);
    let (qy, qx) = (label / 2, label % 2);
    let cy = (qy * half) as f64 + (half as f64 - 1.0) / 2.0 + (rng.next_uniform() - 0.5);
    let cx = (qx * half) as f64 + (half as f64 - 1.0) / 2.0 + (rng.next_uniform() - 0.5);
    let width = half as f64 / 3.0;
    let mut px = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            px.push((-r2 / (2.0 * width * width)).exp() + config.pixel_noise * rng.next_gaussian());
        }
    }
    (label, Example::Image(px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerates_identically() {
        let a = ToyDataset::generate(DataConfig::default()).unwrap();
        let b = ToyDataset::generate(DataConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_is_majority_cluster() {
        let cfg = DataConfig {
            cluster_std: 0.0,
            ..Default::default()
        };
        let d = ToyDataset::generate(cfg.clone()).unwrap();
        let (batch, labels) = d.batch(Split::Train, &(0..100).collect::<Vec<_>>()).unwrap();
        let Batch::Tokens { ids, .. } = batch else { panic!() };
        for (seq, &label) in ids.chunks(cfg.seq_len).zip(&labels) {
            let mut counts = vec![0; cfg.classes];
            for &t in seq {
                counts[t * cfg.classes / cfg.vocab] += 1;
            }
            assert!(counts[label] > cfg.seq_len / 2);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let d = ToyDataset::generate(DataConfig::default()).unwrap();
        let (Inputs::Tokens(tr), Inputs::Tokens(ev)) = (&d.train.inputs, &d.eval.inputs) else { panic!() };
        let set: HashSet<_> = tr.iter().collect();
        assert!(ev.iter().all(|e| !set.contains(e)));
    }

    #[test]
    fn classes_are_balanced() {
        let d = ToyDataset::generate(DataConfig::default()).unwrap();
        let mut counts = [0usize; 4];
        d.labels(Split::Train).iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| (412..=612).contains(&c)), "{counts:?}");
    }

    #[test]
    fn image_blob_sits_in_label_quadrant() {
        let cfg = DataConfig {
            kind: DatasetKind::TinyImage,
            pixel_noise: 0.0,
            ..Default::default()
        };
        let d = ToyDataset::generate(cfg).unwrap();
        let (batch, labels) = d.batch(Split::Eval, &[0, 1, 2, 3, 4, 5]).unwrap();
        let Batch::Images { pixels, .. } = batch else { panic!() };
        for (img, &l) in pixels.chunks(64).zip(&labels) {
            let q = |qy: usize, qx: usize| -> f64 {
                (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).map(|(y, x)| img[(qy * 4 + y) * 8 + qx * 4 + x]).sum()
            };
            let best = (0..4).max_by(|&a, &b| q(a / 2, a % 2).total_cmp(&q(b / 2, b % 2))).unwrap();
            assert_eq!(best, l);
        }
    }
}

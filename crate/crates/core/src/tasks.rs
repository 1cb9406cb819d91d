//! Synthetic alignment tasks, dataset files and error rates.
//!
//! A synthetic task draws one Gaussian template per symbol and a Markov
//! chain over symbols. An utterance samples a label sequence from the chain
//! (never repeating a symbol back to back), then renders each label as a run
//! of noisy copies of its template. The monotonic alignment is therefore
//! known, and at zero noise a nearest-template classifier followed by
//! run-length collapsing recovers the labels exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_len, put_str, put_u32, Input};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::transducer::BLANK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    /// Non-blank symbols.
    pub symbols: usize,
    /// Inclusive range of label counts per utterance.
    pub label_len: [usize; 2],
    /// Inclusive range of frames rendered per label.
    pub frames_per_label: [usize; 2],
    pub feature_dim: usize,
    pub noise: f64,
    /// How peaked the symbol transition distribution is; 0 is uniform over
    /// the symbols other than the previous one.
    #[serde(default = "default_sharpness")]
    pub transition_sharpness: f64,
    pub utterances: usize,
    pub seed: u64,
}

fn default_sharpness() -> f64 {
    2.0
}

impl SyntheticTaskConfig {
    /// Six symbols, 3–6 labels of 2–4 frames each, 8-dimensional features.
    pub fn toy(utterances: usize, seed: u64) -> Self {
        Self {
            symbols: 6,
            label_len: [3, 6],
            frames_per_label: [2, 4],
            feature_dim: 8,
            noise: 0.5,
            transition_sharpness: 2.0,
            utterances,
            seed,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.symbols < 2 {
            return Err(Error::config(format!("{key}.symbols"), "needs at least 2 symbols"));
        }
        if self.label_len[0] > self.label_len[1] {
            return Err(Error::config(format!("{key}.label_len"), "empty range"));
        }
        if self.frames_per_label[0] == 0 || self.frames_per_label[0] > self.frames_per_label[1] {
            return Err(Error::config(format!("{key}.frames_per_label"), "must be a non-empty range of positive counts"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config(format!("{key}.feature_dim"), "must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config(format!("{key}.noise"), "must be a finite non-negative number"));
        }
        if !(self.transition_sharpness >= 0.0) || !self.transition_sharpness.is_finite() {
            return Err(Error::config(format!("{key}.transition_sharpness"), "must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × d]`.
    pub features: Tensor,
    /// Blank-free symbol ids.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Output vocabulary size including the blank.
    pub vocab_size: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.cols())
    }

    pub fn label_sequences(&self) -> Vec<Vec<usize>> {
        self.utterances.iter().map(|u| u.labels.clone()).collect()
    }
}

/// The frozen parts of a task: templates and the symbol chain.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub config: SyntheticTaskConfig,
    /// `[symbols × feature_dim]`, row `s - 1` for symbol `s`.
    pub templates: Tensor,
    /// `[(symbols + 1) × (symbols + 1)]` probabilities of the next symbol
    /// given the previous one (row 0 is the sentence start).
    pub transitions: Tensor,
}

impl SyntheticTask {
    pub fn new(config: SyntheticTaskConfig) -> Result<Self> {
        config.validate("task")?;
        let root = Rng::new(config.seed);
        let mut rng = root.fork("templates");
        let (s, d) = (config.symbols, config.feature_dim);
        let templates = Tensor::new([s, d], (0..s * d).map(|_| rng.normal()).collect())?;
        let mut rng = root.fork("transitions");
        let v = s + 1;
        let mut transitions = Tensor::zeros([v, v]);
        for prev in 0..v {
            let row = transitions.row_mut(prev);
            for (next, p) in row.iter_mut().enumerate().skip(1) {
                let w = (config.transition_sharpness * rng.normal()).exp();
                *p = if next == prev { 0.0 } else { w };
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self {
            config,
            templates,
            transitions,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.symbols + 1
    }

    /// `count` utterances from the stream seeded by `seed`, ids prefixed by
    /// `prefix`.
    pub fn generate(&self, count: usize, seed: u64, prefix: &str) -> Result<Dataset> {
        let root = Rng::new(seed).fork("utterances");
        let cfg = &self.config;
        let mut utterances = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = root.fork_indexed("utterance", i as u64);
            let u = rng.range_inclusive(cfg.label_len[0], cfg.label_len[1]);
            let mut labels = Vec::with_capacity(u);
            let mut prev = BLANK;
            for _ in 0..u {
                let next = rng.categorical(self.transitions.row(prev));
                labels.push(next);
                prev = next;
            }
            let mut rows = Vec::new();
            for &l in &labels {
                let k = rng.range_inclusive(cfg.frames_per_label[0], cfg.frames_per_label[1]);
                for _ in 0..k {
                    let row: Vec<f64> = self
                        .templates
                        .row(l - 1)
                        .iter()
                        .map(|t| t + cfg.noise * rng.normal())
                        .collect();
                    rows.push(row);
                }
            }
            if rows.is_empty() {
                // An empty label sequence still needs one frame of input.
                rows.push((0..cfg.feature_dim).map(|_| cfg.noise * rng.normal()).collect());
            }
            utterances.push(Utterance {
                id: format!("{prefix}{i:06}"),
                features: Tensor::from_rows(&rows)?,
                labels,
            });
        }
        Ok(Dataset {
            vocab_size: self.vocab_size(),
            utterances,
        })
    }

    /// Nearest template per frame, then collapse runs of equal symbols.
    pub fn template_decode(&self, features: &Tensor) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in 0..features.rows() {
            let x = features.row(r);
            let mut best = (f64::INFINITY, 0);
            for s in 0..self.templates.rows() {
                let dist: f64 = x.iter().zip(self.templates.row(s)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, s + 1);
                }
            }
            if out.last() != Some(&best.1) {
                out.push(best.1);
            }
        }
        out
    }
}

/// Dataset of `config.utterances` utterances drawn with `config.seed`.
pub fn gen_synthetic(config: &SyntheticTaskConfig) -> Result<Dataset> {
    SyntheticTask::new(config.clone())?.generate(config.utterances, config.seed, "utt")
}

/// Minimum number of substitutions, insertions and deletions turning `a`
/// into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word (or symbol) error rate of `hyp` against a non-empty `reference`.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("error rate needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_error_rate<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let words: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if words == 0 {
        return Err(Error::invalid("error rate needs a non-empty reference"));
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / words as f64)
}

const DATASET_MAGIC: &[u8; 4] = b"TTDS";
pub const DATASET_VERSION: u32 = 1;
const LIMIT: u64 = 1 << 32;

pub fn write_dataset_to(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, DATASET_VERSION)?;
    put_len(w, dataset.vocab_size)?;
    put_len(w, dataset.utterances.len())?;
    for u in &dataset.utterances {
        put_str(w, &u.id)?;
        put_len(w, u.features.rows())?;
        put_len(w, u.features.cols())?;
        put_f64s(w, u.features.data())?;
        put_len(w, u.labels.len())?;
        for &l in &u.labels {
            let l = u32::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit 32 bits")))?;
            put_u32(w, l)?;
        }
    }
    Ok(())
}

pub fn read_dataset_from(r: impl Read) -> Result<Dataset> {
    let mut inp = Input::new(r, "dataset");
    inp.magic(DATASET_MAGIC)?;
    let version = inp.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let vocab_size = inp.len(LIMIT, "vocabulary size")?;
    let count = inp.len(LIMIT, "utterance count")?;
    let mut utterances = Vec::new();
    for i in 0..count {
        let id = inp.string(LIMIT)?;
        let t = inp.len(LIMIT, "frame count")?;
        let d = inp.len(LIMIT, "feature dimension")?;
        let n = t.checked_mul(d).filter(|&n| (n as u64) < LIMIT).ok_or_else(|| {
            Error::format(format!("utterance {i}: feature matrix {t}×{d} is implausibly large"))
        })?;
        let features = Tensor::new([t, d], inp.f64s(n)?)?;
        let u = inp.len(LIMIT, "label count")?;
        let mut labels = Vec::with_capacity(u.min(1 << 16));
        for _ in 0..u {
            let l = inp.u32()? as usize;
            if l == BLANK || l >= vocab_size {
                return Err(Error::format(format!(
                    "utterance `{id}`: label {l} outside the non-blank vocabulary 1..{vocab_size}"
                )));
            }
            labels.push(l);
        }
        utterances.push(Utterance { id, features, labels });
    }
    if !inp.at_end()? {
        return Err(Error::format("dataset has trailing bytes"));
    }
    Ok(Dataset { vocab_size, utterances })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

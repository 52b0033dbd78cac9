//! Frozen dual encoders standing in for a pre-trained vision-language model.
//!
//! The image side is a fixed linear map. The text side mean-pools its input
//! tokens and applies `W2 · tanh(W1 · pool)`. Only prompt tokens are ever
//! optimized, so the text encoder exposes an exact gradient with respect to
//! its inputs. This toy gradient path stands in for backpropagating through a
//! real text transformer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

/// Words of the hand-crafted phrase "a photo of a [class] with the domain of
/// [domain]", in order, with the two slots removed.
pub const TEMPLATE_WORDS: [&str; 8] = ["a", "photo", "of", "a", "with", "the", "domain", "of"];

/// Position of the `[class]` slot within the full phrase.
const CLASS_SLOT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Shared embedding width `d`.
    pub embed_dim: usize,
    /// Hidden width `h` of the text encoder.
    pub hidden_dim: usize,
    /// Raw image feature length `p`.
    pub feature_dim: usize,
    /// Softmax temperature τ.
    pub tau: f64,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            embed_dim: 32,
            hidden_dim: 64,
            feature_dim: 16,
            tau: 0.07,
        }
    }
}

/// Any encoder pair honoring these contracts can drive the simulator.
pub trait DualEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn tau(&self) -> f64;
    fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `tokens` is an `n × d` sequence.
    fn encode_text(&self, tokens: &Mat) -> Result<Vec<f64>>;
    /// Gradient of `upstream · encode_text(tokens)` with respect to every token.
    fn encode_text_backward(&self, tokens: &Mat, upstream: &[f64]) -> Result<Mat>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab {
    dim: usize,
    classes: Vec<Vec<f64>>,
    domains: Vec<Vec<f64>>,
    words: BTreeMap<String, Vec<f64>>,
}

impl TokenVocab {
    /// Every token is a unit-norm Gaussian draw from a stream keyed by its name.
    pub fn new(dim: usize, num_classes: usize, num_domains: usize, seed: u64) -> Self {
        let root = Rng::new(seed).child("vocab");
        let draw = |key: &str| root.child(key).unit_vec(dim);
        let classes = (0..num_classes).map(|j| draw(&format!("class:{j}"))).collect();
        let domains = (0..num_domains).map(|m| draw(&format!("domain:{m}"))).collect();
        let words = TEMPLATE_WORDS
            .iter()
            .map(|w| (w.to_string(), draw(&format!("word:{w}"))))
            .collect();
        TokenVocab {
            dim,
            classes,
            domains,
            words,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn class_token(&self, j: usize) -> Result<&[f64]> {
        self.classes.get(j).map(Vec::as_slice).ok_or_else(|| Error::Domain {
            op: "TokenVocab::class_token",
            detail: format!("class {j} of {}", self.classes.len()),
        })
    }

    pub fn domain_token(&self, m: usize) -> Result<&[f64]> {
        self.domains.get(m).map(Vec::as_slice).ok_or_else(|| Error::Domain {
            op: "TokenVocab::domain_token",
            detail: format!("domain {m} of {}", self.domains.len()),
        })
    }

    pub fn word(&self, w: &str) -> Option<&[f64]> {
        self.words.get(w).map(Vec::as_slice)
    }

    /// Embeddings of the template words, slots removed.
    pub fn template_words(&self) -> Vec<&[f64]> {
        TEMPLATE_WORDS.iter().map(|w| self.words[*w].as_slice()).collect()
    }

    /// Full hand-crafted phrase for class `j` and vocabulary domain `m`.
    pub fn handcrafted_sequence(&self, j: usize, m: usize) -> Result<Mat> {
        let words = self.template_words();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(words.len() + 2);
        rows.extend(words[..CLASS_SLOT].iter().map(|w| w.to_vec()));
        rows.push(self.class_token(j)?.to_vec());
        rows.extend(words[CLASS_SLOT..].iter().map(|w| w.to_vec()));
        rows.push(self.domain_token(m)?.to_vec());
        Mat::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoders {
    image_map: Mat,
    w1: Mat,
    w2: Mat,
    tau: f64,
}

impl FrozenEncoders {
    /// Weights are Gaussian with entries scaled by `1/√fan_in`.
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let root = Rng::new(seed).child("encoders");
        let gauss = |label: &str, rows: usize, cols: usize| {
            let mut rng = root.child(label);
            let scale = 1.0 / (cols as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| scale * rng.normal())
        };
        FrozenEncoders {
            image_map: gauss("image_map", dims.embed_dim, dims.feature_dim),
            w1: gauss("text_w1", dims.hidden_dim, dims.embed_dim),
            w2: gauss("text_w2", dims.embed_dim, dims.hidden_dim),
            tau: dims.tau,
        }
    }

    pub fn image_map(&self) -> &Mat {
        &self.image_map
    }

    fn mean_pool(&self, tokens: &Mat) -> Result<Vec<f64>> {
        if tokens.rows() == 0 {
            return Err(Error::Empty { op: "encode_text" });
        }
        if tokens.cols() != self.w1.cols() {
            return Err(Error::shape("encode_text", self.w1.cols(), tokens.cols()));
        }
        let n = tokens.rows() as f64;
        let mut pool = vec![0.0; tokens.cols()];
        for r in 0..tokens.rows() {
            crate::numerics::axpy(1.0, tokens.row(r), &mut pool);
        }
        pool.iter_mut().for_each(|v| *v /= n);
        Ok(pool)
    }
}

impl DualEncoder for FrozenEncoders {
    fn embed_dim(&self) -> usize {
        self.image_map.rows()
    }

    fn feature_dim(&self) -> usize {
        self.image_map.cols()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn encode_image(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.image_map.cols() {
            return Err(Error::shape("encode_image", self.image_map.cols(), x.len()));
        }
        self.image_map.matvec(x)
    }

    fn encode_text(&self, tokens: &Mat) -> Result<Vec<f64>> {
        let pool = self.mean_pool(tokens)?;
        let hidden: Vec<f64> = self.w1.matvec(&pool)?.into_iter().map(f64::tanh).collect();
        self.w2.matvec(&hidden)
    }

    fn encode_text_backward(&self, tokens: &Mat, upstream: &[f64]) -> Result<Mat> {
        let pool = self.mean_pool(tokens)?;
        if upstream.len() != self.w2.rows() {
            return Err(Error::shape("encode_text_backward", self.w2.rows(), upstream.len()));
        }
        let pre = self.w1.matvec(&pool)?;
        let d_hidden = self.w2.matvec_t(upstream)?;
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&pre)
            .map(|(g, a)| {
                let t = a.tanh();
                g * (1.0 - t * t)
            })
            .collect();
        let d_pool = self.w1.matvec_t(&d_pre)?;
        let n = tokens.rows() as f64;
        let per_token: Vec<f64> = d_pool.iter().map(|g| g / n).collect();
        Ok(Mat::from_fn(tokens.rows(), tokens.cols(), |_, c| per_token[c]))
    }
}

//! The three prompt families and the hand-crafted template.
//!
//! Assembled text inputs always use the same token order:
//!
//! | kind   | sequence                       | length |
//! |--------|--------------------------------|--------|
//! | global | `v_1 … v_L, c_j`               | L + 1  |
//! | domain | `v_1 … v_L, s_m, c_j`          | L + 2  |
//! | query  | `v_1 … v_L, c_j, s_m`          | L + 2  |
//!
//! The mean-pooling toy encoder ignores order; pluggable encoders may not.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TokenVocab;
use crate::error::{Error, Result};
use crate::json;
use crate::numerics::{Mat, Rng};

/// Standard deviation of the Gaussian used for learnable context tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDims {
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrompt {
    pub tokens: Mat,
    /// Vocabulary id of the domain-name token `s_m`.
    pub domain_id: usize,
    domain_token: Vec<f64>,
}

impl DomainPrompt {
    pub fn domain_token(&self) -> &[f64] {
        &self.domain_token
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub g_prompt: Mat,
    pub d_prompts: Vec<DomainPrompt>,
    pub q_prompt: Mat,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Global,
    Domain,
    Query,
}

pub fn global_sequence(prompt: &Mat, class_token: &[f64]) -> Result<Mat> {
    stack(prompt, &[class_token])
}

pub fn domain_sequence(prompt: &Mat, domain_token: &[f64], class_token: &[f64]) -> Result<Mat> {
    stack(prompt, &[domain_token, class_token])
}

pub fn query_sequence(prompt: &Mat, class_token: &[f64], domain_token: &[f64]) -> Result<Mat> {
    stack(prompt, &[class_token, domain_token])
}

fn stack(prompt: &Mat, tail: &[&[f64]]) -> Result<Mat> {
    let d = prompt.cols();
    let mut data = Vec::with_capacity((prompt.rows() + tail.len()) * d);
    data.extend_from_slice(prompt.as_slice());
    for t in tail {
        if t.len() != d {
            return Err(Error::shape("assemble_text_input", d, t.len()));
        }
        data.extend_from_slice(t);
    }
    Mat::from_vec(prompt.rows() + tail.len(), d, data)
}

/// The first `prompt_len` template words, cycling when the template is shorter.
pub fn template_tokens(vocab: &TokenVocab, prompt_len: usize) -> Mat {
    let words = vocab.template_words();
    Mat::from_fn(prompt_len, vocab.dim(), |r, c| words[r % words.len()][c])
}

/// Hand-crafted prompt for one domain: the template phrase for every class,
/// plus the class-averaged flat vector `Ṽ_m` used as the contrastive positive.
#[derive(Debug, Clone, PartialEq)]
pub struct HandcraftedPrompt {
    pub sequences: Vec<Mat>,
    pub positive: Vec<f64>,
}

impl HandcraftedPrompt {
    pub fn new(vocab: &TokenVocab, domain_id: usize, num_classes: usize, prompt_len: usize) -> Result<Self> {
        let sequences = (0..num_classes)
            .map(|j| vocab.handcrafted_sequence(j, domain_id))
            .collect::<Result<Vec<_>>>()?;
        Ok(HandcraftedPrompt {
            positive: handcrafted_positive(vocab, domain_id, num_classes, prompt_len)?,
            sequences,
        })
    }
}

/// `Ṽ_m`: the flattened learnable-length slice of the template, averaged over
/// classes. Class and domain slots are excluded so the length is `L·d`.
pub fn handcrafted_positive(
    vocab: &TokenVocab,
    domain_id: usize,
    num_classes: usize,
    prompt_len: usize,
) -> Result<Vec<f64>> {
    vocab.domain_token(domain_id)?;
    if num_classes == 0 {
        return Err(Error::Empty { op: "handcrafted_positive" });
    }
    let mut acc = vec![0.0; prompt_len * vocab.dim()];
    for _class in 0..num_classes {
        // the toy template has no class-dependent words
        let flat = template_tokens(vocab, prompt_len);
        crate::numerics::axpy(1.0, flat.as_slice(), &mut acc);
    }
    acc.iter_mut().for_each(|v| *v /= num_classes as f64);
    Ok(acc)
}

/// Builds a bank with one D-Prompt per source domain. `source_domains` holds
/// the vocabulary ids of the sources, in slot order.
pub fn init_prompt_bank(
    prompt_len: usize,
    num_classes: usize,
    source_domains: &[usize],
    vocab: &TokenVocab,
    seed: u64,
) -> Result<PromptBank> {
    if source_domains.is_empty() {
        return Err(Error::config("num_domains", "at least one source domain is required"));
    }
    if prompt_len == 0 {
        return Err(Error::config("prompt_len", "must be at least 1"));
    }
    if num_classes < 2 {
        return Err(Error::config("num_classes", "must be at least 2"));
    }
    let d = vocab.dim();
    let root = Rng::new(seed).child("prompts");
    let gaussian = |label: &str| {
        let mut rng = root.child(label);
        Mat::from_fn(prompt_len, d, |_, _| PROMPT_INIT_STD * rng.normal())
    };
    let d_prompts = source_domains
        .iter()
        .enumerate()
        .map(|(slot, &id)| {
            Ok(DomainPrompt {
                tokens: gaussian(&format!("d_prompt:{slot}")),
                domain_id: id,
                domain_token: vocab.domain_token(id)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptBank {
        g_prompt: gaussian("g_prompt"),
        d_prompts,
        q_prompt: template_tokens(vocab, prompt_len),
        num_classes,
    })
}

impl PromptBank {
    pub fn dims(&self) -> PromptDims {
        PromptDims {
            prompt_len: self.g_prompt.rows(),
            embed_dim: self.g_prompt.cols(),
            num_classes: self.num_classes,
            num_domains: self.d_prompts.len(),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.d_prompts.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.d_prompts.iter().map(|p| p.domain_id).collect()
    }

    /// Copies of the D-Prompt token matrices in slot order.
    pub fn d_tokens(&self) -> Vec<Mat> {
        self.d_prompts.iter().map(|p| p.tokens.clone()).collect()
    }

    pub fn set_d_tokens(&mut self, tokens: Vec<Mat>) -> Result<()> {
        if tokens.len() != self.d_prompts.len() {
            return Err(Error::shape("PromptBank::set_d_tokens", self.d_prompts.len(), tokens.len()));
        }
        for (p, t) in self.d_prompts.iter_mut().zip(tokens) {
            if t.shape() != p.tokens.shape() {
                return Err(Error::shape(
                    "PromptBank::set_d_tokens",
                    format!("{:?}", p.tokens.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            p.tokens = t;
        }
        Ok(())
    }

    /// Owned token sequence for one text input. `domain` is the D-Prompt slot
    /// and is required for the domain and query kinds.
    pub fn assemble_text_input(
        &self,
        vocab: &TokenVocab,
        kind: PromptKind,
        class: usize,
        domain: Option<usize>,
    ) -> Result<Mat> {
        if class >= self.num_classes {
            return Err(Error::Domain {
                op: "assemble_text_input",
                detail: format!("class {class} of {}", self.num_classes),
            });
        }
        let c = vocab.class_token(class)?;
        let slot = |m: Option<usize>| -> Result<&DomainPrompt> {
            let m = m.ok_or_else(|| Error::Domain {
                op: "assemble_text_input",
                detail: format!("{kind:?} input requires a domain"),
            })?;
            self.d_prompts.get(m).ok_or_else(|| Error::Domain {
                op: "assemble_text_input",
                detail: format!("domain {m} of {}", self.d_prompts.len()),
            })
        };
        match kind {
            PromptKind::Global => global_sequence(&self.g_prompt, c),
            PromptKind::Domain => {
                let p = slot(domain)?;
                domain_sequence(&p.tokens, &p.domain_token, c)
            }
            PromptKind::Query => query_sequence(&self.q_prompt, c, &slot(domain)?.domain_token),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDomainPrompt {
    pub tokens: Vec<f64>,
    pub domain_id: usize,
}

/// On-disk prompt checkpoint. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub dims: PromptDims,
    pub g_prompt: Vec<f64>,
    pub d_prompts: Vec<CheckpointDomainPrompt>,
    pub q_prompt: Vec<f64>,
    pub seed: u64,
    pub round: usize,
}

impl Checkpoint {
    pub fn from_bank(bank: &PromptBank, seed: u64, round: usize) -> Self {
        Checkpoint {
            dims: bank.dims(),
            g_prompt: bank.g_prompt.as_slice().to_vec(),
            d_prompts: bank
                .d_prompts
                .iter()
                .map(|p| CheckpointDomainPrompt {
                    tokens: p.tokens.as_slice().to_vec(),
                    domain_id: p.domain_id,
                })
                .collect(),
            q_prompt: bank.q_prompt.as_slice().to_vec(),
            seed,
            round,
        }
    }

    pub fn into_bank(self, vocab: &TokenVocab) -> Result<PromptBank> {
        let PromptDims {
            prompt_len: l,
            embed_dim: d,
            num_classes,
            num_domains,
        } = self.dims;
        if self.d_prompts.len() != num_domains {
            return Err(Error::Checkpoint(format!(
                "dims declare {num_domains} domains, found {}",
                self.d_prompts.len()
            )));
        }
        let mat = |v: Vec<f64>, what: &str| {
            Mat::from_vec(l, d, v).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
        };
        let d_prompts = self
            .d_prompts
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(DomainPrompt {
                    tokens: mat(p.tokens, &format!("d_prompts[{i}]"))?,
                    domain_token: vocab.domain_token(p.domain_id)?.to_vec(),
                    domain_id: p.domain_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptBank {
            g_prompt: mat(self.g_prompt, "g_prompt")?,
            d_prompts,
            q_prompt: mat(self.q_prompt, "q_prompt")?,
            num_classes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_line(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn vocab() -> TokenVocab {
        TokenVocab::new(8, 3, 4, 5)
    }

    fn bank(v: &TokenVocab) -> PromptBank {
        init_prompt_bank(4, 3, &[0, 1, 3], v, 42).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let v = vocab();
        assert_eq!(bank(&v), bank(&v));
    }

    #[test]
    fn q_prompt_starts_from_template_words() {
        let v = vocab();
        let b = bank(&v);
        assert_eq!(b.q_prompt.row(0), v.word("a").unwrap());
        assert_eq!(b.q_prompt.row(1), v.word("photo").unwrap());
        // shorter template cycles
        let long = template_tokens(&v, 10);
        assert_eq!(long.row(8), v.word("a").unwrap());
    }

    #[test]
    fn d_prompts_differ_pairwise() {
        let v = vocab();
        let b = bank(&v);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_ne!(b.d_prompts[i].tokens, b.d_prompts[j].tokens);
            }
        }
        assert_ne!(b.g_prompt, b.d_prompts[0].tokens);
        assert_eq!(b.d_prompts[2].domain_token(), v.domain_token(3).unwrap());
    }

    #[test]
    fn assembled_lengths_and_slots() {
        let v = vocab();
        let b = bank(&v);
        let g = b.assemble_text_input(&v, PromptKind::Global, 1, None).unwrap();
        assert_eq!(g.rows(), 5);
        assert_eq!(g.row(4), v.class_token(1).unwrap());

        let d = b.assemble_text_input(&v, PromptKind::Domain, 2, Some(1)).unwrap();
        assert_eq!(d.rows(), 6);
        assert_eq!(d.row(4), v.domain_token(1).unwrap());
        assert_eq!(d.row(5), v.class_token(2).unwrap());

        let q = b.assemble_text_input(&v, PromptKind::Query, 0, Some(2)).unwrap();
        assert_eq!(q.rows(), 6);
        assert_eq!(q.row(4), v.class_token(0).unwrap());
        assert_eq!(q.row(5), v.domain_token(3).unwrap());

        assert!(b.assemble_text_input(&v, PromptKind::Domain, 0, None).is_err());
        assert!(b.assemble_text_input(&v, PromptKind::Query, 0, Some(3)).is_err());
        assert!(b.assemble_text_input(&v, PromptKind::Global, 3, None).is_err());
    }

    #[test]
    fn classes_differ_only_in_class_slot() {
        let v = vocab();
        let b = bank(&v);
        let a = b.assemble_text_input(&v, PromptKind::Domain, 0, Some(0)).unwrap();
        let c = b.assemble_text_input(&v, PromptKind::Domain, 1, Some(0)).unwrap();
        for r in 0..5 {
            assert_eq!(a.row(r), c.row(r));
        }
        assert_ne!(a.row(5), c.row(5));
    }

    #[test]
    fn assembled_input_does_not_alias_bank() {
        let v = vocab();
        let mut b = bank(&v);
        let seq = b.assemble_text_input(&v, PromptKind::Global, 0, None).unwrap();
        let before = seq.clone();
        b.g_prompt.as_mut_slice()[0] += 1.0;
        assert_eq!(seq, before);
    }

    #[test]
    fn handcrafted_positive_properties() {
        let v = vocab();
        let p = handcrafted_positive(&v, 1, 3, 4).unwrap();
        let single = template_tokens(&v, 4);
        for (a, b) in p.iter().zip(single.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(p, handcrafted_positive(&v, 1, 3, 4).unwrap());
        assert!(norm(&p) > 0.0);
        let h = HandcraftedPrompt::new(&v, 2, 3, 4).unwrap();
        assert_eq!(h.sequences.len(), 3);
        assert_eq!(h.positive.len(), 32);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let v = vocab();
        let mut b = bank(&v);
        b.g_prompt.as_mut_slice()[3] = 0.1 + 0.2;
        let ck = Checkpoint::from_bank(&b, 42, 7);
        let text = ck.to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_bank(&v).unwrap(), b);
    }

    #[test]
    fn checkpoint_rejects_unknown_fields() {
        let v = vocab();
        let ck = Checkpoint::from_bank(&bank(&v), 1, 0);
        let mut value: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<Checkpoint>(value).is_err());
    }
}

//! Prompt expansion and masked training instances.
//!
//! Prompt words are whitespace-delimited, so a masked word keeps any
//! punctuation glued to it (`2010,`). The fine-tuner maps word indices onto
//! its own subword scheme.

use std::collections::HashSet;
use std::io::{self, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templates::{fill, SlotKind, Template};
use crate::tuples::TupleSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub w: String,
    pub u: String,
    pub v: String,
    pub template_id: usize,
    pub t1: String,
    pub t2: String,
}

impl Prompt {
    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

const REQUIRED: [SlotKind; 4] = [SlotKind::U, SlotKind::V, SlotKind::T1, SlotKind::T2];

/// Fill every template with every tuple, in (tuple rank, template index)
/// order, keeping the first of any prompts with identical text.
pub fn generate_prompts(
    tuples: &TupleSet,
    templates: &[Template],
    t1: &str,
    t2: &str,
) -> Result<Vec<Prompt>> {
    for (i, t) in templates.iter().enumerate() {
        if let Some(missing) = REQUIRED.iter().find(|k| !t.has_slot(**k)) {
            return Err(Error::Template(format!(
                "template {i} ({t}) lacks the {} slot",
                missing.placeholder()
            )));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tuple in tuples.iter() {
        for (template_id, template) in templates.iter().enumerate() {
            let text = fill(template, tuple, t1, t2)?;
            if seen.insert(text.clone()) {
                out.push(Prompt {
                    text,
                    w: tuple.w.clone(),
                    u: tuple.u.clone(),
                    v: tuple.v.clone(),
                    template_id,
                    t1: t1.to_owned(),
                    t2: t2.to_owned(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedInstance {
    pub tokens: Vec<String>,
    pub masked_position: usize,
    pub original_token: String,
}

impl MaskedInstance {
    /// The prompt text with the masked word restored.
    pub fn reconstruct(&self) -> String {
        self.tokens.join(" ")
    }
}

/// One line of the training file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub text: String,
    pub mask_index: usize,
    pub label: String,
}

impl From<&MaskedInstance> for TrainingRecord {
    fn from(m: &MaskedInstance) -> Self {
        TrainingRecord {
            text: m.reconstruct(),
            mask_index: m.masked_position,
            label: m.original_token.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskConfig {
    pub masks_per_prompt: usize,
    pub seed: u64,
    /// Only mask words equal to the tuple's `w`, `u` or `v`.
    pub anchors_only: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            masks_per_prompt: 1,
            seed: 0,
            anchors_only: false,
        }
    }
}

fn bare(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .to_lowercase()
}

/// Draw masked instances: for each prompt, `masks_per_prompt` distinct
/// positions chosen uniformly with a seeded generator.
pub fn mask_prompts(prompts: &[Prompt], cfg: &MaskConfig) -> Result<Vec<MaskedInstance>> {
    if cfg.masks_per_prompt == 0 {
        return Err(Error::InvalidArgument("masks_per_prompt must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(prompts.len() * cfg.masks_per_prompt);
    for p in prompts {
        let words: Vec<String> = p.words().into_iter().map(str::to_owned).collect();
        let mut eligible: Vec<usize> = (0..words.len()).collect();
        if cfg.anchors_only {
            let targets = [&p.w, &p.u, &p.v];
            let hits: Vec<usize> = eligible
                .iter()
                .copied()
                .filter(|&i| targets.iter().any(|t| **t == bare(&words[i])))
                .collect();
            if !hits.is_empty() {
                eligible = hits;
            }
        }
        let amount = if eligible.len() < cfg.masks_per_prompt {
            log::warn!(
                "prompt {:?} has {} maskable words, fewer than {}; masking all of them",
                p.text,
                eligible.len(),
                cfg.masks_per_prompt
            );
            eligible.len()
        } else {
            cfg.masks_per_prompt
        };
        for pick in index::sample(&mut rng, eligible.len(), amount) {
            let pos = eligible[pick];
            out.push(MaskedInstance {
                original_token: words[pos].clone(),
                tokens: words.clone(),
                masked_position: pos,
            });
        }
    }
    Ok(out)
}

pub fn write_training_records(instances: &[MaskedInstance], mut out: impl Write) -> io::Result<()> {
    for m in instances {
        serde_json::to_writer(&mut out, &TrainingRecord::from(m))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mask `prompts` and write the training file in one go.
pub fn emit_training_file(prompts: &[Prompt], cfg: &MaskConfig, out: impl Write) -> Result<usize> {
    let instances = mask_prompts(prompts, cfg)?;
    write_training_records(&instances, out)
        .map_err(|e| Error::InvalidArgument(format!("writing training file: {e}")))?;
    Ok(instances.len())
}

pub fn write_prompts(prompts: &[Prompt], mut out: impl Write) -> io::Result<()> {
    for p in prompts {
        writeln!(out, "{}", p.text)?;
    }
    Ok(())
}

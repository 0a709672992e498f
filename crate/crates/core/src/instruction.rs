//! Synthetic instructions and frozen text encoders.
//!
//! The stand-in encoder gives every token a fixed random vector (color words
//! get their own sub-table) plus a position term. The position term is a
//! sinusoid scaled element-wise by a per-token gain, so each token's
//! embedding depends only on the token and its index while the mean over
//! tokens still depends on word order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::standard_normal;
use crate::sim::{color_index, TaskKind, TaskSpec, PALETTE};
use crate::tensor::Tensor;

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_MAX_TOKENS: usize = 32;
pub const TEMPLATES_PER_TASK: usize = 3;

fn join_colors(colors: &[&str]) -> String {
    colors.join(", ")
}

fn render_template(kind: TaskKind, template: usize, c: &[&str]) -> String {
    match (kind, template) {
        (TaskKind::ReachTarget, 0) => format!("reach the {} target", c[0]),
        (TaskKind::ReachTarget, 1) => format!("touch the {} block", c[0]),
        (TaskKind::ReachTarget, _) => format!("move the gripper to the {} cube", c[0]),
        (TaskKind::ReachOccluded, 0) => format!("reach the {} block behind the gray wall", c[0]),
        (TaskKind::ReachOccluded, 1) => format!("touch the hidden {} cube", c[0]),
        (TaskKind::ReachOccluded, _) => format!("find and reach the {} target behind the screen", c[0]),
        (TaskKind::PushButtons, 0) => {
            let mut s = format!("push the {} button", c[0]);
            for x in &c[1..] {
                s += &format!(", and then push the {x} one");
            }
            s
        }
        (TaskKind::PushButtons, 1) => {
            let mut s = format!("press the {} button", c[0]);
            for x in &c[1..] {
                s += &format!(", then press the {x} button");
            }
            s
        }
        (TaskKind::PushButtons, _) => {
            let mut s = format!("hit the {} button first", c[0]);
            for x in &c[1..] {
                s += &format!(", followed by the {x} one");
            }
            s
        }
        (TaskKind::Tower, 0) => format!("Stack the {} blocks", join_colors(c)),
        (TaskKind::Tower, 1) => {
            let mut s = format!("Stack the {} block.", c[0]);
            if let Some(x) = c.get(1) {
                s += &format!(" Stack the {x} block on top of it");
            }
            for x in c.iter().skip(2) {
                s += &format!(", then add the {x} cube");
            }
            s
        }
        (TaskKind::Tower, _) => {
            let mut s = format!("Build a tower with the {} block at the bottom", c[0]);
            for x in &c[1..] {
                s += &format!(", then the {x} block");
            }
            s
        }
    }
}

/// Instruction for a task from a specific template.
pub fn instruction_from_template(task: &TaskSpec, template: usize) -> String {
    render_template(task.kind, template % TEMPLATES_PER_TASK, &task.goal_names())
}

/// Instruction from a template chosen by `rng`.
pub fn generate_instruction<R: Rng>(task: &TaskSpec, rng: &mut R) -> Result<String> {
    task.validate()?;
    Ok(instruction_from_template(task, rng.gen_range(0..TEMPLATES_PER_TASK)))
}

/// Lowercased words; whitespace and punctuation separate tokens and are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn checked_tokens(text: &str, max_tokens: usize) -> Result<Vec<String>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyInstruction);
    }
    if tokens.len() > max_tokens {
        return Err(Error::InstructionTooLong(tokens.len(), max_tokens));
    }
    Ok(tokens)
}

/// A frozen text encoder: text in, `n x dim` token embeddings out.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Tensor<f64>>;
    /// Hash of everything that determines the encoder's outputs.
    fn digest(&self) -> String;
}

/// Serializable description of an encoder, enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    StandIn { dim: usize, seed: u64, max_tokens: usize },
    OneHot { dim: usize, max_tokens: usize, vocabulary: Vec<Vec<String>> },
}

impl EncoderSpec {
    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            EncoderSpec::StandIn { dim, seed, max_tokens } => Box::new(StandInEncoder::new(*dim, *seed, *max_tokens)),
            EncoderSpec::OneHot { dim, max_tokens, vocabulary } => {
                Box::new(OneHotEncoder::from_vocabulary(*dim, *max_tokens, vocabulary.clone())?)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::StandIn { dim, .. } | EncoderSpec::OneHot { dim, .. } => *dim,
        }
    }
}

const HASH_ROWS: usize = 4096;

pub struct StandInEncoder {
    dim: usize,
    seed: u64,
    max_tokens: usize,
    words: Vec<f64>,
    colors: Vec<f64>,
    gains: Vec<f64>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl StandInEncoder {
    pub fn new(dim: usize, seed: u64, max_tokens: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = |rows: usize| -> Vec<f64> { (0..rows * dim).map(|_| standard_normal(&mut rng)).collect() };
        let words = table(HASH_ROWS);
        let colors = table(PALETTE.len());
        let gains = table(HASH_ROWS).into_iter().map(|g| 1.0 + 0.5 * g).collect();
        StandInEncoder { dim, seed, max_tokens, words, colors, gains }
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec::StandIn { dim: self.dim, seed: self.seed, max_tokens: self.max_tokens }
    }

    fn position(&self, l: usize, i: usize) -> f64 {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / self.dim as f64);
        let a = l as f64 * rate;
        if i.is_multiple_of(2) {
            a.sin()
        } else {
            a.cos()
        }
    }

    /// Embedding of `token` at index `l`.
    pub fn token_embedding(&self, token: &str, l: usize) -> Vec<f64> {
        let d = self.dim;
        let row = (fnv1a(token) % HASH_ROWS as u64) as usize;
        let base = match color_index(token) {
            Some(c) => &self.colors[c * d..(c + 1) * d],
            None => &self.words[row * d..(row + 1) * d],
        };
        let gain = &self.gains[row * d..(row + 1) * d];
        (0..d).map(|i| base[i] + 0.5 * gain[i] * self.position(l, i)).collect()
    }
}

impl TextEncoder for StandInEncoder {
    fn name(&self) -> &str {
        "stand_in"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Tensor<f64>> {
        let tokens = checked_tokens(text, self.max_tokens)?;
        let data = tokens.iter().enumerate().flat_map(|(l, t)| self.token_embedding(t, l)).collect();
        Ok(Tensor::new(&[tokens.len(), self.dim], data))
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.words.iter().chain(&self.colors).chain(&self.gains) {
            h.update(v.to_le_bytes());
        }
        crate::params::hex(&h.finalize())
    }
}

/// One-hot encoding of the instructed color sequence. Sequences not seen at
/// construction encode to the zero vector, so nothing transfers to new
/// color combinations.
pub struct OneHotEncoder {
    dim: usize,
    max_tokens: usize,
    vocabulary: Vec<Vec<String>>,
}

fn color_key(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| color_index(t).is_some()).cloned().collect()
}

impl OneHotEncoder {
    pub fn from_vocabulary(dim: usize, max_tokens: usize, vocabulary: Vec<Vec<String>>) -> Result<Self> {
        if vocabulary.len() > dim {
            return Err(Error::config("text_dim", format!("one-hot needs {} dims, have {dim}", vocabulary.len())));
        }
        Ok(OneHotEncoder { dim, max_tokens, vocabulary })
    }

    /// Vocabulary of the distinct color sequences in `instructions`, sorted.
    pub fn fit<'a>(dim: usize, max_tokens: usize, instructions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut vocab: Vec<Vec<String>> = instructions.into_iter().map(|s| color_key(&tokenize(s))).collect();
        vocab.sort();
        vocab.dedup();
        Self::from_vocabulary(dim, max_tokens, vocab)
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec::OneHot { dim: self.dim, max_tokens: self.max_tokens, vocabulary: self.vocabulary.clone() }
    }
}

impl TextEncoder for OneHotEncoder {
    fn name(&self) -> &str {
        "one_hot"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Tensor<f64>> {
        let tokens = checked_tokens(text, self.max_tokens)?;
        let mut out = Tensor::zeros(&[1, self.dim]);
        if let Ok(i) = self.vocabulary.binary_search(&color_key(&tokens)) {
            out.data_mut()[i] = 1.0;
        }
        Ok(out)
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.vocabulary).unwrap_or_default());
        crate::params::hex(&h.finalize())
    }
}

/// Mean of the raw token embeddings.
pub fn mean_language_embedding(raw: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = raw.dims2();
    let mut out = vec![0.0; d];
    for row in raw.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push(goal: &[&str]) -> TaskSpec {
        TaskSpec::with_goal(TaskKind::PushButtons, 0, goal, 3).unwrap()
    }

    #[test]
    fn reference_templates() {
        assert_eq!(
            instruction_from_template(&push(&["red", "cyan"]), 0),
            "push the red button, and then push the cyan one"
        );
        let tower = TaskSpec::with_goal(TaskKind::Tower, 0, &["red", "blue", "green"], 3).unwrap();
        assert_eq!(instruction_from_template(&tower, 0), "Stack the red, blue, green blocks");
    }

    #[test]
    fn templates_keep_color_order() {
        for kind in TaskKind::ALL {
            let task = TaskSpec::from_variation(kind, 5).unwrap();
            let texts: Vec<String> = (0..TEMPLATES_PER_TASK).map(|t| instruction_from_template(&task, t)).collect();
            for (i, t) in texts.iter().enumerate() {
                assert_eq!(color_key(&tokenize(t)), task.goal_names());
                assert!(texts[..i].iter().all(|u| u != t));
            }
        }
    }

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(tokenize("Stack the red, blue. Go!"), vec!["stack", "the", "red", "blue", "go"]);
    }

    #[test]
    fn length_limits() {
        let enc = StandInEncoder::new(16, 0, 4);
        assert!(matches!(enc.encode(" ,. "), Err(Error::EmptyInstruction)));
        assert!(matches!(enc.encode("a b c d e"), Err(Error::InstructionTooLong(5, 4))));
    }

    #[test]
    fn changing_one_color_changes_one_token() {
        let enc = StandInEncoder::new(DEFAULT_TEXT_DIM, 1, DEFAULT_MAX_TOKENS);
        let a = enc.encode("push the red button, and then push the cyan one").unwrap();
        let b = enc.encode("push the red button, and then push the blue one").unwrap();
        let d = DEFAULT_TEXT_DIM;
        for (l, (ra, rb)) in a.data().chunks(d).zip(b.data().chunks(d)).enumerate() {
            assert_eq!(ra == rb, l != 8, "token {l}");
        }
    }

    #[test]
    fn push_variations_have_distinct_means() {
        let enc = StandInEncoder::new(DEFAULT_TEXT_DIM, 0, DEFAULT_MAX_TOKENS);
        let means: Vec<Vec<f64>> = (0..100)
            .map(|v| {
                let task = TaskSpec::from_variation(TaskKind::PushButtons, v).unwrap();
                mean_language_embedding(&enc.encode(&instruction_from_template(&task, 0)).unwrap())
            })
            .collect();
        for i in 0..means.len() {
            for j in 0..i {
                assert_ne!(means[i], means[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn one_hot_knows_only_its_vocabulary() {
        let seen =
            ["push the red button, and then push the cyan one", "press the green button, then press the red button"];
        let enc = OneHotEncoder::fit(8, 32, seen).unwrap();
        let a = enc.encode("hit the red button first, followed by the cyan one").unwrap();
        assert_eq!(a.data().iter().sum::<f64>(), 1.0);
        let b = enc.encode("push the cyan button, and then push the red one").unwrap();
        assert!(b.data().iter().all(|&x| x == 0.0));
        let rebuilt = enc.spec().build().unwrap();
        assert_eq!(rebuilt.encode(seen[1]).unwrap(), enc.encode(seen[1]).unwrap());
    }
}

//! Synthetic preference data with a hidden gold reward, plus file I/O for
//! corpora, preference sets, and gold parameters.
//!
//! The generator follows a small token grammar so the toy model has learnable
//! regularities: token 0 is the end marker, content tokens chain by a
//! successor rule. The gold reward scores rule-following bigrams plus seeded
//! per-token noise minus a length penalty; its parameters are written to a
//! sealed file that training code never reads, giving the overoptimization
//! experiments a ground truth that cannot be gamed from the training side.

use crate::model::{self, ModelConfig, ModelError, Params};
use crate::seed;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// End-of-sequence marker.
pub const EOS: u32 = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: missing or invalid header line: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("{path}: {} malformed line(s), first: line {}: {}", .lines.len(), .lines[0].0, .lines[0].1)]
    MalformedLines {
        path: String,
        lines: Vec<(usize, String)>,
    },
    #[error("example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
}

/// One labeled preference pair over token-id sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl PreferenceExample {
    pub fn validate(&self, vocab: usize) -> Result<(), String> {
        if self.prompt.is_empty() {
            return Err("empty prompt".into());
        }
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err("empty response".into());
        }
        if self.chosen == self.rejected {
            return Err("chosen equals rejected".into());
        }
        for (name, seq) in [
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if let Some(&id) = seq.iter().find(|&&id| id as usize >= vocab) {
                return Err(format!("{name} token {id} out of vocab {vocab}"));
            }
        }
        Ok(())
    }
}

/// Deterministic successor rule for content tokens: the grammar's responses
/// walk this cycle, and the gold reward pays for following it.
pub fn successor(token: u32, vocab: usize) -> u32 {
    debug_assert!(token >= 1 && (token as usize) < vocab);
    let content = vocab as u32 - 1;
    token % content + 1
}

/// Hidden scoring parameters: rule-following bigram bonus, seeded per-token
/// weights, and a length penalty. Deterministic and finite for any sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldReward {
    pub vocab: usize,
    pub bigram_bonus: f64,
    pub unigram: Vec<f64>,
    pub length_penalty: f64,
    pub seed: u64,
}

impl GoldReward {
    pub fn new(vocab: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, "gold-reward", 0);
        let unigram = (0..vocab).map(|_| rng.gen_range(-0.15..0.15)).collect();
        Self {
            vocab,
            bigram_bonus: 1.0,
            unigram,
            length_penalty: 0.1,
            seed: seed_value,
        }
    }

    /// Gold score of a response. Rule-following bigrams earn the bonus,
    /// rule-breaking ones pay it; EOS terminates scoring.
    pub fn score(&self, response: &[u32]) -> f64 {
        let mut total = 0.0;
        let mut len = 0usize;
        for (i, &tok) in response.iter().enumerate() {
            if tok == EOS {
                break;
            }
            len += 1;
            total += self.unigram[tok as usize % self.vocab];
            if i + 1 < response.len() {
                let next = response[i + 1];
                if next == EOS {
                    continue;
                }
                if next == successor(tok, self.vocab) {
                    total += self.bigram_bonus;
                } else {
                    total -= self.bigram_bonus;
                }
            }
        }
        total - self.length_penalty * len as f64
    }
}

/// Shape of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub vocab: usize,
    pub n_prompts: usize,
    pub prompt_len: (usize, usize),
    pub response_len: (usize, usize),
    pub temperature: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<(), DataError> {
        if self.vocab != model_cfg.vocab_size {
            return Err(DataError::InvalidSpec(format!(
                "vocab {} does not match model vocab {}",
                self.vocab, model_cfg.vocab_size
            )));
        }
        if self.n_prompts == 0 {
            return Err(DataError::InvalidSpec("n_prompts must be >= 1".into()));
        }
        let ok_range = |r: (usize, usize)| r.0 >= 1 && r.0 <= r.1;
        if !ok_range(self.prompt_len) || !ok_range(self.response_len) {
            return Err(DataError::InvalidSpec(format!(
                "bad length ranges: prompt {:?}, response {:?}",
                self.prompt_len, self.response_len
            )));
        }
        if self.prompt_len.1 + self.response_len.1 + 1 > model_cfg.max_seq {
            return Err(DataError::InvalidSpec(format!(
                "prompt {:?} + response {:?} + EOS exceeds max_seq {}",
                self.prompt_len, self.response_len, model_cfg.max_seq
            )));
        }
        Ok(())
    }
}

fn random_content_token(rng: &mut impl Rng, vocab: usize) -> u32 {
    rng.gen_range(1..vocab as u32)
}

fn random_prompt(rng: &mut impl Rng, spec: &DatasetSpec) -> Vec<u32> {
    let len = rng.gen_range(spec.prompt_len.0..=spec.prompt_len.1);
    (0..len)
        .map(|_| random_content_token(rng, spec.vocab))
        .collect()
}

/// Grammar response: starts at the last prompt token and walks the successor
/// cycle; each position flips to a random wrong token with the mistake rate.
fn grammar_response(
    rng: &mut impl Rng,
    prompt: &[u32],
    spec: &DatasetSpec,
    mistake_rate: f64,
) -> Vec<u32> {
    let len = rng.gen_range(spec.response_len.0..=spec.response_len.1);
    let mut out = Vec::with_capacity(len);
    let mut prev = *prompt.last().expect("prompts are non-empty");
    for _ in 0..len {
        let clean = successor(prev, spec.vocab);
        let tok = if rng.gen_bool(mistake_rate) {
            loop {
                let t = random_content_token(rng, spec.vocab);
                if t != clean {
                    break t;
                }
            }
        } else {
            clean
        };
        out.push(tok);
        prev = tok;
    }
    out
}

/// Deterministic corpus for supervised pretraining: prompt, clean grammar
/// response, end marker.
pub fn gen_sft_corpus(spec: &DatasetSpec, model_cfg: &ModelConfig) -> Result<Vec<Vec<u32>>, DataError> {
    spec.validate(model_cfg)?;
    let out = (0..spec.n_prompts)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(spec.seed, "sft-corpus", i as u64);
            let prompt = random_prompt(&mut rng, spec);
            let response = grammar_response(&mut rng, &prompt, spec, 0.0);
            let mut seq = prompt;
            seq.extend_from_slice(&response);
            seq.push(EOS);
            seq
        })
        .collect();
    Ok(out)
}

/// Where candidate responses come from during preference generation.
pub enum ResponseSampler<'a> {
    /// Grammar walks with a per-response mistake rate drawn from this range.
    Grammar { mistake_range: (f64, f64) },
    /// Sampled from a model checkpoint.
    Model {
        cfg: &'a ModelConfig,
        params: &'a Params,
    },
}

const TIE_RETRIES: usize = 16;

/// Per prompt: sample two distinct responses and label the higher-scoring one
/// as chosen. Ties trigger a bounded resample of the second response; if the
/// budget runs out the prompt is skipped with a warning.
pub fn gen_preferences(
    sampler: &ResponseSampler<'_>,
    gold: &GoldReward,
    spec: &DatasetSpec,
    model_cfg: &ModelConfig,
) -> Result<Vec<PreferenceExample>, DataError> {
    spec.validate(model_cfg)?;
    let results: Vec<Option<PreferenceExample>> = (0..spec.n_prompts)
        .into_par_iter()
        .map(|i| -> Result<Option<PreferenceExample>, DataError> {
            let mut rng = seed::rng(spec.seed, "preferences", i as u64);
            let prompt = random_prompt(&mut rng, spec);
            let sample_one = |rng: &mut rand_chacha::ChaCha8Rng,
                              attempt: u64|
             -> Result<Vec<u32>, DataError> {
                match sampler {
                    ResponseSampler::Grammar { mistake_range } => {
                        let rate = rng.gen_range(mistake_range.0..=mistake_range.1);
                        Ok(grammar_response(rng, &prompt, spec, rate))
                    }
                    ResponseSampler::Model { cfg, params } => {
                        let s = seed::derive(spec.seed, "model-response", i as u64 ^ (attempt << 32));
                        Ok(model::sample(
                            cfg,
                            params,
                            &prompt,
                            spec.temperature,
                            spec.response_len.1,
                            Some(EOS),
                            s,
                        )?)
                    }
                }
            };
            let first = sample_one(&mut rng, 0)?;
            let score_first = gold.score(&first);
            for attempt in 1..=TIE_RETRIES {
                let second = sample_one(&mut rng, attempt as u64)?;
                if second == first {
                    continue;
                }
                let score_second = gold.score(&second);
                if score_second == score_first {
                    continue;
                }
                let (chosen, rejected) = if score_first > score_second {
                    (first.clone(), second)
                } else {
                    (second, first.clone())
                };
                return Ok(Some(PreferenceExample {
                    prompt,
                    chosen,
                    rejected,
                }));
            }
            log::warn!("prompt {i}: tie-break budget exhausted, skipping");
            Ok(None)
        })
        .collect::<Result<_, _>>()?;
    Ok(results.into_iter().flatten().collect())
}

const PREFS_SCHEMA: &str = "daalab.preferences.v1";
const CORPUS_SCHEMA: &str = "daalab.corpus.v1";
const GOLD_SCHEMA: &str = "daalab.gold.v1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    vocab: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct GoldFile {
    schema: String,
    #[serde(flatten)]
    gold: GoldReward,
}

fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    schema: &str,
    vocab: usize,
    rows: impl Iterator<Item = T>,
) -> Result<(), DataError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &Header {
            schema: schema.to_string(),
            vocab,
        },
    )
    .map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_header(
    path: &str,
    line: Option<std::io::Result<String>>,
    schema: &str,
) -> Result<Option<Header>, DataError> {
    let Some(line) = line else {
        log::warn!("{path}: empty file");
        return Ok(None);
    };
    let line = line?;
    let header: Header = serde_json::from_str(&line).map_err(|e| DataError::BadHeader {
        path: path.to_string(),
        reason: e.to_string(),
    })?;
    if header.schema != schema {
        return Err(DataError::BadHeader {
            path: path.to_string(),
            reason: format!("schema `{}`, expected `{schema}`", header.schema),
        });
    }
    Ok(Some(header))
}

pub fn save_preferences(
    path: impl AsRef<Path>,
    vocab: usize,
    examples: &[PreferenceExample],
) -> Result<(), DataError> {
    write_jsonl(path, PREFS_SCHEMA, vocab, examples.iter())
}

/// Loads and validates a preference file. Fails closed: any malformed or
/// invalid line aborts the load, reporting every offending line number.
pub fn load_preferences(path: impl AsRef<Path>) -> Result<(usize, Vec<PreferenceExample>), DataError> {
    let display = path.as_ref().display().to_string();
    let reader = BufReader::new(std::fs::File::open(&path)?);
    let mut lines = reader.lines();
    let Some(header) = read_header(&display, lines.next(), PREFS_SCHEMA)? else {
        return Ok((0, Vec::new()));
    };
    let mut examples = Vec::new();
    let mut bad: Vec<(usize, String)> = Vec::new();
    for (no, line) in lines.enumerate() {
        let line_no = no + 2; // 1-based, after the header
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PreferenceExample>(&line) {
            Ok(ex) => match ex.validate(header.vocab) {
                Ok(()) => examples.push(ex),
                Err(reason) => bad.push((line_no, reason)),
            },
            Err(e) => bad.push((line_no, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(DataError::MalformedLines {
            path: display,
            lines: bad,
        });
    }
    if examples.is_empty() {
        log::warn!("{display}: no examples");
    }
    Ok((header.vocab, examples))
}

pub fn save_corpus(
    path: impl AsRef<Path>,
    vocab: usize,
    corpus: &[Vec<u32>],
) -> Result<(), DataError> {
    write_jsonl(
        path,
        CORPUS_SCHEMA,
        vocab,
        corpus.iter().map(|tokens| CorpusLine {
            tokens: tokens.clone(),
        }),
    )
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(usize, Vec<Vec<u32>>), DataError> {
    let display = path.as_ref().display().to_string();
    let reader = BufReader::new(std::fs::File::open(&path)?);
    let mut lines = reader.lines();
    let Some(header) = read_header(&display, lines.next(), CORPUS_SCHEMA)? else {
        return Ok((0, Vec::new()));
    };
    let mut corpus = Vec::new();
    let mut bad = Vec::new();
    for (no, line) in lines.enumerate() {
        let line_no = no + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusLine>(&line) {
            Ok(row) => {
                if row.tokens.len() < 2 {
                    bad.push((line_no, "sequence shorter than 2 tokens".into()));
                } else if let Some(&t) = row.tokens.iter().find(|&&t| t as usize >= header.vocab) {
                    bad.push((line_no, format!("token {t} out of vocab {}", header.vocab)));
                } else {
                    corpus.push(row.tokens);
                }
            }
            Err(e) => bad.push((line_no, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(DataError::MalformedLines {
            path: display,
            lines: bad,
        });
    }
    Ok((header.vocab, corpus))
}

pub fn save_gold(path: impl AsRef<Path>, gold: &GoldReward) -> Result<(), DataError> {
    let file = GoldFile {
        schema: GOLD_SCHEMA.to_string(),
        gold: gold.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(std::io::Error::other)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_gold(path: impl AsRef<Path>) -> Result<GoldReward, DataError> {
    let display = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(&path)?;
    let file: GoldFile = serde_json::from_str(&text).map_err(|e| DataError::BadHeader {
        path: display.clone(),
        reason: e.to_string(),
    })?;
    if file.schema != GOLD_SCHEMA {
        return Err(DataError::BadHeader {
            path: display,
            reason: format!("schema `{}`, expected `{GOLD_SCHEMA}`", file.schema),
        });
    }
    Ok(file.gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec {
            vocab: 32,
            n_prompts: 24,
            prompt_len: (3, 6),
            response_len: (6, 14),
            temperature: 0.9,
            seed: 5,
        }
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn corpus_is_deterministic_and_bounded() {
        let a = gen_sft_corpus(&spec(), &model_cfg()).unwrap();
        let b = gen_sft_corpus(&spec(), &model_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
        for seq in &a {
            assert!(seq.len() >= 3 + 6 + 1 && seq.len() <= 6 + 14 + 1);
            assert_eq!(*seq.last().unwrap(), EOS);
            assert!(seq.iter().all(|&t| (t as usize) < 32));
        }
        let mut other = spec();
        other.seed = 6;
        let c = gen_sft_corpus(&other, &model_cfg()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn clean_corpus_follows_the_successor_rule() {
        let s = spec();
        let corpus = gen_sft_corpus(&s, &model_cfg()).unwrap();
        for seq in &corpus {
            // The response chains from the last prompt token, so the suffix of
            // consecutive successor steps must span at least the minimum
            // response length plus its anchor in the prompt.
            let body = &seq[..seq.len() - 1];
            let mut chain = 1;
            for i in (0..body.len() - 1).rev() {
                if body[i + 1] == successor(body[i], s.vocab) {
                    chain += 1;
                } else {
                    break;
                }
            }
            assert!(chain >= s.response_len.0 + 1, "chain suffix {chain}");
        }
    }

    #[test]
    fn preferences_are_gold_consistent_and_deterministic() {
        let s = spec();
        let gold = GoldReward::new(s.vocab, 77);
        let sampler = ResponseSampler::Grammar {
            mistake_range: (0.0, 0.35),
        };
        let a = gen_preferences(&sampler, &gold, &s, &model_cfg()).unwrap();
        let b = gen_preferences(&sampler, &gold, &s, &model_cfg()).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for ex in &a {
            assert!(gold.score(&ex.chosen) > gold.score(&ex.rejected));
            assert!(ex.validate(s.vocab).is_ok());
        }
    }

    #[test]
    fn gold_prefers_rule_following() {
        let gold = GoldReward::new(32, 1);
        let clean: Vec<u32> = {
            let mut v = vec![5u32];
            for _ in 0..9 {
                v.push(successor(*v.last().unwrap(), 32));
            }
            v
        };
        let mut noisy = clean.clone();
        noisy[4] = 30;
        noisy[7] = 2;
        assert!(gold.score(&clean) > gold.score(&noisy));
    }

    #[test]
    fn preference_roundtrip_is_identity() {
        let s = spec();
        let gold = GoldReward::new(s.vocab, 3);
        let sampler = ResponseSampler::Grammar {
            mistake_range: (0.0, 0.3),
        };
        let examples = gen_preferences(&sampler, &gold, &s, &model_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        save_preferences(&path, s.vocab, &examples).unwrap();
        let (vocab, loaded) = load_preferences(&path).unwrap();
        assert_eq!(vocab, s.vocab);
        assert_eq!(examples, loaded);
    }

    #[test]
    fn corpus_roundtrip_is_identity() {
        let corpus = gen_sft_corpus(&spec(), &model_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&path, 32, &corpus).unwrap();
        let (vocab, loaded) = load_corpus(&path).unwrap();
        assert_eq!(vocab, 32);
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn bad_lines_are_reported_with_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"schema\":\"daalab.preferences.v1\",\"vocab\":8}\n",
                "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3]}\n",
                "{\"prompt\":[1],\"chosen\":[99],\"rejected\":[3]}\n",
                "not json\n",
            ),
        )
        .unwrap();
        let err = load_preferences(&path).unwrap_err();
        match err {
            DataError::MalformedLines { lines, .. } => {
                assert_eq!(lines.len(), 2);
                assert_eq!(lines[0].0, 3);
                assert_eq!(lines[1].0, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_file_loads_as_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let (_, examples) = load_preferences(&path).unwrap();
        assert!(examples.is_empty());
    }

    #[test]
    fn gold_roundtrip() {
        let gold = GoldReward::new(16, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gold.json");
        save_gold(&path, &gold).unwrap();
        let loaded = load_gold(&path).unwrap();
        assert_eq!(gold, loaded);
    }

    #[test]
    fn spec_validation_catches_overlong_ranges() {
        let mut s = spec();
        s.prompt_len = (3, 80);
        s.response_len = (6, 60);
        assert!(matches!(
            gen_sft_corpus(&s, &model_cfg()),
            Err(DataError::InvalidSpec(_))
        ));
    }
}

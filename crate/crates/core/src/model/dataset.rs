use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Token};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Forget,
    Pretrain,
}

/// A (context, next-token) training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub context: Vec<Token>,
    pub next: Token,
}

/// Next-token pairs expanded from token sequences.
///
/// The originating sequences are kept alongside the pairs: sequence-level
/// losses and per-sequence batch sampling need them.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pairs: Vec<Pair>,
    sequences: Vec<Vec<Token>>,
    role: DatasetRole,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    tokens: Vec<Token>,
}

impl TokenDataset {
    /// Expands each sequence into every (prefix, next) pair, truncating the
    /// prefix to its last `context_len` tokens.
    pub fn from_sequences(
        sequences: Vec<Vec<Token>>,
        context_len: usize,
        role: DatasetRole,
    ) -> Self {
        let mut pairs = Vec::new();
        for seq in &sequences {
            for t in 1..seq.len() {
                let start = t.saturating_sub(context_len);
                pairs.push(Pair {
                    context: seq[start..t].to_vec(),
                    next: seq[t],
                });
            }
        }
        Self {
            pairs,
            sequences,
            role,
        }
    }

    pub fn from_pairs(pairs: Vec<Pair>, role: DatasetRole) -> Self {
        Self {
            pairs,
            sequences: Vec::new(),
            role,
        }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks token ids and context lengths against the model.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for pair in &self.pairs {
            if pair.context.is_empty() || pair.context.len() > spec.context_len {
                return Err(Error::InvalidInput(format!(
                    "context of length {} is not within 1..={}",
                    pair.context.len(),
                    spec.context_len
                )));
            }
            for &tok in pair.context.iter().chain(std::iter::once(&pair.next)) {
                spec.check_token(tok)?;
            }
        }
        for seq in &self.sequences {
            for &tok in seq {
                spec.check_token(tok)?;
            }
        }
        Ok(())
    }

    /// Reads one `{"tokens": [...]}` JSON object per line.
    pub fn load_jsonl(
        path: impl AsRef<Path>,
        context_len: usize,
        role: DatasetRole,
    ) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut sequences = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SequenceRecord = serde_json::from_str(&line)?;
            sequences.push(record.tokens);
        }
        Ok(Self::from_sequences(sequences, context_len, role))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for seq in &self.sequences {
            serde_json::to_writer(
                &mut out,
                &SequenceRecord {
                    tokens: seq.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

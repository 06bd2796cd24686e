//! Word-level and sentence-level text embeddings.
//!
//! The toy encoder maps every string to a unit vector drawn from a ChaCha
//! stream seeded by a SHA-256 digest of the string. Only uniform draws and
//! `sqrt` are involved, so embeddings are byte-identical on every platform.

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct WordTokens {
    pub tokens: Vec<String>,
    /// `L × e_dim`.
    pub embeddings: Vec<Vec<f64>>,
    /// `false` marks padding.
    pub mask: Vec<bool>,
}

impl WordTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandToken {
    pub embedding: Vec<f64>,
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let clean: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(|c| c.to_lowercase())
        .collect();
    let tokens: Vec<String> = clean.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        vec![PAD_TOKEN.to_string()]
    } else {
        tokens
    }
}

/// Normalized sentence used as the key of the command embedding.
pub fn normalize_sentence(text: &str) -> String {
    tokenize_words(text).join(" ")
}

pub fn stable_hash64(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Unit-norm pseudo-random vector keyed by `key`.
pub fn hash_embedding(key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(key));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_words(&self, tokens: &[String]) -> Result<WordTokens>;
    fn embed_command(&self, text: &str) -> Result<CommandToken>;

    fn encode(&self, text: &str) -> Result<(WordTokens, CommandToken)> {
        Ok((self.embed_words(&tokenize_words(text))?, self.embed_command(text)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub dim: usize,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_words(&self, tokens: &[String]) -> Result<WordTokens> {
        let tokens: Vec<String> = if tokens.is_empty() {
            vec![PAD_TOKEN.to_string()]
        } else {
            tokens.to_vec()
        };
        Ok(WordTokens {
            embeddings: tokens.iter().map(|t| hash_embedding(t, self.dim)).collect(),
            mask: tokens.iter().map(|t| t != PAD_TOKEN).collect(),
            tokens,
        })
    }

    fn embed_command(&self, text: &str) -> Result<CommandToken> {
        Ok(CommandToken {
            embedding: hash_embedding(&normalize_sentence(text), self.dim),
        })
    }
}

/// Adapter for an external encoder process.
///
/// The program receives `{"texts": [...]}` on stdin and must answer on
/// stdout with `{"embeddings": [[...], ...], "mask": [...]}`, one row per
/// input text.
#[derive(Debug, Clone)]
pub struct ProcessTextEncoder {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub dim: usize,
}

#[derive(Serialize)]
struct EncoderRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EncoderResponse {
    embeddings: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

impl ProcessTextEncoder {
    fn call(&self, texts: &[String]) -> Result<EncoderResponse> {
        let unavailable = |msg: String| Error::EncoderUnavailable(format!("{}: {msg}", self.program.display()));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| unavailable(e.to_string()))?;
        {
            let stdin = child.stdin.as_mut().ok_or_else(|| unavailable("no stdin".into()))?;
            serde_json::to_writer(&mut *stdin, &EncoderRequest { texts })?;
            stdin.write_all(b"\n").map_err(|e| unavailable(e.to_string()))?;
        }
        let out = child.wait_with_output().map_err(|e| unavailable(e.to_string()))?;
        if !out.status.success() {
            return Err(unavailable(format!("exited with {}", out.status)));
        }
        let resp: EncoderResponse =
            serde_json::from_slice(&out.stdout).map_err(|e| unavailable(format!("bad response: {e}")))?;
        if resp.embeddings.len() != texts.len()
            || resp.mask.len() != texts.len()
            || resp.embeddings.iter().any(|r| r.len() != self.dim)
        {
            return Err(unavailable("response shape does not match the request".into()));
        }
        Ok(resp)
    }
}

impl TextEncoder for ProcessTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_words(&self, tokens: &[String]) -> Result<WordTokens> {
        let resp = self.call(tokens)?;
        Ok(WordTokens {
            tokens: tokens.to_vec(),
            embeddings: resp.embeddings,
            mask: resp.mask,
        })
    }

    fn embed_command(&self, text: &str) -> Result<CommandToken> {
        let mut resp = self.call(&[normalize_sentence(text)])?;
        Ok(CommandToken {
            embedding: resp.embeddings.remove(0),
        })
    }
}

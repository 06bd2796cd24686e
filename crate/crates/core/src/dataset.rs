//! Dataset container.
//!
//! ```text
//! <dir>/manifest.json   format version, layout descriptor, sequence index, seeds
//! <dir>/texts.jsonl     one record per (sequence_id, frame span, text)
//! <dir>/<id>.hmot       per agent: 16-byte header + T×d little-endian f32
//! ```
//!
//! The record header is the magic `HMOT` followed by `version`, `T` and `d`
//! as little-endian `u32`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::FeatureLayout;
use crate::motion::{FrameBlock, MotionSequence};
use crate::synth::SynthConfig;

pub const RECORD_MAGIC: &[u8; 4] = b"HMOT";
pub const RECORD_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// One multi-agent sequence with its texts.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub script: String,
    pub text: String,
    pub window_texts: Vec<TextSpan>,
    pub agents: Vec<MotionSequence>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.agents.first().map(|a| a.len()).unwrap_or(0)
    }

    /// Text in effect at `frame`: the covering window span, else the sequence text.
    pub fn text_at(&self, frame: usize) -> &str {
        self.window_texts
            .iter()
            .find(|s| s.start <= frame && frame < s.end)
            .map(|s| s.text.as_str())
            .unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: Arc<FeatureLayout>,
    pub scenes: Vec<Scene>,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layout: FeatureLayout,
    sequences: Vec<SequenceEntry>,
    seeds: Option<SynthConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceEntry {
    id: String,
    script: String,
    file: String,
    layout: String,
    frames: usize,
    agents: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextRecord {
    sequence_id: String,
    /// `None` marks the whole-sequence text.
    span: Option<(usize, usize)>,
    text: String,
}

/// Writes frame matrices back to back, each preceded by its header.
pub fn write_records(mut w: impl Write, blocks: &[&FrameBlock]) -> Result<()> {
    for b in blocks {
        w.write_all(RECORD_MAGIC)?;
        w.write_all(&RECORD_VERSION.to_le_bytes())?;
        w.write_all(&(b.rows() as u32).to_le_bytes())?;
        w.write_all(&(b.dim() as u32).to_le_bytes())?;
        for &v in b.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records(mut r: impl Read) -> Result<Vec<FrameBlock>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes"));
    while pos < bytes.len() {
        if bytes.len() - pos < 16 {
            return Err(Error::Format("truncated record header".into()));
        }
        if &bytes[pos..pos + 4] != RECORD_MAGIC {
            return Err(Error::Format("bad record magic".into()));
        }
        let version = u32_at(pos + 4);
        if version != RECORD_VERSION {
            return Err(Error::Format(format!("unsupported record version {version}")));
        }
        let (rows, dim) = (u32_at(pos + 8) as usize, u32_at(pos + 12) as usize);
        pos += 16;
        let len = rows * dim * 4;
        if bytes.len() - pos < len {
            return Err(Error::Format("truncated record payload".into()));
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(FrameBlock::new(rows, dim, data)?);
        pos += len;
    }
    Ok(out)
}

pub fn write_record_file(path: &Path, blocks: &[&FrameBlock]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_records(&mut w, blocks)?;
    w.flush()?;
    Ok(())
}

pub fn read_record_file(path: &Path) -> Result<Vec<FrameBlock>> {
    read_records(BufReader::new(fs::File::open(path)?))
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut sequences = Vec::with_capacity(self.scenes.len());
        let mut texts = BufWriter::new(fs::File::create(dir.join("texts.jsonl"))?);
        for scene in &self.scenes {
            let file = format!("{}.hmot", scene.id);
            let blocks: Vec<&FrameBlock> = scene.agents.iter().map(|a| &a.frames).collect();
            write_record_file(&dir.join(&file), &blocks)?;
            sequences.push(SequenceEntry {
                id: scene.id.clone(),
                script: scene.script.clone(),
                file,
                layout: self.layout.name.clone(),
                frames: scene.frames(),
                agents: scene.agents.iter().map(|a| a.agent_id.clone()).collect(),
            });
            let mut line = |span, text: &str| -> Result<()> {
                let rec = TextRecord {
                    sequence_id: scene.id.clone(),
                    span,
                    text: text.to_string(),
                };
                serde_json::to_writer(&mut texts, &rec)?;
                texts.write_all(b"\n")?;
                Ok(())
            };
            line(None, &scene.text)?;
            for s in &scene.window_texts {
                line(Some((s.start, s.end)), &s.text)?;
            }
        }
        texts.flush()?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            layout: (*self.layout).clone(),
            sequences,
            seeds: self.synth.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        manifest.layout.validate()?;
        let layout = Arc::new(manifest.layout);
        let mut texts: Vec<TextRecord> = Vec::new();
        for line in BufReader::new(fs::File::open(dir.join("texts.jsonl"))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                texts.push(serde_json::from_str(&line)?);
            }
        }
        let mut scenes = Vec::with_capacity(manifest.sequences.len());
        for entry in manifest.sequences {
            if entry.layout != layout.name {
                return Err(Error::LayoutMismatch(format!(
                    "sequence '{}' uses layout '{}' in a '{}' container",
                    entry.id, entry.layout, layout.name
                )));
            }
            let blocks = read_record_file(&dir.join(&entry.file))?;
            if blocks.len() != entry.agents.len() {
                return Err(Error::Format(format!(
                    "sequence '{}' lists {} agents but holds {} records",
                    entry.id,
                    entry.agents.len(),
                    blocks.len()
                )));
            }
            let agents = blocks
                .into_iter()
                .zip(&entry.agents)
                .map(|(b, id)| {
                    if b.rows() != entry.frames {
                        return Err(Error::Format(format!("sequence '{}' frame count mismatch", entry.id)));
                    }
                    MotionSequence::new(layout.clone(), b, id.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut text = String::new();
            let mut window_texts = Vec::new();
            for rec in texts.iter().filter(|r| r.sequence_id == entry.id) {
                match rec.span {
                    None => text = rec.text.clone(),
                    Some((start, end)) => window_texts.push(TextSpan {
                        start,
                        end,
                        text: rec.text.clone(),
                    }),
                }
            }
            scenes.push(Scene {
                id: entry.id,
                script: entry.script,
                text,
                window_texts,
                agents,
            });
        }
        Ok(Dataset {
            layout,
            scenes,
            synth: manifest.seeds,
        })
    }

    /// Deterministic split: every `every`-th scene goes to the second part.
    pub fn split_every(&self, every: usize) -> (Dataset, Dataset) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.scenes.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                b.push(s.clone());
            } else {
                a.push(s.clone());
            }
        }
        let part = |scenes| Dataset {
            layout: self.layout.clone(),
            scenes,
            synth: self.synth.clone(),
        };
        (part(a), part(b))
    }
}

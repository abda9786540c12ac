// SPDX-License-Identifier: Apache-2.0

//! Synthetic capability-tagged task suites.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BOS, EOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuiteKind {
    Copy,
    Reverse,
    Sort,
    ModAdd,
    Majority,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 5] = [
        SuiteKind::Copy,
        SuiteKind::Reverse,
        SuiteKind::Sort,
        SuiteKind::ModAdd,
        SuiteKind::Majority,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Copy => "copy",
            SuiteKind::Reverse => "reverse",
            SuiteKind::Sort => "sort",
            SuiteKind::ModAdd => "modadd",
            SuiteKind::Majority => "majority",
        }
    }

    pub fn capability_tag(self) -> &'static str {
        match self {
            SuiteKind::Copy | SuiteKind::Reverse | SuiteKind::Sort => "transform",
            SuiteKind::ModAdd => "math",
            SuiteKind::Majority => "general",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown suite {name:?}")))
    }

    fn item<R: Rng>(self, rng: &mut R) -> (String, String) {
        const LETTERS: &[u8] = b"abcdefghijklmnop";
        let word = |rng: &mut R| -> String {
            let len = rng.random_range(3..=5);
            (0..len)
                .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
                .collect()
        };
        match self {
            SuiteKind::Copy => {
                let w = word(rng);
                (format!("copy: {w}="), w)
            }
            SuiteKind::Reverse => {
                let w = word(rng);
                let r: String = w.chars().rev().collect();
                (format!("rev: {w}="), r)
            }
            SuiteKind::Sort => {
                let w = word(rng);
                let mut c: Vec<char> = w.chars().collect();
                c.sort_unstable();
                (format!("sort: {w}="), c.into_iter().collect())
            }
            SuiteKind::ModAdd => {
                let (a, b) = (rng.random_range(0..10u32), rng.random_range(0..10u32));
                (format!("add: {a}+{b}="), ((a + b) % 10).to_string())
            }
            SuiteKind::Majority => {
                let w: String = (0..5).map(|_| if rng.random_bool(0.5) { 'a' } else { 'b' }).collect();
                let a = w.chars().filter(|&c| c == 'a').count();
                (format!("maj: {w}="), if a >= 3 { "a" } else { "b" }.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub id: String,
    pub prompt: String,
    pub reference: String,
    pub capability_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl SuiteItem {
    pub fn prompt_tokens(&self) -> Vec<u32> {
        encode_prompt(&self.prompt)
    }

    pub fn reference_tokens(&self) -> Vec<u32> {
        encode_reference(&self.reference)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub name: String,
    pub capability_tag: String,
    pub seed: u64,
    pub items: Vec<SuiteItem>,
}

impl TaskSuite {
    pub fn generate(kind: SuiteKind, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let items = (0..size)
            .map(|i| {
                let (prompt, reference) = kind.item(&mut rng);
                SuiteItem {
                    id: format!("{}-{seed}-{i}", kind.name()),
                    prompt,
                    reference,
                    capability_tag: kind.capability_tag().to_string(),
                    domain_tag: None,
                }
            })
            .collect();
        Self {
            name: kind.name().to_string(),
            capability_tag: kind.capability_tag().to_string(),
            seed,
            items,
        }
    }

    /// Concatenates suites; the capability tag is the first suite's when all agree, else `mixed`.
    pub fn merged(name: &str, suites: &[TaskSuite]) -> Self {
        let tag = match suites.first() {
            Some(first) if suites.iter().all(|s| s.capability_tag == first.capability_tag) => first.capability_tag.clone(),
            _ => "mixed".to_string(),
        };
        Self {
            name: name.to_string(),
            capability_tag: tag,
            seed: suites.first().map_or(0, |s| s.seed),
            items: suites.iter().flat_map(|s| s.items.iter().cloned()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Longest `prompt + reference` sequence, in tokens.
    pub fn max_sequence_len(&self) -> usize {
        self.items
            .iter()
            .map(|it| it.prompt_tokens().len() + it.reference_tokens().len())
            .max()
            .unwrap_or(0)
    }
}

/// `BOS` followed by the UTF-8 bytes.
pub fn encode_prompt(text: &str) -> Vec<u32> {
    std::iter::once(BOS).chain(text.bytes().map(u32::from)).collect()
}

/// UTF-8 bytes followed by `EOS`.
pub fn encode_reference(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).chain(std::iter::once(EOS)).collect()
}

/// Byte tokens back to text; special tokens are dropped.
pub fn decode_text(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn write_suite_jsonl(path: impl AsRef<Path>, suite: &TaskSuite) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in &suite.items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_suite_jsonl(path: impl AsRef<Path>, name: &str) -> Result<TaskSuite> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str::<SuiteItem>(&line)?);
    }
    let tag = items.first().map(|i| i.capability_tag.clone()).unwrap_or_default();
    Ok(TaskSuite {
        name: name.to_string(),
        capability_tag: tag,
        seed: 0,
        items,
    })
}

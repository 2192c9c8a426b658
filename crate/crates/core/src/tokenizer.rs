//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! special tokens.

use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

/// The 100-prompt corpus shipped with the crate.
pub const TOY_CORPUS: &str = include_str!("../data/prompts.txt");

/// `BOS` followed by the UTF-8 bytes of `text`.
pub fn encode(text: &str) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.bytes().map(u32::from))
        .collect()
}

/// Inverse of [`encode`]; special and out-of-range ids are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// One prompt per non-empty line.
pub fn parse_corpus(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let prompts = parse_corpus(&text);
    if prompts.is_empty() {
        return Err(Error::Config(format!(
            "corpus {} has no prompts",
            path.display()
        )));
    }
    Ok(prompts)
}

/// Encoded toy corpus.
pub fn toy_prompts() -> Vec<Vec<u32>> {
    parse_corpus(TOY_CORPUS).iter().map(|p| encode(p)).collect()
}

//! The 28-token grapheme alphabet: 26 lowercase letters, SPACE, apostrophe.
//!
//! Tokens are stored as `u8` indices 0..=27. A dedicated BOS token (index 28)
//! exists only as a decoder input and never appears in transcripts or on disk.

use crate::{Error, Result};

/// Number of output tokens (letters + SPACE + apostrophe).
pub const VOCAB: usize = 28;
/// Token index of the word delimiter.
pub const SPACE: u8 = 26;
/// Token index of the apostrophe (word contractions).
pub const APOSTROPHE: u8 = 27;
/// Decoder-input-only beginning-of-sequence token.
pub const BOS: u8 = 28;
/// Decoder embedding rows: the 28 output tokens plus BOS.
pub const INPUT_VOCAB: usize = 29;

/// Maps a token index to its character.
pub fn to_char(token: u8) -> char {
    match token {
        0..=25 => (b'a' + token) as char,
        SPACE => ' ',
        APOSTROPHE => '\'',
        _ => '?',
    }
}

/// Maps a character to its token index.
pub fn from_char(c: char) -> Result<u8> {
    match c {
        'a'..='z' => Ok(c as u8 - b'a'),
        ' ' => Ok(SPACE),
        '\'' => Ok(APOSTROPHE),
        _ => Err(Error::Data(format!("character {c:?} outside the 28-token alphabet"))),
    }
}

/// Encodes a string into token indices.
pub fn encode(text: &str) -> Result<Vec<u8>> {
    text.chars().map(from_char).collect()
}

/// Decodes token indices into a string.
pub fn decode(tokens: &[u8]) -> String {
    tokens.iter().map(|&t| to_char(t)).collect()
}

/// Counts SPACE tokens in a transcript.
pub fn space_count(tokens: &[u8]) -> usize {
    tokens.iter().filter(|&&t| t == SPACE).count()
}

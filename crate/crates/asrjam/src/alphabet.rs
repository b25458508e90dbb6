//! The character alphabet shared by transcripts, the recognizer, and the
//! language model: lowercase a–z, space, apostrophe, plus a CTC blank.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Characters the recognizer can emit, in index order. Blank is not a
/// character; it lives at index [`Alphabet::blank`].
pub const CHARS: [char; 28] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r', 's',
    't', 'u', 'v', 'w', 'x', 'y', 'z', ' ', '\'',
];

/// Fixed 28-character alphabet with a trailing blank symbol (29 classes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Alphabet;

impl Alphabet {
    /// Number of character symbols (excluding blank).
    pub fn len(&self) -> usize {
        CHARS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Total class count including the blank.
    pub fn classes(&self) -> usize {
        CHARS.len() + 1
    }

    /// Index of the CTC blank (last class).
    pub fn blank(&self) -> usize {
        CHARS.len()
    }

    pub fn char_to_index(&self, c: char) -> Option<usize> {
        match c {
            'a'..='z' => Some(c as usize - 'a' as usize),
            ' ' => Some(26),
            '\'' => Some(27),
            _ => None,
        }
    }

    pub fn index_to_char(&self, i: usize) -> Option<char> {
        CHARS.get(i).copied()
    }

    /// Encode a transcript into label indices. Errors on out-of-alphabet
    /// characters.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.char_to_index(c)
                    .ok_or_else(|| Error::domain(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter_map(|&i| self.index_to_char(i))
            .collect()
    }
}

/// A validated transcript: only alphabet characters, no leading or trailing
/// whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript(String);

impl Transcript {
    /// Build a transcript from already-normalized text. Errors if any
    /// character falls outside the alphabet or the text has edge whitespace.
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim() != text {
            return Err(Error::domain("transcript has leading/trailing whitespace"));
        }
        let alpha = Alphabet;
        for c in text.chars() {
            if alpha.char_to_index(c).is_none() {
                return Err(Error::domain(format!("character {c:?} not in alphabet")));
            }
        }
        Ok(Transcript(text))
    }

    /// Normalize arbitrary text (lowercase, drop punctuation except
    /// apostrophes, collapse whitespace) and build a transcript.
    pub fn normalized(text: &str) -> Self {
        Transcript(normalize_text(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn words(&self) -> Vec<&str> {
        self.0.split(' ').filter(|w| !w.is_empty()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        let alpha = Alphabet;
        self.0
            .chars()
            .filter_map(|c| alpha.char_to_index(c))
            .collect()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercase, strip punctuation except apostrophes, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let c = c.to_ascii_lowercase();
        if c.is_ascii_lowercase() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else if c.is_whitespace() {
            pending_space = true;
        }
        // everything else (digits, punctuation) is dropped
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_has_29_classes_with_trailing_blank() {
        let a = Alphabet;
        assert_eq!(a.classes(), 29);
        assert_eq!(a.blank(), 28);
        assert_eq!(a.char_to_index('a'), Some(0));
        assert_eq!(a.char_to_index('z'), Some(25));
        assert_eq!(a.char_to_index(' '), Some(26));
        assert_eq!(a.char_to_index('\''), Some(27));
        assert_eq!(a.char_to_index('!'), None);
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = Alphabet;
        let labels = a.encode("it's a test").unwrap();
        assert_eq!(a.decode(&labels), "it's a test");
    }

    #[test]
    fn normalize_strips_punctuation_and_case() {
        assert_eq!(normalize_text("Hello, World!"), "hello world");
        assert_eq!(normalize_text("  it's   OK. "), "it's ok");
        assert_eq!(normalize_text("123"), "");
    }

    #[test]
    fn transcript_rejects_out_of_alphabet() {
        assert!(Transcript::new("ok!").is_err());
        assert!(Transcript::new(" ok").is_err());
        assert!(Transcript::new("ok").is_ok());
    }
}

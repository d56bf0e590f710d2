//! Toy whitespace-piece tokenizer.
//!
//! Text is split into pieces made of a (possibly empty) run of whitespace
//! followed by a run of non-whitespace characters; a trailing run of pure
//! whitespace forms its own piece. Concatenating the pieces always yields the
//! original text, so the split is lossless.
//!
//! Ids `0..256` are reserved for raw bytes. Pieces seen in the corpus the
//! tokenizer was built from get ids `256..` in sorted order, which makes the
//! table independent of the order in which the corpus was supplied. Pieces
//! outside the table fall back to their UTF-8 bytes, so every string can be
//! encoded and the table never changes after construction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

/// Integer token id.
pub type TokenId = u32;

const BYTE_IDS: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("unknown token id {id} (max id is {max_id})")]
    UnknownTokenId { id: TokenId, max_id: TokenId },
    #[error("decoded byte sequence is not valid UTF-8")]
    InvalidUtf8,
}

/// Iterator over the lossless whitespace pieces of `text`.
pub fn pieces(text: &str) -> Pieces<'_> {
    Pieces { rest: text }
}

pub struct Pieces<'a> {
    rest: &'a str,
}

impl<'a> Iterator for Pieces<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        if self.rest.is_empty() {
            return None;
        }
        let ws_end = self
            .rest
            .char_indices()
            .find(|(_, c)| !c.is_whitespace())
            .map_or(self.rest.len(), |(i, _)| i);
        let word_end = self.rest[ws_end..]
            .char_indices()
            .find(|(_, c)| c.is_whitespace())
            .map_or(self.rest.len(), |(i, _)| ws_end + i);
        let (piece, rest) = self.rest.split_at(word_end);
        self.rest = rest;
        Some(piece)
    }
}

/// Frozen piece table plus byte fallback.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    pieces: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    /// A tokenizer with no piece table: every text encodes to its bytes.
    pub fn byte_level() -> Self {
        Self::default()
    }

    pub fn from_corpus<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for text in texts {
            for piece in pieces(text.as_ref()) {
                // single-byte pieces already have a byte id
                if piece.len() > 1 && !set.contains(piece) {
                    set.insert(String::from(piece));
                }
            }
        }
        let pieces: Vec<String> = set.into_iter().collect();
        let ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), BYTE_IDS + i as TokenId))
            .collect();
        Self { pieces, ids }
    }

    /// Largest valid token id.
    pub fn max_id(&self) -> TokenId {
        BYTE_IDS - 1 + self.pieces.len() as TokenId
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_IDS as usize + self.pieces.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        self.tokenize_into(text, &mut out);
        out
    }

    pub fn tokenize_into(&self, text: &str, out: &mut Vec<TokenId>) {
        for piece in pieces(text) {
            match self.ids.get(piece) {
                Some(&id) => out.push(id),
                None => out.extend(piece.bytes().map(TokenId::from)),
            }
        }
    }

    /// Number of tokens `text` encodes to.
    pub fn count(&self, text: &str) -> usize {
        pieces(text)
            .map(|p| if self.ids.contains_key(p) { 1 } else { p.len() })
            .sum()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(ids.len() * 4);
        for &id in ids {
            if id < BYTE_IDS {
                bytes.push(id as u8);
            } else {
                let piece = self
                    .pieces
                    .get((id - BYTE_IDS) as usize)
                    .ok_or(TokenizerError::UnknownTokenId { id, max_id: self.max_id() })?;
                bytes.extend_from_slice(piece.as_bytes());
            }
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn pieces_are_lossless() {
        let text = "  hello world\n\tfoo  ";
        let p: Vec<&str> = pieces(text).collect();
        assert_eq!(p, vec!["  hello", " world", "\n\tfoo", "  "]);
        assert_eq!(p.concat(), text);
    }

    #[test]
    fn empty_round_trip() {
        let tok = Tokenizer::from_corpus(["a b c"]);
        assert!(tok.tokenize("").is_empty());
        assert_eq!(tok.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn corpus_order_does_not_change_ids() {
        let a = Tokenizer::from_corpus(["alpha beta", "gamma"]);
        let b = Tokenizer::from_corpus(["gamma", "alpha beta"]);
        assert_eq!(a.tokenize("alpha beta gamma"), b.tokenize("alpha beta gamma"));
    }

    #[test]
    fn known_pieces_are_single_tokens() {
        let tok = Tokenizer::from_corpus(["the answer is five"]);
        assert_eq!(tok.tokenize("the answer is five").len(), 4);
        assert_eq!(tok.count("the answer is five"), 4);
    }

    #[test]
    fn unknown_pieces_fall_back_to_bytes() {
        let tok = Tokenizer::from_corpus(["known"]);
        let ids = tok.tokenize("known zz");
        assert_eq!(ids.len(), 1 + 3);
        assert_eq!(tok.detokenize(&ids).unwrap(), "known zz");
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let tok = Tokenizer::from_corpus(["one two"]);
        let max = tok.max_id();
        assert_eq!(
            tok.detokenize(&[0, max + 1]),
            Err(TokenizerError::UnknownTokenId { id: max + 1, max_id: max })
        );
    }

    #[test]
    fn split_utf8_is_invalid() {
        let tok = Tokenizer::byte_level();
        let ids = tok.tokenize("é");
        assert_eq!(ids.len(), 2);
        assert_eq!(tok.detokenize(&ids[..1]), Err(TokenizerError::InvalidUtf8));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_any_text(corpus in ".{0,40}", text in ".{0,60}") {
            let tok = Tokenizer::from_corpus([corpus.as_str()]);
            let ids = tok.tokenize(&text);
            proptest::prop_assert_eq!(tok.count(&text), ids.len());
            proptest::prop_assert_eq!(tok.detokenize(&ids).unwrap(), text);
        }
    }
}

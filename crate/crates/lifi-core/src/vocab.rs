//! Character-level vocabulary.
//!
//! Built from a corpus: the sorted set of distinct characters plus four
//! specials. Character-level tokens keep the stack free of any external
//! tokenizer; unknown characters map to `UNK` at encode time.

use std::collections::BTreeSet;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const N_SPECIALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    /// Collect every distinct character across the given texts, sorted, so
    /// construction is independent of text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Vocab {
            chars: set.into_iter().collect(),
        }
    }

    /// Rebuild from the character list stored in a checkpoint.
    pub fn from_chars(chars: &str) -> Self {
        Vocab {
            chars: chars.chars().collect(),
        }
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn size(&self) -> usize {
        N_SPECIALS + self.chars.len()
    }

    fn char_id(&self, c: char) -> usize {
        match self.chars.binary_search(&c) {
            Ok(i) => N_SPECIALS + i,
            Err(_) => UNK,
        }
    }

    /// Token ids for a text, without BOS/EOS framing.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    /// `[BOS, chars.., EOS]`, with the character span truncated so the whole
    /// sequence fits in `max_len`.
    pub fn encode_framed(&self, text: &str, max_len: usize) -> Vec<usize> {
        debug_assert!(max_len >= 2);
        let budget = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(budget + 2);
        ids.push(BOS);
        ids.extend(text.chars().take(budget).map(|c| self.char_id(c)));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id >= N_SPECIALS {
                    self.chars.get(id - N_SPECIALS).copied()
                } else {
                    None
                }
            })
            .collect()
    }
}

//! Whitespace word tokenizer with a per-character fallback.
//!
//! Layout of the id space:
//!
//! | ids | tokens |
//! |-----|--------|
//! | 0..4 | `<bos>`, `<eos>`, `<pad>`, `<sep>` |
//! | 4..192 | printable ASCII characters, each as a word-initial and a continuation token |
//! | 192, 193 | unknown character, word-initial and continuation |
//! | 194.. | whole words |
//!
//! A word missing from the vocabulary is spelled out with character tokens,
//! so encoding never fails and word boundaries survive a round trip.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<sep>"];
const FIRST_CHAR: u8 = b'!';
const LAST_CHAR: u8 = b'~';
const N_CHARS: usize = (LAST_CHAR - FIRST_CHAR + 1) as usize;
const CHAR_BASE: usize = SPECIALS.len();
const UNK_BEGIN: usize = CHAR_BASE + 2 * N_CHARS;
const UNK_CONT: usize = UNK_BEGIN + 1;
/// First id assigned to a whole word.
pub const WORD_BASE: usize = UNK_CONT + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i))
            .collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

fn char_id(c: char, begin: bool) -> usize {
    if c.is_ascii() && (FIRST_CHAR..=LAST_CHAR).contains(&(c as u8)) {
        CHAR_BASE + 2 * (c as u8 - FIRST_CHAR) as usize + usize::from(!begin)
    } else if begin {
        UNK_BEGIN
    } else {
        UNK_CONT
    }
}

impl Vocab {
    /// Collects every whitespace-separated word, in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Vocab::from(words.into_iter().map(String::from).collect::<Vec<_>>())
    }

    /// Total number of ids, including specials and character tokens.
    pub fn len(&self) -> usize {
        WORD_BASE + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.word_id(word) {
                Some(id) => ids.push(id),
                None => ids.extend(word.chars().enumerate().map(|(i, c)| char_id(c, i == 0))),
            }
        }
        ids
    }

    /// Inverse of [`Vocab::encode`]. Specials render as `<bos>` etc. and
    /// unknown characters as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut open = false;
        for &id in ids {
            match id {
                _ if id < CHAR_BASE => {
                    words.push(SPECIALS[id].to_string());
                    open = false;
                }
                _ if id < UNK_BEGIN => {
                    let off = id - CHAR_BASE;
                    let c = (FIRST_CHAR + (off / 2) as u8) as char;
                    if off.is_multiple_of(2) || !open {
                        words.push(c.to_string());
                    } else {
                        words.last_mut().unwrap().push(c);
                    }
                    open = true;
                }
                UNK_BEGIN | UNK_CONT => {
                    if id == UNK_BEGIN || !open {
                        words.push('\u{FFFD}'.to_string());
                    } else {
                        words.last_mut().unwrap().push('\u{FFFD}');
                    }
                    open = true;
                }
                _ => {
                    let w = self.words.get(id - WORD_BASE).map_or("<unk>", String::as_str);
                    words.push(w.to_string());
                    open = false;
                }
            }
        }
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let v = Vocab::build(["a b"]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn known_words_are_single_ids() {
        let v = Vocab::build(["a b", "b c"]);
        let ids = v.encode("a b");
        assert_eq!(ids, vec![WORD_BASE, WORD_BASE + 1]);
        assert_eq!(v.decode(&ids), "a b");
    }

    #[test]
    fn unseen_words_fall_back_to_characters() {
        let v = Vocab::build(["a"]);
        let ids = v.encode("a zebra a");
        assert_eq!(ids.len(), 7);
        assert_eq!(v.decode(&ids), "a zebra a");
        assert_eq!(v.decode(&v.encode("x y")), "x y");
    }

    #[test]
    fn serde_keeps_ids() {
        let v = Vocab::build(["dog cat"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.word_id("dog"), v.word_id("dog"));
    }
}

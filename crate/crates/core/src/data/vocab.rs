use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Character vocabulary: the four specials followed by the sorted set of
/// characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    /// Vocabulary over the characters of `alphabet`.
    pub fn from_alphabet(alphabet: &str) -> Result<Self> {
        Self::from_chars(alphabet.chars())
    }

    /// Vocabulary over every character appearing in `corpus`.
    pub fn from_corpus<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        Self::from_chars(corpus.into_iter().flat_map(str::chars))
    }

    fn from_chars(chars: impl Iterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = chars.collect();
        if set.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty input".into()));
        }
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + NUM_SPECIALS) as u32))
            .collect();
        Ok(Vocab { chars, index })
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    /// Printable symbol for an id.
    pub fn symbol(&self, id: u32) -> Option<String> {
        let id = id as usize;
        if id < NUM_SPECIALS {
            Some(SPECIAL_NAMES[id].to_string())
        } else {
            self.chars.get(id - NUM_SPECIALS).map(|c| c.to_string())
        }
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        s.chars().map(|c| self.id(c)).collect()
    }

    /// Inverse of [`encode`](Self::encode): stops at the first EOS and drops
    /// the other specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id as usize >= NUM_SPECIALS)
            .filter_map(|&id| self.chars.get(id as usize - NUM_SPECIALS))
            .collect()
    }
}

impl TryFrom<Vec<char>> for Vocab {
    type Error = Error;

    fn try_from(chars: Vec<char>) -> Result<Self> {
        let v = Vocab::from_chars(chars.iter().copied())?;
        if v.chars != chars {
            return Err(Error::Format("stored vocabulary is not sorted and unique".into()));
        }
        Ok(v)
    }
}

impl From<Vocab> for Vec<char> {
    fn from(v: Vocab) -> Self {
        v.chars
    }
}

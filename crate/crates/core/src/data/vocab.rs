use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::io::{read_file, write_file, Reader, Writer};
use super::scene::{Color, Shape, Size, POSITION_WORDS};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
pub const NUM_SPECIAL: usize = 3;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<unk>"];

/// Common English words with nothing to do with the rendered scenes.
const DISTRACTORS: [&str; 42] = [
    "apple", "river", "music", "table", "window", "garden", "coffee", "letter", "mountain",
    "pencil", "friend", "summer", "winter", "kitchen", "doctor", "market", "bridge", "candle",
    "forest", "island", "jacket", "ladder", "monkey", "number", "paper", "rabbit", "travel",
    "violin", "wallet", "basket", "camera", "dinner", "engine", "finger", "guitar", "hammer",
    "insect", "kettle", "mirror", "pillow", "rocket", "tunnel",
];

const MAGIC: &[u8; 4] = b"LBVC";
const VERSION: u16 = 1;

/// Bijective token ↔ id map. Ids 0..3 are `<pad>`, `<bos>`, `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The default vocabulary: specials, attribute words, then distractors.
    pub fn build() -> Self {
        let words = Shape::ALL
            .iter()
            .map(|s| s.word())
            .chain(Color::ALL.iter().map(|c| c.word()))
            .chain(Size::ALL.iter().map(|s| s.word()))
            .chain(POSITION_WORDS)
            .chain(DISTRACTORS)
            .map(str::to_owned)
            .collect();
        Self::with_words(words).expect("built-in word lists are distinct")
    }

    /// Specials followed by `words`, which must be distinct and non-special.
    pub fn with_words(words: Vec<String>) -> Result<Self> {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Argument("vocabulary must start with <pad>, <bos>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special_ids(&self) -> [usize; NUM_SPECIAL] {
        [PAD, BOS, UNK]
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Leading 8 bytes (LE) of SHA-256 over the NUL-terminated tokens.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    /// 16-bit fold of [`Vocabulary::hash`], as stored in dataset headers.
    pub fn checksum(&self) -> u16 {
        checksum_of(self.hash())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.put(MAGIC);
        w.u16(VERSION);
        w.u32(self.tokens.len() as u32);
        for t in &self.tokens {
            w.string(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let n = r.u32("token count")? as usize;
        let tokens = (0..n)
            .map(|_| r.string("token"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_tokens(tokens).map_err(|e| Error::format(10, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Folds a vocabulary hash to the 16-bit checksum stored in dataset headers.
pub fn checksum_of(hash: u64) -> u16 {
    (hash ^ (hash >> 16) ^ (hash >> 32) ^ (hash >> 48)) as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_and_size() {
        let v = Vocabulary::build();
        // specials + shapes + colors + sizes + positions + distractors
        assert_eq!(v.len(), 3 + 4 + 4 + 2 + 4 + 42);
        assert_eq!(v.len(), 59);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i)), Some(i));
        }
        assert_eq!(v.special_ids(), [0, 1, 2]);
        assert_eq!(v.id_or_unk("zebra"), UNK);
    }

    #[test]
    fn deterministic() {
        assert_eq!(Vocabulary::build(), Vocabulary::build());
        assert_eq!(Vocabulary::build().hash(), Vocabulary::build().hash());
    }

    #[test]
    fn file_round_trip_and_bad_magic() {
        let v = Vocabulary::build();
        let bytes = v.to_bytes();
        assert_eq!(Vocabulary::from_bytes(&bytes).unwrap(), v);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Vocabulary::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let err = Vocabulary::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocabulary::with_words(vec!["a".into(), "a".into()]).is_err());
    }
}

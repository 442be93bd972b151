//! Character-level vocabulary and the fixed sequence layout of the task.
//!
//! Every character is one token. Ids follow the listing order
//! `A..T, @, |, ',', >, _, -, 0, 1`, so `'A'` is 0 and `'1'` is 27.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 28;
pub const NUM_LETTERS: usize = 20;

pub const BOS: u8 = 20;
pub const ENTAILS: u8 = 21;
pub const COMMA: u8 = 22;
pub const IMPLIES: u8 = 23;
pub const PAD: u8 = 24;
pub const DASH: u8 = 25;
pub const FALSE: u8 = 26;
pub const TRUE: u8 = 27;

const SYMBOLS: [char; 8] = ['@', '|', ',', '>', '_', '-', '0', '1'];

/// Token id of a single character.
pub fn token_id(ch: char) -> Option<u8> {
    match ch {
        'A'..='T' => Some(ch as u8 - b'A'),
        _ => SYMBOLS
            .iter()
            .position(|&s| s == ch)
            .map(|i| (NUM_LETTERS + i) as u8),
    }
}

/// Character of a token id.
pub fn token_char(id: u8) -> Option<char> {
    let id = id as usize;
    if id < NUM_LETTERS {
        Some((b'A' + id as u8) as char)
    } else {
        SYMBOLS.get(id - NUM_LETTERS).copied()
    }
}

pub fn encode(text: &str) -> Result<Vec<u8>> {
    text.chars()
        .enumerate()
        .map(|(position, ch)| token_id(ch).ok_or(Error::Encoding { ch, position }))
        .collect()
}

pub fn decode(ids: &[u8]) -> Result<String> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            token_char(id).ok_or_else(|| Error::Input(format!("token id {id} at position {i} is outside the vocabulary")))
        })
        .collect()
}

pub fn is_letter(id: u8) -> bool {
    (id as usize) < NUM_LETTERS
}

/// Output format of the supervision target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Ordered reasoning chain followed by `-` and the decision.
    Cot,
    /// Decision token only.
    Binary,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cot" => Ok(Supervision::Cot),
            "binary" => Ok(Supervision::Binary),
            other => Err(Error::Config(format!("unknown supervision mode {other:?}"))),
        }
    }
}

/// Positions of every structural element in a tokenized example with `m` rules.
///
/// With `m = 5` and CoT supervision: `@` at 0, rule `j` head/`>`/tail at
/// `1+4j`, `2+4j`, `3+4j`, commas at `4+4j`, `|` at 20, query at 21..=23,
/// output slot `i` head/`>`/tail at `24+4i`, `25+4i`, `26+4i`, output commas
/// at `27+4i`, `-` at 43 and the decision at 44.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub m: usize,
    pub supervision: Supervision,
}

impl Layout {
    pub fn new(m: usize, supervision: Supervision) -> Self {
        Layout { m, supervision }
    }

    pub fn cot(m: usize) -> Self {
        Layout::new(m, Supervision::Cot)
    }

    /// `@` + rules + `|` + query.
    pub fn prompt_len(&self) -> usize {
        4 * self.m + 4
    }

    pub fn output_len(&self) -> usize {
        match self.supervision {
            Supervision::Cot => 4 * self.m + 1,
            Supervision::Binary => 1,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.output_len()
    }

    pub fn rule_head(&self, j: usize) -> usize {
        1 + 4 * j
    }

    pub fn rule_implies(&self, j: usize) -> usize {
        2 + 4 * j
    }

    pub fn rule_tail(&self, j: usize) -> usize {
        3 + 4 * j
    }

    pub fn entails(&self) -> usize {
        4 * self.m
    }

    pub fn query_head(&self) -> usize {
        4 * self.m + 1
    }

    pub fn query_tail(&self) -> usize {
        4 * self.m + 3
    }

    pub fn output_start(&self) -> usize {
        self.prompt_len()
    }

    pub fn slot_head(&self, i: usize) -> usize {
        self.output_start() + 4 * i
    }

    pub fn slot_implies(&self, i: usize) -> usize {
        self.output_start() + 4 * i + 1
    }

    pub fn slot_tail(&self, i: usize) -> usize {
        self.output_start() + 4 * i + 2
    }

    /// Comma after output slot `i`, for `i < m - 1`.
    pub fn slot_comma(&self, i: usize) -> usize {
        self.output_start() + 4 * i + 3
    }

    pub fn dash(&self) -> usize {
        self.seq_len() - 2
    }

    pub fn decision(&self) -> usize {
        self.seq_len() - 1
    }

    pub fn output_implies_positions(&self) -> Vec<usize> {
        (0..self.m).map(|i| self.slot_implies(i)).collect()
    }

    pub fn output_comma_positions(&self) -> Vec<usize> {
        (0..self.m.saturating_sub(1)).map(|i| self.slot_comma(i)).collect()
    }
}

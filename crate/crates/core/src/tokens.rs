//! Token vocabulary for the frame-aligned speaker streams.
//!
//! Each frame of a stream holds exactly one token: a character, the
//! continuation token (sustains the previous character), a silence token,
//! one of the prompt-range markers, or the prompt separator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense integer id used by the model's embedding tables.
pub type TokenId = usize;

/// One frame of a speaker stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    /// A character from [`CHAR_VOCAB`].
    Char(char),
    /// Continuation of the previous character within an active segment.
    Pad,
    /// Generic silence.
    Silence,
    /// Speaker-aware silence variants (ablation configuration).
    SilenceSpk1,
    SilenceSpk2,
    /// Marks the prompt range of speaker 1 / speaker 2 in the prefix.
    PromptSpk1,
    PromptSpk2,
    /// Separator between prompt blocks in the prefix.
    Sep,
}

/// Which silence representation the streams use.
///
/// The generic scheme is the default; the speaker-aware variant exists to
/// reproduce the silence-token ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScheme {
    #[default]
    GenericSilence,
    SpeakerAwareSilence,
}

/// The declared character vocabulary: lowercase, uppercase, digits, space,
/// and common punctuation. Characters outside this set are rejected at
/// encode time rather than folded into a catch-all token.
pub fn char_vocab() -> &'static [char] {
    use std::sync::OnceLock;
    static VOCAB: OnceLock<Vec<char>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v: Vec<char> = ('a'..='z').collect();
        v.extend('A'..='Z');
        v.extend('0'..='9');
        v.push(' ');
        v.extend(".,!?'\";:-()".chars());
        v
    })
}

const N_SPECIAL: usize = 7;

/// Total embedding-table size: special tokens plus the character set.
pub fn vocab_size() -> usize {
    N_SPECIAL + char_vocab().len()
}

/// Index of `c` within the character vocabulary.
pub fn char_index(c: char) -> Result<usize> {
    char_vocab()
        .iter()
        .position(|&v| v == c)
        .ok_or(Error::UnknownChar(c))
}

impl Token {
    pub fn id(self) -> Result<TokenId> {
        Ok(match self {
            Token::Silence => 0,
            Token::Pad => 1,
            Token::Sep => 2,
            Token::PromptSpk1 => 3,
            Token::PromptSpk2 => 4,
            Token::SilenceSpk1 => 5,
            Token::SilenceSpk2 => 6,
            Token::Char(c) => N_SPECIAL + char_index(c)?,
        })
    }

    pub fn from_id(id: TokenId) -> Option<Token> {
        Some(match id {
            0 => Token::Silence,
            1 => Token::Pad,
            2 => Token::Sep,
            3 => Token::PromptSpk1,
            4 => Token::PromptSpk2,
            5 => Token::SilenceSpk1,
            6 => Token::SilenceSpk2,
            _ => Token::Char(*char_vocab().get(id - N_SPECIAL)?),
        })
    }

    /// Active speech content: a character or its continuation.
    pub fn is_active(self) -> bool {
        matches!(self, Token::Char(_) | Token::Pad)
    }

    pub fn is_silence(self) -> bool {
        matches!(self, Token::Silence | Token::SilenceSpk1 | Token::SilenceSpk2)
    }

    /// Name used by the JSON debug serialization of streams.
    pub fn name(self) -> String {
        match self {
            Token::Char(c) => format!("{c}"),
            Token::Pad => "[P]".into(),
            Token::Silence => "[S]".into(),
            Token::SilenceSpk1 => "[S1]".into(),
            Token::SilenceSpk2 => "[S2]".into(),
            Token::PromptSpk1 => "[Spk1]".into(),
            Token::PromptSpk2 => "[Spk2]".into(),
            Token::Sep => "[SEP]".into(),
        }
    }
}

impl TokenScheme {
    /// The silence token this scheme uses for the given stream (0 or 1).
    pub fn silence_for(self, stream: usize) -> Token {
        match self {
            TokenScheme::GenericSilence => Token::Silence,
            TokenScheme::SpeakerAwareSilence => {
                if stream == 0 {
                    Token::SilenceSpk1
                } else {
                    Token::SilenceSpk2
                }
            }
        }
    }
}

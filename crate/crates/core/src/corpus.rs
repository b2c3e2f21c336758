//! Personalized preference data and its on-disk format.
//!
//! A dataset is a list of comparisons `(x, y1, y2, u)`: a prompt, a chosen
//! and a rejected response, and the annotating user. Token id 0 is the EOS
//! marker in every vocabulary, so the empty response is the singleton `[EOS]`
//! and the measured length of a response is `|y| - 1`.
//!
//! File format: UTF-8 lines, first a header `{"vocab_size":V,"num_users":M}`,
//! then one record `{"uid":..,"ut":[..],"x":[..],"y1":[..],"y2":[..]}` per
//! sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A vocabulary item. Id 0 is reserved as EOS.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub const EOS: Token = Token(0);

    pub fn is_eos(self) -> bool {
        self == Token::EOS
    }
}

/// User information `u = (u^t, u^p)`: optional textual tokens plus an
/// integer identifier. Identifier 0 denotes the unknown/generic user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInfo {
    pub user_id: u32,
    pub text_tokens: Vec<Token>,
}

impl UserInfo {
    pub const GENERIC_ID: u32 = 0;

    /// The unknown user: identifier 0 and no textual information.
    pub fn generic() -> Self {
        UserInfo {
            user_id: Self::GENERIC_ID,
            text_tokens: Vec::new(),
        }
    }

    pub fn with_id(user_id: u32) -> Self {
        UserInfo {
            user_id,
            text_tokens: Vec::new(),
        }
    }

    /// Same textual information, identifier forced to the generic user.
    pub fn id_forced_generic(&self) -> Self {
        UserInfo {
            user_id: Self::GENERIC_ID,
            text_tokens: self.text_tokens.clone(),
        }
    }
}

/// One pairwise comparison from the personalized dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferenceSample {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub user: UserInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub samples: Vec<PreferenceSample>,
    pub vocab_size: u32,
    pub num_users: u32,
}

/// True iff `y` ends with EOS and contains EOS at no earlier position.
pub fn response_well_formed(y: &[Token]) -> bool {
    match y.split_last() {
        Some((last, head)) => last.is_eos() && head.iter().all(|t| !t.is_eos()),
        None => false,
    }
}

impl PreferenceSample {
    fn validate(&self, vocab_size: u32, num_users: u32) -> Result<()> {
        let check_range = |field: &'static str, tokens: &[Token]| -> Result<()> {
            if let Some(t) = tokens.iter().find(|t| t.0 >= vocab_size) {
                return Err(Error::Validation {
                    field,
                    message: format!("token id {} out of range (vocab_size {})", t.0, vocab_size),
                });
            }
            Ok(())
        };
        check_range("x", &self.prompt)?;
        check_range("y1", &self.chosen)?;
        check_range("y2", &self.rejected)?;
        check_range("ut", &self.user.text_tokens)?;
        if self.prompt.iter().any(|t| t.is_eos()) {
            return Err(Error::Validation {
                field: "x",
                message: "prompt must not contain EOS".into(),
            });
        }
        if !response_well_formed(&self.chosen) {
            return Err(Error::Validation {
                field: "y1",
                message: "response must end with EOS and contain EOS nowhere earlier".into(),
            });
        }
        if !response_well_formed(&self.rejected) {
            return Err(Error::Validation {
                field: "y2",
                message: "response must end with EOS and contain EOS nowhere earlier".into(),
            });
        }
        if self.chosen == self.rejected {
            return Err(Error::Validation {
                field: "y1",
                message: "chosen and rejected responses are identical".into(),
            });
        }
        if self.user.user_id > num_users {
            return Err(Error::Validation {
                field: "uid",
                message: format!(
                    "user id {} exceeds num_users {}",
                    self.user.user_id, num_users
                ),
            });
        }
        Ok(())
    }
}

impl PreferenceDataset {
    pub fn new(samples: Vec<PreferenceSample>, vocab_size: u32, num_users: u32) -> Result<Self> {
        let dataset = PreferenceDataset {
            samples,
            vocab_size,
            num_users,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        for sample in &self.samples {
            sample.validate(self.vocab_size, self.num_users)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab_size: u32,
    num_users: u32,
}

#[derive(Serialize, Deserialize)]
struct Record {
    uid: u32,
    ut: Vec<u32>,
    x: Vec<u32>,
    y1: Vec<u32>,
    y2: Vec<u32>,
}

fn tokens(ids: &[u32]) -> Vec<Token> {
    ids.iter().copied().map(Token).collect()
}

fn ids(tokens: &[Token]) -> Vec<u32> {
    tokens.iter().map(|t| t.0).collect()
}

/// Loads a dataset, preserving sample order. Malformed lines are reported
/// with their 1-based line number; invariant violations name the field.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PreferenceDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header_line = header_line.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        samples.push(PreferenceSample {
            prompt: tokens(&record.x),
            chosen: tokens(&record.y1),
            rejected: tokens(&record.y2),
            user: UserInfo {
                user_id: record.uid,
                text_tokens: tokens(&record.ut),
            },
        });
    }

    PreferenceDataset::new(samples, header.vocab_size, header.num_users)
}

/// Writes a dataset so that `load_dataset(save_dataset(d)) == d`.
pub fn save_dataset(dataset: &PreferenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let header = Header {
        vocab_size: dataset.vocab_size,
        num_users: dataset.num_users,
    };
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(writer, "{}", serde_json::to_string(&header).expect("header json")).map_err(io_err)?;
    for sample in &dataset.samples {
        let record = Record {
            uid: sample.user.user_id,
            ut: ids(&sample.user.text_tokens),
            x: ids(&sample.prompt),
            y1: ids(&sample.chosen),
            y2: ids(&sample.rejected),
        };
        writeln!(writer, "{}", serde_json::to_string(&record).expect("record json"))
            .map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

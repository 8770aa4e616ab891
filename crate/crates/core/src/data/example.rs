use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four dataset shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    Classification,
    PairLabeled,
    PairScored,
    Triplet,
}

impl Schema {
    pub const ALL: [Schema; 4] = [
        Schema::Classification,
        Schema::PairLabeled,
        Schema::PairScored,
        Schema::Triplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::Classification => "classification",
            Schema::PairLabeled => "pair_labeled",
            Schema::PairScored => "pair_scored",
            Schema::Triplet => "triplet",
        }
    }

    /// Required TSV header.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Schema::Classification => &["id", "sentence", "label"],
            Schema::PairLabeled => &["id", "sentence1", "sentence2", "is_duplicate"],
            Schema::PairScored => &["id", "sentence1", "sentence2", "similarity"],
            Schema::Triplet => &["sent0", "sent1", "hard_neg"],
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Schema::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

pub const NUM_CLASSES: usize = 5;
pub const MAX_SCORE: f64 = 5.0;

/// One dataset row. Text is kept raw; tokenization happens at batching time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Example {
    Classification { id: String, text: String, label: usize },
    PairLabeled { id: String, a: String, b: String, label: u8 },
    PairScored { id: String, a: String, b: String, score: f64 },
    Triplet { anchor: String, positive: String, negative: String },
}

impl Example {
    pub fn schema(&self) -> Schema {
        match self {
            Example::Classification { .. } => Schema::Classification,
            Example::PairLabeled { .. } => Schema::PairLabeled,
            Example::PairScored { .. } => Schema::PairScored,
            Example::Triplet { .. } => Schema::Triplet,
        }
    }

    pub fn texts(&self) -> Vec<&str> {
        match self {
            Example::Classification { text, .. } => vec![text],
            Example::PairLabeled { a, b, .. } | Example::PairScored { a, b, .. } => vec![a, b],
            Example::Triplet {
                anchor,
                positive,
                negative,
            } => vec![anchor, positive, negative],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Example::Classification { label, .. } if label >= NUM_CLASSES => {
                Err(Error::Dataset(format!("label {label} outside 0..{}", NUM_CLASSES - 1)))
            }
            Example::PairLabeled { label, .. } if label > 1 => {
                Err(Error::Dataset(format!("is_duplicate {label} is not 0 or 1")))
            }
            Example::PairScored { score, .. } if !(0.0..=MAX_SCORE).contains(&score) => {
                Err(Error::Dataset(format!("similarity {score} outside [0, 5]")))
            }
            _ => Ok(()),
        }
    }

    /// TSV cells in schema column order.
    pub fn to_record(&self) -> Vec<String> {
        match self {
            Example::Classification { id, text, label } => vec![id.clone(), text.clone(), label.to_string()],
            Example::PairLabeled { id, a, b, label } => vec![id.clone(), a.clone(), b.clone(), label.to_string()],
            Example::PairScored { id, a, b, score } => vec![id.clone(), a.clone(), b.clone(), score.to_string()],
            Example::Triplet {
                anchor,
                positive,
                negative,
            } => vec![anchor.clone(), positive.clone(), negative.clone()],
        }
    }

    /// Parses the cells of one row; the caller has checked the column count.
    pub fn from_record(schema: Schema, cells: &[&str]) -> Result<Self> {
        let parse_int = |s: &str, col: &str| {
            s.trim()
                .parse::<i64>()
                .map_err(|_| Error::Dataset(format!("{col} {s:?} is not an integer")))
        };
        let ex = match schema {
            Schema::Classification => {
                let label = parse_int(cells[2], "label")?;
                Example::Classification {
                    id: cells[0].into(),
                    text: cells[1].into(),
                    label: usize::try_from(label)
                        .map_err(|_| Error::Dataset(format!("label {label} is negative")))?,
                }
            }
            Schema::PairLabeled => {
                let label = parse_int(cells[3], "is_duplicate")?;
                Example::PairLabeled {
                    id: cells[0].into(),
                    a: cells[1].into(),
                    b: cells[2].into(),
                    label: u8::try_from(label)
                        .map_err(|_| Error::Dataset(format!("is_duplicate {label} is not 0 or 1")))?,
                }
            }
            Schema::PairScored => Example::PairScored {
                id: cells[0].into(),
                a: cells[1].into(),
                b: cells[2].into(),
                score: cells[3]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Dataset(format!("similarity {:?} is not a number", cells[3])))?,
            },
            Schema::Triplet => Example::Triplet {
                anchor: cells[0].into(),
                positive: cells[1].into(),
                negative: cells[2].into(),
            },
        };
        ex.validate()?;
        Ok(ex)
    }
}

/// Checks that every example has the expected shape.
pub fn expect_schema(examples: &[Example], schema: Schema, what: &str) -> Result<()> {
    match examples.iter().find(|e| e.schema() != schema) {
        Some(e) => Err(Error::Dataset(format!(
            "{what} expects {schema} examples, found {}",
            e.schema()
        ))),
        None => Ok(()),
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the three rated aspects of an edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingDimension {
    Quality,
    Alignment,
    Preservation,
}

impl RatingDimension {
    pub const ALL: [RatingDimension; 3] = [
        RatingDimension::Quality,
        RatingDimension::Alignment,
        RatingDimension::Preservation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RatingDimension::Quality => "quality",
            RatingDimension::Alignment => "alignment",
            RatingDimension::Preservation => "preservation",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RatingDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RatingDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quality" => Ok(RatingDimension::Quality),
            "alignment" => Ok(RatingDimension::Alignment),
            "preservation" => Ok(RatingDimension::Preservation),
            other => Err(Error::Data(format!(
                "unknown dimension `{other}` (expected quality, alignment or preservation)"
            ))),
        }
    }
}

/// A regression target: one rated dimension or the overall mean of all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Quality,
    Alignment,
    Preservation,
    Overall,
}

impl Target {
    pub const ALL: [Target; 4] = [
        Target::Quality,
        Target::Alignment,
        Target::Preservation,
        Target::Overall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Quality => "quality",
            Target::Alignment => "alignment",
            Target::Preservation => "preservation",
            Target::Overall => "overall",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Target::ALL.get(code as usize).copied()
    }
}

impl From<RatingDimension> for Target {
    fn from(d: RatingDimension) -> Self {
        match d {
            RatingDimension::Quality => Target::Quality,
            RatingDimension::Alignment => Target::Alignment,
            RatingDimension::Preservation => Target::Preservation,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overall" => Ok(Target::Overall),
            other => other.parse::<RatingDimension>().map(Target::from).map_err(|_| {
                Error::Data(format!(
                    "unknown dimension `{other}` (expected quality, alignment, preservation or overall)"
                ))
            }),
        }
    }
}

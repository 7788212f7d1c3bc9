use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three disposal streams. Index order is fixed everywhere: trash 0,
/// recycle 1, compost 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WasteCategory {
    Trash,
    Recycle,
    Compost,
}

impl WasteCategory {
    pub const ALL: [WasteCategory; 3] = [
        WasteCategory::Trash,
        WasteCategory::Recycle,
        WasteCategory::Compost,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WasteCategory::Trash => "trash",
            WasteCategory::Recycle => "recycle",
            WasteCategory::Compost => "compost",
        }
    }

    pub fn valid_labels() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }
}

impl fmt::Display for WasteCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WasteCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel {
                label: s.to_string(),
                valid: Self::valid_labels(),
            })
    }
}

//! Reserved marker tokens and surface-string normalization.

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const SUBJ: &str = "<SUBJ>";
pub const REL: &str = "<REL>";
pub const OBJ: &str = "<OBJ>";
pub const DESC: &str = "<DESC>";
pub const SENT: &str = "<SENT>";
pub const FACT: &str = "<FACT>";
pub const MASK: &str = "<mask>";

/// All reserved literals, in a fixed order. The position doubles as the
/// reserved feature bucket of the marker.
pub const MARKERS: [&str; 7] = [SUBJ, REL, OBJ, DESC, SENT, FACT, MASK];

/// Position of `token` in [`MARKERS`], if it is one.
pub fn marker_index(token: &str) -> Option<usize> {
    MARKERS.iter().position(|m| *m == token)
}

/// Rejects text that embeds a reserved marker literal.
pub fn reject_markers(text: &str) -> Result<()> {
    match MARKERS.iter().find(|m| text.contains(**m)) {
        Some(marker) => Err(Error::ReservedMarker {
            marker,
            text: text.to_string(),
        }),
        None => Ok(()),
    }
}

/// Surface-string normalization used for alignment, polysemy lookup and
/// leakage detection: Unicode NFC, optionally followed by lowercasing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    #[serde(default)]
    pub case_fold: bool,
}

impl Normalizer {
    pub fn new(case_fold: bool) -> Self {
        Self { case_fold }
    }

    pub fn normalize(&self, text: &str) -> String {
        let nfc: String = text.nfc().collect();
        if self.case_fold {
            nfc.to_lowercase()
        } else {
            nfc
        }
    }
}

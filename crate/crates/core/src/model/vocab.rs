//! Output symbol inventory. Blank is always id 0; real symbols are 1..=V.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Blank symbol id, fixed by convention.
pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &symbols {
            if !seen.insert(s.clone()) {
                return Err(Error::Config(format!("duplicate vocab symbol {:?}", s)));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Config("vocab must contain at least one symbol".into()));
        }
        Ok(Vocab { symbols })
    }

    /// Synthetic vocab `s1..sN` used by the generated datasets.
    pub fn synthetic(n: usize) -> Self {
        Vocab { symbols: (1..=n).map(|i| format!("s{}", i)).collect() }
    }

    /// Number of non-blank symbols.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        if id == BLANK {
            return Some("<blk>");
        }
        self.symbols.get(id - 1).map(|s| s.as_str())
    }

    pub fn id_of(&self, sym: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == sym).map(|i| i + 1)
    }

    /// Index of a non-blank symbol in the NNLM output space (0..V-1; SOS = V).
    pub fn nnlm_index(&self, id: usize) -> Result<usize> {
        if id == BLANK || id > self.size() {
            return Err(Error::Contract(format!("symbol id {} not a non-blank symbol", id)));
        }
        Ok(id - 1)
    }

    pub fn sos_nnlm_index(&self) -> usize {
        self.size()
    }

    /// One symbol per line; the symbol on the first line gets id 1, blank is
    /// implicit at id 0.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let symbols: Vec<String> = text.lines().map(|l| l.to_string()).filter(|l| !l.is_empty()).collect();
        Vocab::new(symbols)
    }
}

//! Bilingual dictionaries: ordered `(source, target)` word pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictionaryRole {
    Train,
    Test,
}

/// Ordered translation pairs without `(source, target)` duplicates. A source
/// word may appear with several targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BilingualDictionary {
    pairs: Vec<(String, String)>,
    role: DictionaryRole,
    duplicates_dropped: usize,
}

impl BilingualDictionary {
    pub fn new<I, S, T>(pairs: I, role: DictionaryRole) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut duplicates_dropped = 0;
        for (s, t) in pairs {
            let pair = (s.into(), t.into());
            if seen.insert(pair.clone()) {
                out.push(pair);
            } else {
                duplicates_dropped += 1;
            }
        }
        Self {
            pairs: out,
            role,
            duplicates_dropped,
        }
    }

    /// Reads a UTF-8 TSV file with one `source<TAB>target` pair per line.
    pub fn load(path: impl AsRef<Path>, role: DictionaryRole) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path, role)
    }

    pub fn parse(text: &str, path: &Path, role: DictionaryRole) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(s), Some(t), None) if !s.trim().is_empty() && !t.trim().is_empty() => {
                    pairs.push((s.trim().to_string(), t.trim().to_string()))
                }
                _ => {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        "expected exactly one TAB separating two words",
                    ))
                }
            }
        }
        let dict = Self::new(pairs, role);
        if dict.duplicates_dropped > 0 {
            warn!(
                "{}: dropped {} duplicate pairs",
                path.display(),
                dict.duplicates_dropped
            );
        }
        Ok(dict)
    }

    pub fn to_tsv(&self) -> String {
        self.pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn role(&self) -> DictionaryRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    /// Source words with all their gold targets, in order of first appearance.
    pub fn grouped(&self) -> Vec<(String, Vec<String>)> {
        let mut order: Vec<(String, Vec<String>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (s, t) in &self.pairs {
            match slot.get(s.as_str()) {
                Some(&i) => order[i].1.push(t.clone()),
                None => {
                    slot.insert(s, order.len());
                    order.push((s.clone(), vec![t.clone()]));
                }
            }
        }
        order
    }

    pub fn filter<F>(&self, mut keep: F) -> Self
    where
        F: FnMut(&str, &str) -> bool,
    {
        Self {
            pairs: self.pairs.iter().filter(|(s, t)| keep(s, t)).cloned().collect(),
            role: self.role,
            duplicates_dropped: 0,
        }
    }

    pub fn with_role(mut self, role: DictionaryRole) -> Self {
        self.role = role;
        self
    }
}

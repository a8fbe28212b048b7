//! Fold manifests: plain text, one `<fold> <recording-id>` pair per line,
//! `#` comments allowed.

use std::collections::BTreeMap;
use std::path::Path;

use svrnn_core::data::Sequence;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FoldManifest {
    assignment: BTreeMap<String, usize>,
}

impl FoldManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let (Some(fold), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected `<fold> <recording-id>`".into()));
            };
            let fold: usize = fold.parse().map_err(|_| err(format!("fold `{fold}` is not an integer")))?;
            if assignment.insert(id.to_string(), fold).is_some() {
                return Err(err(format!("recording `{id}` listed twice")));
            }
        }
        Ok(FoldManifest { assignment })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.assignment.values().copied().collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Splits into (every other fold, fold `k`). Unlisted recordings are an
    /// error.
    pub fn split(&self, dataset: &[Sequence], k: usize) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
        if !self.folds().contains(&k) {
            return Err(Error::Usage(format!("fold {k} is not in the manifest")));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for seq in dataset {
            match self.fold_of(&seq.id) {
                Some(f) if f == k => test.push(seq.clone()),
                Some(_) => train.push(seq.clone()),
                None => return Err(Error::Usage(format!("recording `{}` is not in the fold manifest", seq.id))),
            }
        }
        Ok((train, test))
    }
}

//! Query datasets on disk: one `<split>_<type>.jsonl` file per non-empty set
//! plus a `stats.tsv` summary.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::query::{self, ParseError, QueryInstance, QueryType};
use crate::sampler::Split;
use crate::seeding;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: ParseError },
    #[error("{path}: instance of type {found} in a {expected} file")]
    WrongType {
        path: String,
        expected: QueryType,
        found: QueryType,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryDataset {
    sets: BTreeMap<(Split, QueryType), Vec<QueryInstance>>,
}

pub fn file_name(split: Split, qtype: QueryType) -> String {
    format!("{}_{}.jsonl", split.name(), qtype.name())
}

impl QueryDataset {
    pub fn insert(&mut self, split: Split, qtype: QueryType, instances: Vec<QueryInstance>) {
        self.sets.insert((split, qtype), instances);
    }

    pub fn get(&self, split: Split, qtype: QueryType) -> &[QueryInstance] {
        self.sets.get(&(split, qtype)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn keys(&self) -> impl Iterator<Item = (Split, QueryType)> + '_ {
        self.sets.keys().copied()
    }

    /// All instances of one split, in type order.
    pub fn split(&self, split: Split) -> Vec<QueryInstance> {
        self.sets
            .iter()
            .filter(|((s, _), _)| *s == split)
            .flat_map(|(_, v)| v.iter().cloned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over file names and contents in key order.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for (&(split, qtype), instances) in &self.sets {
            buf.extend_from_slice(file_name(split, qtype).as_bytes());
            buf.push(0);
            buf.extend_from_slice(query::to_jsonl(instances).as_bytes());
        }
        seeding::sha256_hex(&buf)
    }

    /// Per `(split, type)` counts and mean answer-set sizes.
    pub fn stats_tsv(&self) -> String {
        let mut out = String::from("split\ttype\tcount\tmean_easy\tmean_hard\n");
        for (&(split, qtype), instances) in &self.sets {
            let n = instances.len().max(1) as f64;
            let easy: usize = instances.iter().map(|i| i.easy.len()).sum();
            let hard: usize = instances.iter().map(|i| i.hard.len()).sum();
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\n",
                split,
                qtype,
                instances.len(),
                easy as f64 / n,
                hard as f64 / n
            ));
        }
        out
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (&(split, qtype), instances) in &self.sets {
            let path = dir.join(file_name(split, qtype));
            fs::write(&path, query::to_jsonl(instances)).map_err(io_err(&path))?;
        }
        let stats = dir.join("stats.tsv");
        fs::write(&stats, self.stats_tsv()).map_err(io_err(&stats))?;
        Ok(())
    }

    /// Reads whichever `<split>_<type>.jsonl` files exist in `dir`.
    pub fn read_dir(dir: &Path) -> Result<Self, DatasetError> {
        let mut ds = QueryDataset::default();
        for split in Split::ALL {
            for qtype in QueryType::ALL {
                let path = dir.join(file_name(split, qtype));
                if !path.exists() {
                    continue;
                }
                let shown = path.display().to_string();
                let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io {
                    path: shown.clone(),
                    source,
                })?;
                let instances = query::parse_jsonl(&text).map_err(|source| DatasetError::Parse {
                    path: shown.clone(),
                    source,
                })?;
                if let Some(bad) = instances.iter().find(|i| i.qtype != qtype) {
                    return Err(DatasetError::WrongType {
                        path: shown,
                        expected: qtype,
                        found: bad.qtype,
                    });
                }
                ds.insert(split, qtype, instances);
            }
        }
        Ok(ds)
    }
}

//! Pseudolabel store: teacher embeddings of unlabeled images, keyed by id.
//!
//! On disk a store is a directory of `<id>.tnsr` unit vectors, an
//! `index.tsv` of `<id>\t<relative path>` lines, and `source.jsonl`, the
//! image manifest the labels were computed from (paths made absolute).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::dataio::{read_manifest, write_manifest, ImageRecord, Manifest};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Tensor};
use crate::tnsr;

pub const UNIT_NORM_TOL: f64 = 1e-5;
pub const INDEX_FILE: &str = "index.tsv";
pub const SOURCE_FILE: &str = "source.jsonl";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudolabelStore {
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    lookup: HashMap<String, usize>,
}

fn check_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.chars().any(|c| c == '/' || c == '\\' || c == '\t' || c.is_control());
    if bad {
        return Err(Error::dataset(format!("id {id:?} cannot name a store entry")));
    }
    Ok(())
}

impl PseudolabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        check_id(&id)?;
        if self.lookup.contains_key(&id) {
            return Err(Error::dataset(format!("duplicate pseudolabel id {id:?}")));
        }
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::dataset(format!(
                "pseudolabel {id:?} has norm {norm}, expected unit norm"
            )));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.lookup
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::dataset(format!("no pseudolabel for id {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Writes the vectors and index; `source` (if any) is recorded so the
    /// student stage can find the images again.
    pub fn save(&self, dir: &Path, source: Option<&Manifest>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = String::new();
        for (id, v) in self.iter() {
            let rel = format!("{id}.tnsr");
            tnsr::write_tnsr(&dir.join(&rel), &Tensor::new(vec![v.len()], v.to_vec())?)?;
            index.push_str(&format!("{id}\t{rel}\n"));
        }
        let index_path = dir.join(INDEX_FILE);
        std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
        if let Some(m) = source {
            let records: Vec<ImageRecord> = m
                .records
                .iter()
                .map(|r| {
                    let abs = std::path::absolute(m.resolve(r)).map_err(|e| Error::io(&m.resolve(r), e))?;
                    Ok(ImageRecord {
                        path: abs.display().to_string(),
                        ..r.clone()
                    })
                })
                .collect::<Result<_>>()?;
            write_manifest(&dir.join(SOURCE_FILE), &records)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut store = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, rel) = line.split_once('\t').ok_or_else(|| {
                Error::dataset(format!("{} line {}: expected <id>\\t<path>", index_path.display(), n + 1))
            })?;
            let t = tnsr::read_tnsr(&dir.join(rel))?;
            if t.dims().len() != 1 {
                return Err(Error::format(6, format!("pseudolabel {id:?} is not a vector")));
            }
            store.insert(id, t.into_data())?;
        }
        Ok(store)
    }

    /// The image manifest recorded by [`PseudolabelStore::save`].
    pub fn source_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(SOURCE_FILE);
        Ok(Manifest {
            root: PathBuf::new(),
            records: read_manifest(&path)?,
        })
    }
}

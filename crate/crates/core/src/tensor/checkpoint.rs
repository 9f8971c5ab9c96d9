//! On-disk parameter container: `meta.json` plus one little-endian `f64`
//! file per parameter at `<registry path>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ParamStore, Tensor};

pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub group: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub parameters: Vec<ParamMeta>,
    /// Step counter of each optimizer, keyed by optimizer name.
    pub optimizer_steps: BTreeMap<String, u64>,
}

fn param_file(name: &str) -> String {
    format!("{name}.bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save<S: Scalar>(
    dir: &Path,
    store: &ParamStore<S>,
    optimizer_steps: &BTreeMap<String, u64>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut parameters = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        let file = param_file(name);
        let path: PathBuf = dir.join(&file);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let bytes: Vec<u8> = p
            .value
            .data()
            .iter()
            .flat_map(|v| v.to_f64_lossy().to_le_bytes())
            .collect();
        fs::write(&path, bytes).map_err(io_err(&path))?;
        parameters.push(ParamMeta {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            group: p.group.clone(),
            file,
        });
    }
    let meta = CheckpointMeta {
        parameters,
        optimizer_steps: optimizer_steps.clone(),
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

pub fn load<S: Scalar>(dir: &Path) -> Result<(ParamStore<S>, BTreeMap<String, u64>)> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let mut store = ParamStore::new();
    for p in &meta.parameters {
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "{}: truncated file",
                path.display()
            )));
        }
        let data: Vec<S> = bytes
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let value = Tensor::new(p.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
        store.insert(&p.name, value, p.trainable, &p.group);
    }
    Ok((store, meta.optimizer_steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new();
        store.insert(
            "layer0/w1",
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
            true,
            "w",
        );
        store.insert(
            "prior/z",
            Tensor::row_vector(vec![0.1, 0.2]),
            false,
            "a_micro",
        );
        let mut steps = BTreeMap::new();
        steps.insert("w".to_string(), 7);
        save(dir.path(), &store, &steps).unwrap();
        assert!(dir.path().join("layer0/w1.bin").exists());
        let (back, back_steps) = load::<f64>(dir.path()).unwrap();
        assert_eq!(back, store);
        assert_eq!(back_steps, steps);
    }
}

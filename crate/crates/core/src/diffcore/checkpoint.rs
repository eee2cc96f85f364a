//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/manifest.json   {format, version, meta, params: [{name, shape, dtype, offset, trainable}]}
//! <dir>/params.bin      little-endian f32 values in manifest order
//! <dir>/adam.json       optional optimizer manifest (same entry scheme, m.* then v.*)
//! <dir>/adam.bin
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{state_err, Error, Result};

pub const FORMAT_NAME: &str = "sleepnet-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<Entry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamManifest {
    format: String,
    version: u32,
    step_count: u64,
    config: AdamConfig,
    moments: Vec<Entry>,
}

fn pack<'a, F: Scalar>(items: impl Iterator<Item = (&'a str, &'a [usize], &'a [F], bool)>) -> (Vec<Entry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, shape, data, trainable) in items {
        entries.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            trainable,
        });
        for v in data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    (entries, blob)
}

fn unpack<F: Scalar>(entry: &Entry, blob: &[u8]) -> Result<Tensor<F>> {
    if entry.dtype != "f32" {
        return Err(Error::Format(format!("parameter `{}` has unsupported dtype `{}`", entry.name, entry.dtype)));
    }
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * n;
    let bytes = blob.get(start..end).ok_or_else(|| {
        Error::Format(format!(
            "parameter `{}` needs bytes {start}..{end} but the blob holds {}",
            entry.name,
            blob.len()
        ))
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&entry.shape, data)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn save<F: Scalar>(dir: &Path, store: &ParamStore<F>, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (params, blob) = pack(store.iter().map(|p| (p.name.as_str(), p.value.shape(), p.value.data(), p.trainable)));
    let manifest = Manifest { format: FORMAT_NAME.into(), version: FORMAT_VERSION, meta, params };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint directory; a missing directory is a state error.
pub fn load<F: Scalar>(dir: &Path) -> Result<(ParamStore<F>, serde_json::Value)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(state_err!("checkpoint not found: {}", dir.display()));
    }
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = fs::read(dir.join("params.bin"))?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let id = store.add(&e.name, unpack(e, &blob)?)?;
        store.get_mut(id).trainable = e.trainable;
    }
    Ok((store, manifest.meta))
}

pub fn save_adam<F: Scalar>(dir: &Path, state: &AdamState<F>, store: &ParamStore<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<(String, &[usize])> = store.iter().map(|p| (p.name.clone(), p.value.shape())).collect();
    let m_names: Vec<String> = names.iter().map(|(n, _)| format!("m.{n}")).collect();
    let v_names: Vec<String> = names.iter().map(|(n, _)| format!("v.{n}")).collect();
    let items = m_names
        .iter()
        .zip(&names)
        .zip(&state.m)
        .map(|((n, (_, s)), d)| (n.as_str(), *s, d.as_slice(), true))
        .chain(v_names.iter().zip(&names).zip(&state.v).map(|((n, (_, s)), d)| (n.as_str(), *s, d.as_slice(), true)));
    let (moments, blob) = pack(items);
    let manifest = AdamManifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        step_count: state.step_count,
        config: state.config,
        moments,
    };
    fs::write(dir.join("adam.json"), serde_json::to_string_pretty(&manifest).expect("serializes"))?;
    fs::write(dir.join("adam.bin"), blob)?;
    Ok(())
}

pub fn load_adam<F: Scalar>(dir: &Path, store: &ParamStore<F>) -> Result<AdamState<F>> {
    let manifest: AdamManifest = read_json(&dir.join("adam.json"))?;
    let blob = fs::read(dir.join("adam.bin"))?;
    let mut state = AdamState::new(manifest.config, store);
    state.step_count = manifest.step_count;
    for e in &manifest.moments {
        let (slot, name) = match e.name.split_once('.') {
            Some(("m", rest)) => (&mut state.m, rest),
            Some(("v", rest)) => (&mut state.v, rest),
            _ => return Err(Error::Format(format!("unexpected optimizer entry `{}`", e.name))),
        };
        let id = store
            .id(name)
            .ok_or_else(|| Error::Format(format!("optimizer entry for unknown parameter `{name}`")))?;
        slot[id.0] = unpack::<F>(e, &blob)?.into_data();
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_and_adam_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a.w", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()).unwrap();
        s.add("b", Tensor::new(&[3], vec![0.5, 0.25, -1.0]).unwrap()).unwrap();
        s.set_trainable("b", false);
        save(dir.path(), &s, serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = load::<f32>(dir.path()).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back.hash_prefixes(&[""]), s.hash_prefixes(&[""]));
        assert!(!back.by_name("b").unwrap().trainable);

        s.get_mut(a).grad = Some(vec![0.1, 0.2, 0.3, 0.4]);
        s.zero_grads();
        s.get_mut(a).grad = Some(vec![0.1, 0.2, 0.3, 0.4]);
        let mut st = AdamState::new(AdamConfig::default(), &s);
        st.step(&mut s).unwrap();
        save_adam(dir.path(), &st, &s).unwrap();
        let st2 = load_adam::<f32>(dir.path(), &s).unwrap();
        assert_eq!(st2.step_count, 1);
        assert_eq!(st2.first_moment(0), st.first_moment(0));
        assert_eq!(st2.second_moment(0), st.second_moment(0));
    }

    #[test]
    fn missing_checkpoint_is_state_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = load::<f32>(&dir.path().join("nope.ckpt"));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[8])).unwrap();
        save(dir.path(), &s, serde_json::Value::Null).unwrap();
        fs::write(dir.path().join("params.bin"), [0u8; 10]).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format(_))));
    }
}

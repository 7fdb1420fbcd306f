//! Checkpoint file format.
//!
//! Layout: magic `DDB1`, a u64 little-endian byte length, a UTF-8 JSON
//! manifest (spec plus ordered entry names/shapes/dtype), then the raw
//! little-endian f64 payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DDB1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: ModelSpec,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        entries.push(Entry { name, shape: t.shape().to_vec(), dtype: "f64".into(), trainable: true });
        tensors.push(t);
    }
    for (name, t) in model.named_buffers() {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            trainable: false,
        });
        tensors.push(t);
    }
    let manifest = Manifest { version: 1, spec: model.spec().clone(), entries };
    let json = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            String::from_utf8_lossy(&magic),
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact(&mut r, &mut len_bytes, "manifest length")?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }

    let mut model = Model::build(&manifest.spec, 0)?;
    let expected: Vec<(String, Vec<usize>, bool)> = {
        let mut v: Vec<(String, Vec<usize>, bool)> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), true))
            .collect();
        v.extend(
            model
                .named_buffers()
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), false)),
        );
        v
    };
    if manifest.entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "entry count {} does not match the model's {} tensors",
            manifest.entries.len(),
            expected.len()
        )));
    }
    for (e, (name, shape, trainable)) in manifest.entries.iter().zip(&expected) {
        if &e.name != name || &e.shape != shape || e.trainable != *trainable {
            return Err(Error::Checkpoint(format!(
                "entry '{}' (shape {:?}) does not match expected '{}' (shape {:?})",
                e.name, e.shape, name, shape
            )));
        }
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("entry '{}': unsupported dtype {}", e.name, e.dtype)));
        }
    }

    let n_params = model.named_params().len();
    {
        let mut sinks = model.named_params_mut();
        for (i, e) in manifest.entries.iter().take(n_params).enumerate() {
            fill_tensor(&mut r, sinks[i].1, &e.name)?;
        }
    }
    {
        let mut sinks = model.named_buffers_mut();
        for (i, e) in manifest.entries.iter().skip(n_params).enumerate() {
            fill_tensor(&mut r, sinks[i].1, &e.name)?;
        }
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}

fn fill_tensor(r: &mut impl Read, t: &mut crate::tensor::Tensor, name: &str) -> Result<()> {
    let mut bytes = vec![0u8; t.numel() * 8];
    read_exact(r, &mut bytes, name)?;
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

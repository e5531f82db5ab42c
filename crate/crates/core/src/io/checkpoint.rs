//! On-disk checkpoints: a `manifest.txt` of `key = value` lines naming every
//! tensor with its shape and byte offset, and `tensors.bin`, all tensors as
//! one little-endian f32 array in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const MANIFEST: &str = "manifest.txt";
pub const TENSORS: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to evaluate a model or continue its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: usize,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `model` (and optimizer moments, if given) into `dir`, creating it.
pub fn checkpoint_save(
    model: &Model<f32>,
    optimizer: Option<&OptimizerState>,
    seed: u64,
    step: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = serde_json::to_string(model.config())?;
    let mut manifest = String::new();
    writeln!(manifest, "format = {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "config = {config}").unwrap();
    writeln!(manifest, "seed = {seed}").unwrap();
    writeln!(manifest, "step = {step}").unwrap();

    let mut tensors: Vec<(String, &Tensor<f32>)> = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| (format!("param.{n}"), p))
        .collect();
    if let Some(opt) = optimizer {
        writeln!(manifest, "optimizer_updates = {}", opt.updates).unwrap();
        for (prefix, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
            tensors.extend(
                model
                    .names()
                    .iter()
                    .zip(moments)
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
    }
    let total: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut bytes = Vec::with_capacity(total);
    for (name, t) in &tensors {
        writeln!(manifest, "tensor = {name} {} {}", shape_str(t.shape()), bytes.len()).unwrap();
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    writeln!(manifest, "bytes = {}", bytes.len()).unwrap();
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let tpath = dir.join(TENSORS);
    fs::write(&tpath, bytes).map_err(|e| Error::io(&tpath, e))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{MANIFEST} line {line}: {msg}"))
}

/// Reads a checkpoint written by [`checkpoint_save`].
pub fn checkpoint_load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut format = None;
    let mut config = None;
    let (mut seed, mut step, mut updates, mut expected) = (None, None, None, None);
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| parse_err(ln, "expected `key = value`"))?;
        let num = |v: &str| v.parse::<u64>().map_err(|e| parse_err(ln, e));
        match key {
            "format" => format = Some(num(value)?),
            "config" => config = Some(serde_json::from_str::<ModelConfig>(value).map_err(|e| parse_err(ln, e))?),
            "seed" => seed = Some(num(value)?),
            "step" => step = Some(num(value)? as usize),
            "optimizer_updates" => updates = Some(num(value)?),
            "bytes" => expected = Some(num(value)? as usize),
            "tensor" => {
                let parts: Vec<&str> = value.split(' ').collect();
                let [name, shape, offset] = parts[..] else {
                    return Err(parse_err(ln, "expected `tensor = name shape offset`"));
                };
                let shape = shape
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|e| parse_err(ln, e)))
                    .collect::<Result<Vec<_>>>()?;
                entries.push(Entry {
                    name: name.to_string(),
                    shape,
                    offset: num(offset)? as usize,
                });
            }
            other => return Err(parse_err(ln, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::Checkpoint(format!("{MANIFEST} has no `{k}` entry"));
    let format = format.ok_or_else(|| missing("format"))?;
    if format != FORMAT_VERSION as u64 {
        return Err(Error::Checkpoint(format!(
            "format version {format} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let config = config.ok_or_else(|| missing("config"))?;
    let expected = expected.ok_or_else(|| missing("bytes"))?;

    let tpath = dir.join(TENSORS);
    let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {expected}",
            tpath.display(),
            bytes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let len = e.shape.iter().product::<usize>() * 4;
        let end = e
            .offset
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor {} needs bytes {}..{} but the file holds {}",
                    e.name,
                    e.offset,
                    e.offset + len,
                    bytes.len()
                ))
            })?;
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }

    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in tensors {
        let (section, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("tensor name {name:?} has no section prefix")))?;
        match section {
            "param" => params.push((rest.to_string(), t)),
            "adam_m" => m.push(t),
            "adam_v" => v.push(t),
            _ => return Err(Error::Checkpoint(format!("unknown tensor section in {name:?}"))),
        }
    }
    let model = Model::from_params(&config, params)?;
    let optimizer = match updates {
        Some(updates) => {
            let n = model.params().len();
            if m.len() != n || v.len() != n {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments cover {} and {} tensors, expected {n}",
                    m.len(),
                    v.len()
                )));
            }
            for ((p, a), b) in model.params().iter().zip(&m).zip(&v) {
                if a.shape() != p.shape() || b.shape() != p.shape() {
                    return Err(Error::Checkpoint(
                        "optimizer moment shapes differ from parameters".into(),
                    ));
                }
            }
            Some(OptimizerState { updates, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        config,
        seed: seed.ok_or_else(|| missing("seed"))?,
        step: step.ok_or_else(|| missing("step"))?,
        model,
        optimizer,
    })
}

/// Loads a checkpoint and checks it against the configuration the caller expects.
pub fn checkpoint_load_for(dir: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = checkpoint_load(dir)?;
    if &ck.config != expected {
        let named = ck
            .model
            .names()
            .iter()
            .cloned()
            .zip(ck.model.params().iter().cloned())
            .collect();
        Model::from_params(expected, named)?;
        return Err(Error::Checkpoint(
            "stored model configuration differs from the expected one".into(),
        ));
    }
    Ok(ck)
}

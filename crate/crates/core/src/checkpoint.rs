//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json`, `params.bin`,
//! `tokens.json` and `nodes.json`. The manifest records SHA-256 digests of the
//! other three files so a vocabulary that drifted from its weights is caught
//! at load time.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steer_nn::Tensor;

use crate::error::{Result, SteerError};
use crate::model::{SteerConfig, SteerModel, Vocabs};
use crate::spt::NodeVocabulary;
use crate::textproc::TokenVocab;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const TOKENS_FILE: &str = "tokens.json";
pub const NODES_FILE: &str = "nodes.json";

const MAGIC: &[u8; 8] = b"STEERPRM";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SteerConfig,
    pub tokens_sha256: String,
    pub nodes_sha256: String,
    pub params_sha256: String,
    pub num_parameters: usize,
    /// Epoch the weights come from, if produced by training.
    pub epoch: Option<usize>,
    pub val_macro: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct SaveInfo {
    pub epoch: Option<usize>,
    pub val_macro: Option<f64>,
    pub seed: Option<u64>,
}

pub struct Checkpoint {
    pub model: SteerModel<f32>,
    pub vocabs: Vocabs,
    pub manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> SteerError {
    SteerError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| SteerError::io(format!("writing {}", path.display()), e))
}

fn read_file(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| SteerError::io(format!("reading {}", path.display()), e))
}

/// Serializes every parameter as a length-prefixed record of little-endian f32.
pub fn encode_params(model: &SteerModel<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(ckpt_err(self.path, "parameter file is truncated"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads parameter values into `model`, which must have the same layout.
pub fn decode_params(bytes: &[u8], model: &mut SteerModel<f32>, path: &Path) -> Result<()> {
    let mut c = Cursor { bytes, path };
    if c.take(MAGIC.len()).map_err(|_| ckpt_err(path, "not a parameter file"))? != MAGIC {
        return Err(ckpt_err(path, "not a parameter file"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let count = c.u32()? as usize;
    let store = model.params_mut();
    if count != store.len() {
        return Err(ckpt_err(path, format!("expected {} parameters, found {count}", store.len())));
    }
    for (_, p) in store.iter_mut() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| ckpt_err(path, "parameter name is not UTF-8"))?;
        if name != p.name {
            return Err(ckpt_err(path, format!("expected parameter {}, found {name}", p.name)));
        }
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(ckpt_err(
                path,
                format!("parameter {name} has shape {shape:?}, model expects {:?}", p.value.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        p.value = Tensor::from_vec(&shape, data)?;
    }
    if !c.bytes.is_empty() {
        return Err(ckpt_err(path, format!("{} trailing bytes", c.bytes.len())));
    }
    Ok(())
}

pub fn save(dir: &Path, model: &SteerModel<f32>, vocabs: &Vocabs, info: &SaveInfo) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| SteerError::io(format!("creating {}", dir.display()), e))?;
    let tokens = vocabs.tokens.to_json()?;
    let nodes = vocabs.nodes.to_json()?;
    let params = encode_params(model);
    write_file(dir.join(TOKENS_FILE), tokens.as_bytes())?;
    write_file(dir.join(NODES_FILE), nodes.as_bytes())?;
    write_file(dir.join(PARAMS_FILE), &params)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tokens_sha256: sha256_hex(tokens.as_bytes()),
        nodes_sha256: sha256_hex(nodes.as_bytes()),
        params_sha256: sha256_hex(&params),
        num_parameters: model.num_parameters(),
        epoch: info.epoch,
        val_macro: info.val_macro,
        seed: info.seed,
    };
    write_file(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let mut s = String::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| SteerError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&s).map_err(|e| ckpt_err(&path, format!("invalid manifest: {e}")))
}

fn check_digest(what: &'static str, expected: &str, bytes: &[u8]) -> Result<()> {
    let found = sha256_hex(bytes);
    if found != expected {
        return Err(SteerError::VocabSkew {
            what,
            expected: expected.to_owned(),
            found,
        });
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(dir, format!("unsupported format version {}", manifest.format_version)));
    }
    let tokens = read_file(dir.join(TOKENS_FILE))?;
    let nodes = read_file(dir.join(NODES_FILE))?;
    check_digest("token vocabulary", &manifest.tokens_sha256, &tokens)?;
    check_digest("node vocabulary", &manifest.nodes_sha256, &nodes)?;
    let as_str = |b: &[u8], p: &str| String::from_utf8(b.to_vec()).map_err(|_| ckpt_err(&dir.join(p), "not UTF-8"));
    let vocabs = Vocabs {
        tokens: TokenVocab::from_json(&as_str(&tokens, TOKENS_FILE)?)?,
        nodes: NodeVocabulary::from_json(&as_str(&nodes, NODES_FILE)?)?,
    };
    let cfg = &manifest.config;
    for (what, expected, found) in [
        ("token vocabulary size", cfg.token_vocab_size, vocabs.tokens.len()),
        ("node vocabulary size", cfg.node_vocab_size, vocabs.nodes.len()),
    ] {
        if expected != found {
            return Err(SteerError::VocabSkew {
                what,
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
    }

    let params_path = dir.join(PARAMS_FILE);
    let params = read_file(params_path.clone())?;
    if sha256_hex(&params) != manifest.params_sha256 {
        return Err(ckpt_err(&params_path, "parameter digest does not match the manifest"));
    }
    let mut model = SteerModel::new(manifest.config.clone(), 0)?;
    decode_params(&params, &mut model, &params_path)?;
    Ok(Checkpoint { model, vocabs, manifest })
}

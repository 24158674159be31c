//! Checkpoint container: a directory holding `manifest.json` and a blob of
//! little-endian f32 arrays. The manifest echoes the run config and lists
//! every entry with its shape, byte range and SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, RunConfig};
use crate::discriminator::Discriminator;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::inpaint::Inpainter;
use crate::mask::CategoryTaxonomy;
use crate::nn::ParamStore;
use crate::recolor::Recolorer;
use crate::train::RgiModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

pub const ENCODER: &str = "encoder";
pub const GENERATOR: &str = "generator";
pub const DISCRIMINATOR: &str = "discriminator";
pub const RECOLOR: &str = "recolor";
pub const INPAINT: &str = "inpaint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn new(config: RunConfig) -> Self {
        Self { config, tensors: BTreeMap::new() }
    }

    /// Adds every parameter of `store` as `prefix.name`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, shape, data) in store.export()? {
            self.tensors.insert(format!("{prefix}.{name}"), (shape, data));
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Parameters stored under `prefix`, or `None` when there are none.
    pub fn store(&self, prefix: &str, dtype: DType) -> Result<Option<ParamStore>> {
        let p = format!("{prefix}.");
        let mut out = ParamStore::new(dtype);
        for (k, (shape, data)) in &self.tensors {
            if let Some(name) = k.strip_prefix(&p) {
                out.insert(name, Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?)?;
            }
        }
        Ok(if out.is_empty() { None } else { Some(out) })
    }

    fn require(&self, prefix: &str, dtype: DType) -> Result<ParamStore> {
        self.store(prefix, dtype)?
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{prefix}` parameters")))
    }

    pub fn from_rgi(config: &RunConfig, model: &RgiModel, discriminator: Option<&Discriminator>) -> Result<Self> {
        let mut ck = Self::new(config.clone());
        ck.add_store(ENCODER, model.encoder.params())?;
        ck.add_store(GENERATOR, model.generator.params())?;
        if let Some(d) = discriminator {
            ck.add_store(DISCRIMINATOR, d.params())?;
        }
        Ok(ck)
    }

    /// Fails unless the echoed model config equals `expected`.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config.model != expected {
            return ck_err("checkpoint model config differs from the loader config");
        }
        Ok(())
    }

    pub fn rgi_model(&self) -> Result<RgiModel> {
        let cfg = &self.config.model;
        Ok(RgiModel {
            encoder: Encoder::from_params(cfg, self.require(ENCODER, DType::F32)?)?,
            generator: Generator::from_params(cfg, self.require(GENERATOR, DType::F32)?)?,
        })
    }

    pub fn discriminator(&self) -> Result<Option<Discriminator>> {
        self.store(DISCRIMINATOR, DType::F32)?
            .map(|p| Discriminator::from_params(&self.config.model, p))
            .transpose()
    }

    pub fn recolorer(&self, taxonomy: &CategoryTaxonomy) -> Result<Recolorer> {
        Recolorer::from_params(&self.config.recolor, taxonomy, self.require(RECOLOR, DType::F32)?)
    }

    pub fn inpainter(&self) -> Result<Inpainter> {
        Inpainter::from_params(&self.config.inpaint, self.require(INPAINT, DType::F32)?)
    }

    /// Writes `dir/manifest.json` and `dir/params.bin`.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, (shape, data)) in &self.tensors {
            let offset = blob.len() as u64;
            let start = blob.len();
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
                offset,
                bytes: (blob.len() - start) as u64,
                sha256: sha256_hex(&blob[start..]),
            });
        }
        let manifest = Manifest { format_version: FORMAT_VERSION, config: self.config.clone(), entries };
        fs::write(dir.join(BLOB_FILE), &blob)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Reads a checkpoint directory, verifying sizes and every checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return ck_err(format!("unsupported checkpoint format version {}", manifest.format_version));
        }
        manifest.config.validate()?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let total: u64 = manifest.entries.iter().map(|e| e.bytes).sum();
        if total != blob.len() as u64 {
            return ck_err(format!("blob holds {} bytes, manifest lists {total}", blob.len()));
        }
        let mut tensors = BTreeMap::new();
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return ck_err(format!("entry `{}` has unsupported dtype {}", e.name, e.dtype));
            }
            let count: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            if e.bytes as usize != 4 * count || end > blob.len() {
                return ck_err(format!("entry `{}` has an inconsistent byte range", e.name));
            }
            let bytes = &blob[start..end];
            if sha256_hex(bytes) != e.sha256 {
                return Err(Error::Checksum(e.name.clone()));
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(e.name.clone(), (e.shape.clone(), data));
        }
        Ok(Self { config: manifest.config, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_ck() -> Checkpoint {
        let mut run = RunConfig::toy();
        run.model = ModelConfig::for_size(16, 4, 12);
        let model = RgiModel::init(&run.model, 3, DType::F32).unwrap();
        Checkpoint::from_rgi(&run, &model, None).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact_and_sizes_add_up() {
        let ck = toy_ck();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let floats: usize = ck.names().map(|n| ck.get(n).unwrap().0.iter().product::<usize>()).sum();
        let blob = fs::metadata(dir.path().join(BLOB_FILE)).unwrap().len() as usize;
        assert_eq!(blob, 4 * floats);
        let mut expect = 0;
        for e in &manifest.entries {
            assert_eq!(e.offset as usize, expect);
            expect += e.bytes as usize;
        }
        assert_eq!(expect, blob);
        let model = back.rgi_model().unwrap();
        assert_eq!(model.generator.params().export().unwrap(), toy_ck().rgi_model().unwrap().generator.params().export().unwrap());
        assert!(back.check_model(&ck.config.model).is_ok());
        assert!(back.check_model(&ModelConfig::for_size(32, 4, 12)).is_err());
    }

    #[test]
    fn flipped_byte_names_the_entry() {
        let ck = toy_ck();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ck.save(dir.path()).unwrap();
        let victim = &manifest.entries[manifest.entries.len() / 2];
        let path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob[victim.offset as usize + 1] ^= 0x10;
        fs::write(&path, blob).unwrap();
        match Checkpoint::load(dir.path()) {
            Err(Error::Checksum(name)) => assert_eq!(name, victim.name),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn missing_section_is_reported() {
        let ck = toy_ck();
        assert!(ck.inpainter().is_err());
        assert!(ck.discriminator().unwrap().is_none());
        assert!(ck.has_prefix(GENERATOR) && !ck.has_prefix(RECOLOR));
    }
}

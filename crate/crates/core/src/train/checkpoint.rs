//! Checkpoint file: an 8-byte little-endian manifest length, the UTF-8 JSON
//! manifest, then every tensor as raw little-endian f32 in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::camc::{CamcBlock, ClassCalibration, Threshold};
use crate::error::{Error, Result};
use crate::model::{Backbone, ClassifierHead, Stage};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// epochs completed
    pub epoch: usize,
    pub config: TrainConfig,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub camc: Option<CamcBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// byte offset into the blob
    pub offset: u64,
    /// byte length
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamcEntry {
    pub tau: Threshold,
    pub k: usize,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub camc: Option<CamcEntry>,
    pub tensors: Vec<TensorEntry>,
    pub blob_length: u64,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .backbone
            .param_names()
            .into_iter()
            .zip(self.backbone.params())
            .collect();
        out.extend(self.head.param_names().into_iter().zip(self.head.params()));
        if let Some(block) = &self.camc {
            out.extend(block.param_names().into_iter().zip(block.params()));
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let length = 4 * t.len() as u64;
                let entry = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                entry
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            seed: self.config.seed,
            num_classes: self.head.num_classes(),
            config: self.config.clone(),
            camc: self.camc.as_ref().map(|b| CamcEntry {
                tau: b.tau,
                k: b.k,
                classes: b.tail_classes(),
            }),
            tensors,
            blob_length: offset,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&ckpt.manifest())?;
    let mut out = Vec::with_capacity(8 + manifest.len());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in ckpt.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the 8-byte manifest length"));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let start = 8u64
        .checked_add(manifest_len)
        .filter(|&s| s <= bytes.len() as u64)
        .ok_or_else(|| Error::format(8, format!("manifest length {manifest_len} exceeds the file")))?
        as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..start])
        .map_err(|e| Error::format(8, format!("manifest is not valid JSON: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported checkpoint version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let blob = &bytes[start..];

    // offsets must tile the blob exactly
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if entry.offset != cursor || entry.length != 4 * numel as u64 {
            return Err(Error::format(
                start as u64 + entry.offset,
                format!("tensor {} does not continue the blob layout", entry.name),
            ));
        }
        if entry.offset + entry.length > blob.len() as u64 {
            return Err(Error::format(
                start as u64 + entry.offset,
                format!("blob truncated inside tensor {}", entry.name),
            ));
        }
        cursor += entry.length;
    }
    if cursor != manifest.blob_length || cursor != blob.len() as u64 {
        return Err(Error::format(
            start as u64 + cursor.min(blob.len() as u64),
            format!(
                "blob holds {} bytes, manifest describes {} (declared {})",
                blob.len(),
                cursor,
                manifest.blob_length
            ),
        ));
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for entry in &manifest.tensors {
        let raw = &blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?).is_some() {
            return Err(Error::format(start as u64 + entry.offset, format!("duplicate tensor {}", entry.name)));
        }
    }
    let names_in_order: Vec<String> = manifest.tensors.iter().map(|e| e.name.clone()).collect();
    let ckpt = assemble(&manifest, &mut tensors)?;
    if let Some(name) = tensors.keys().next() {
        return Err(Error::invalid(format!("unknown tensor name {name}")));
    }
    let expected: Vec<String> = ckpt.named_tensors().into_iter().map(|(n, _)| n).collect();
    if expected != names_in_order {
        return Err(Error::invalid("tensor order differs from the canonical layout"));
    }
    Ok(ckpt)
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))
}

fn assemble(manifest: &Manifest, tensors: &mut BTreeMap<String, Tensor>) -> Result<Checkpoint> {
    let config = manifest.config.clone();
    let template = Backbone::zeroed(config.backbone.clone())?;
    let backbone_params = template
        .param_names()
        .iter()
        .map(|n| take(tensors, n))
        .collect::<Result<Vec<_>>>()?;
    let backbone = Backbone::from_params(config.backbone.clone(), backbone_params)?;

    let weight = take(tensors, "head.weight")?;
    if weight.ndim() != 2 || weight.shape()[0] != manifest.num_classes {
        return Err(Error::invalid(format!("head.weight has shape {:?}", weight.shape())));
    }
    let mut head = ClassifierHead::from_weight(config.head, weight, config.g)?;
    if head.bias().is_some() {
        head.set_bias(take(tensors, "head.bias")?)?;
    }
    if head.magnitude().is_some() {
        head.set_magnitude(take(tensors, "head.g")?)?;
    }

    let camc = match &manifest.camc {
        None => None,
        Some(entry) => {
            let mut block = CamcBlock::empty(entry.tau, entry.k);
            for &c in &entry.classes {
                let prototypes = take(tensors, &format!("camc.class{c}.prototypes"))?;
                let mut bank = ClassCalibration::from_prototypes(prototypes)?;
                let fw = take(tensors, &format!("camc.class{c}.fusion.weight"))?;
                let fb = take(tensors, &format!("camc.class{c}.fusion.bias"))?;
                if fw.shape() != bank.fusion_weight.shape() || fb.shape() != [1] {
                    return Err(Error::invalid(format!("fusion tensors of class {c} have the wrong shape")));
                }
                bank.fusion_weight = fw;
                bank.fusion_bias = fb;
                block.banks.insert(c, bank);
            }
            let distinct: BTreeSet<_> = entry.classes.iter().collect();
            if distinct.len() != entry.classes.len() {
                return Err(Error::invalid("duplicate calibrated class in manifest"));
            }
            Some(block)
        }
    };
    Ok(Checkpoint {
        stage: manifest.stage,
        epoch: manifest.epoch,
        config,
        backbone,
        head,
        camc,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, save_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

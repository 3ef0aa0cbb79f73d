//! Checkpoints, their on-disk format, component extraction and the
//! combination of one model's feature encoder with another's contextual
//! encoder and CTC head.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::digest::{f32_digest, sha256_hex, Fingerprint};
use crate::error::{Result, SoaError};
use crate::model::{Component, ModelConfig, ParamMap};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

/// One provenance record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    /// `init`, `pretrain`, `finetune`, `continual_pretrain` or `combine`.
    pub stage: String,
    pub label: Option<String>,
    pub data_fingerprint: Option<String>,
    pub steps: usize,
    /// Digests of the checkpoints this one was derived from.
    pub parents: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub lineage: Vec<LineageEntry>,
}

impl ModelCheckpoint {
    /// Checks that every parameter carries a component prefix.
    pub fn new(config: ModelConfig, params: ParamMap, lineage: Vec<LineageEntry>) -> Result<Self> {
        config.validate()?;
        if let Some(bad) = params.keys().find(|k| Component::of(k).is_none()) {
            return Err(SoaError::contract(format!("parameter `{bad}` has no component prefix")));
        }
        Ok(ModelCheckpoint { config, params, lineage })
    }

    pub fn architecture_fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    /// Content digest over architecture, parameters at storage precision and lineage.
    pub fn digest(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.str(&self.architecture_fingerprint());
        for (name, t) in &self.params {
            fp.str(name);
            fp.str(&format!("{:?}", t.shape()));
            fp.str(&f32_digest(t.data()));
        }
        fp.str(&serde_json::to_string(&self.lineage).expect("lineage serializes"));
        fp.finish()
    }

    pub fn has_component(&self, c: Component) -> bool {
        self.params.keys().any(|k| c.owns(k))
    }

    /// Digest of one component's parameters; used to audit freezing.
    pub fn component_digest(&self, c: Component) -> String {
        let mut fp = Fingerprint::new();
        for (name, t) in self.params.iter().filter(|(k, _)| c.owns(k)) {
            fp.str(name);
            fp.f64s(t.data());
        }
        fp.finish()
    }

    /// Name of the latest labelled stage, such as `M2`.
    pub fn label(&self) -> Option<&str> {
        self.lineage.iter().rev().find_map(|e| e.label.as_deref())
    }
}

/// Parameters belonging to `component`.
pub fn extract_component(ckpt: &ModelCheckpoint, component: &str) -> Result<ParamMap> {
    let c = Component::parse(component)?;
    Ok(ckpt.params.iter().filter(|(k, _)| c.owns(k)).map(|(k, v)| (k.clone(), v.clone())).collect())
}

/// Feature encoder and quantizer from `theta_donor`; contextual encoder and
/// CTC head from `phi_donor`.
pub fn combine(theta_donor: &ModelCheckpoint, phi_donor: &ModelCheckpoint) -> Result<ModelCheckpoint> {
    let (a, b) = (theta_donor.architecture_fingerprint(), phi_donor.architecture_fingerprint());
    if a != b {
        return Err(SoaError::IncompatibleArchitecture(format!(
            "feature-encoder donor {} vs contextual-encoder donor {}",
            &a[..12],
            &b[..12]
        )));
    }
    if !phi_donor.has_component(Component::CtcHead) {
        return Err(SoaError::contract("contextual-encoder donor has no CTC head; it must be a finetuned model"));
    }
    let mut params = ParamMap::new();
    for (k, v) in &theta_donor.params {
        if matches!(Component::of(k), Some(Component::FeatureEncoder | Component::Quantizer)) {
            params.insert(k.clone(), v.clone());
        }
    }
    for (k, v) in &phi_donor.params {
        if matches!(Component::of(k), Some(Component::ContextualEncoder | Component::CtcHead)) {
            params.insert(k.clone(), v.clone());
        }
    }
    let mut lineage = theta_donor.lineage.clone();
    for e in &phi_donor.lineage {
        if !lineage.contains(e) {
            lineage.push(e.clone());
        }
    }
    lineage.push(LineageEntry {
        stage: "combine".into(),
        label: None,
        data_fingerprint: None,
        steps: 0,
        parents: vec![theta_donor.digest(), phi_donor.digest()],
    });
    ModelCheckpoint::new(theta_donor.config.clone(), params, lineage)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture_fingerprint: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    weights_sha256: String,
    lineage: Vec<LineageEntry>,
    digest: String,
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
///
/// Values are stored as `f32`; anything not exactly representable is rounded.
pub fn save_checkpoint(ckpt: &ModelCheckpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    for (name, t) in &ckpt.params {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
            sha256: f32_digest(t.data()),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture_fingerprint: ckpt.architecture_fingerprint(),
        config: ckpt.config.clone(),
        tensors,
        weights_sha256: sha256_hex(&blob),
        lineage: ckpt.lineage.clone(),
        digest: ckpt.digest(),
    };
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn integrity(msg: String) -> SoaError {
    SoaError::Integrity(msg)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelCheckpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| integrity(format!("{}: unreadable manifest: {e}", dir.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(integrity(format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    if sha256_hex(&blob) != manifest.weights_sha256 {
        return Err(integrity(format!("{}: weights digest mismatch", dir.display())));
    }
    if manifest.config.fingerprint() != manifest.architecture_fingerprint {
        return Err(integrity("architecture fingerprint does not match config".into()));
    }
    let mut params = ParamMap::new();
    for e in &manifest.tensors {
        let end = e.offset + 4 * e.len;
        if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(integrity(format!("tensor `{}` lies outside the weights blob", e.name)));
        }
        let data: Vec<f64> =
            blob[e.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        if f32_digest(&data) != e.sha256 {
            return Err(integrity(format!("tensor `{}` digest mismatch", e.name)));
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let expected: usize = manifest.tensors.iter().map(|e| 4 * e.len).sum();
    if expected != blob.len() {
        return Err(integrity(format!("weights blob has {} bytes, manifest describes {expected}", blob.len())));
    }
    let ckpt = ModelCheckpoint::new(manifest.config, params, manifest.lineage).map_err(|e| integrity(e.to_string()))?;
    if ckpt.digest() != manifest.digest {
        return Err(integrity("checkpoint digest mismatch".into()));
    }
    Ok(ckpt)
}

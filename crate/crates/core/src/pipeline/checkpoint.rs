//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version, a
//! length-prefixed JSON header, then every tensor as little-endian `f64`
//! in header order. Floats never pass through JSON, so a round trip is
//! bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Stage;
use super::run::ModelState;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::extract::{ExtractedModel, PruneMask};
use crate::gates::HardConcreteParams;
use crate::model::{ArchDescriptor, GatedModel, Network};
use crate::optim::AdamWState;
use crate::rng::seeded;

pub const MAGIC: &[u8; 8] = b"GATECKPT";
pub const VERSION: u32 = 1;

/// Model, controller and optimizer state at a step boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Stage that wrote the checkpoint; `None` for a fresh model.
    pub stage: Option<Stage>,
    /// Steps completed within `stage`.
    pub step: usize,
    pub lagrange: Option<Vec<(f64, f64)>>,
    pub weight_optimizer: Option<AdamWState>,
    pub gate_optimizer: Option<AdamWState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Dense,
    Gated,
    Extracted,
}

#[derive(Debug, Serialize, Deserialize)]
struct Blob {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    pruned: bool,
    stage: Option<Stage>,
    step: usize,
    descriptor: ArchDescriptor,
    norm_width: usize,
    num_classes: usize,
    original: Option<ArchDescriptor>,
    mask: Option<PruneMask>,
    hard_concrete: Option<HardConcreteParams>,
    weight_optimizer_step: Option<u64>,
    gate_optimizer_step: Option<u64>,
    blobs: Vec<Blob>,
}

fn push_optimizer(prefix: &str, state: &AdamWState, shapes: &[Vec<usize>], blobs: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (i, (m, v)) in state.first.iter().zip(&state.second).enumerate() {
        blobs.push((format!("{prefix}.m.{i}"), shapes[i].clone(), m.clone()));
        blobs.push((format!("{prefix}.v.{i}"), shapes[i].clone(), v.clone()));
    }
}

impl Checkpoint {
    pub fn fresh(model: ModelState) -> Self {
        Checkpoint { model, stage: None, step: 0, lagrange: None, weight_optimizer: None, gate_optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = self.model.network();
        let mut blobs: Vec<(String, Vec<usize>, Vec<f64>)> =
            net.named_tensors().into_iter().map(|(n, t)| (format!("net.{n}"), t.shape().to_vec(), t.to_vec())).collect();
        let weight_shapes: Vec<Vec<usize>> = net.parameters().iter().map(|t| t.shape().to_vec()).collect();
        let (kind, original, mask, hard_concrete) = match &self.model {
            ModelState::Dense(_) => (ModelKind::Dense, None, None, None),
            ModelState::Gated(m) => {
                for (i, g) in m.gate_groups().iter().enumerate() {
                    blobs.push((format!("gate.{i}"), vec![g.len()], g.log_alpha.to_vec()));
                }
                (ModelKind::Gated, None, None, Some(m.hidden_gate.params))
            }
            ModelState::Extracted(e) => (ModelKind::Extracted, Some(e.original.clone()), Some(e.provenance.clone()), None),
        };
        if let Some(s) = &self.weight_optimizer {
            push_optimizer("opt.weights", s, &weight_shapes, &mut blobs);
        }
        if let (Some(s), ModelState::Gated(m)) = (&self.gate_optimizer, &self.model) {
            let shapes: Vec<Vec<usize>> = m.gate_groups().iter().map(|g| vec![g.len()]).collect();
            push_optimizer("opt.gates", s, &shapes, &mut blobs);
        }
        if let Some(l) = &self.lagrange {
            blobs.push(("lagrange".into(), vec![l.len(), 2], l.iter().flat_map(|&(a, b)| [a, b]).collect()));
        }
        let header = Header {
            kind,
            pruned: kind == ModelKind::Extracted,
            stage: self.stage,
            step: self.step,
            descriptor: net.descriptor.clone(),
            norm_width: net.norm_width,
            num_classes: net.num_classes,
            original,
            mask,
            hard_concrete,
            weight_optimizer_step: self.weight_optimizer.as_ref().map(|s| s.step),
            gate_optimizer_step: self.gate_optimizer.as_ref().map(|s| s.step),
            blobs: blobs.iter().map(|(name, shape, _)| Blob { name: name.clone(), shape: shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * blobs.iter().map(|b| b.2.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &blobs {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes through a temporary file, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { detail, .. } => Error::Checkpoint { path: path.to_path_buf(), detail },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |detail: String| Error::Checkpoint { path: PathBuf::new(), detail };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a gatecraft checkpoint (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| err(format!("bad header: {e}")))?;

        let mut data: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        let mut pos = header_end;
        for blob in &header.blobs {
            let n: usize = blob.shape.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(err(format!("truncated data for {}", blob.name)));
            }
            let values = bytes[pos..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            data.insert(blob.name.clone(), (blob.shape.clone(), values));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (s, v) = data.remove(name).ok_or_else(|| err(format!("missing tensor {name}")))?;
            if s != shape {
                return Err(err(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };

        // Fresh tensors with the recorded shapes; values are filled in below.
        let mut net = Network::init(&header.descriptor, header.num_classes, &mut seeded(0, 0))
            .map_err(|e| err(format!("bad descriptor: {e}")))?;
        net.norm_width = header.norm_width;
        for (name, t) in net.named_tensors() {
            let v = take(&format!("net.{name}"), t.shape())?;
            t.set_data(&v);
        }
        let optimizer = |prefix: &str, shapes: &[Vec<usize>], step: Option<u64>, take: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<f64>>| -> Result<Option<AdamWState>> {
            let Some(step) = step else { return Ok(None) };
            let mut state = AdamWState { step, first: vec![], second: vec![] };
            for (i, s) in shapes.iter().enumerate() {
                state.first.push(take(&format!("{prefix}.m.{i}"), s)?);
                state.second.push(take(&format!("{prefix}.v.{i}"), s)?);
            }
            Ok(Some(state))
        };
        let weight_shapes: Vec<Vec<usize>> = net.parameters().iter().map(|t| t.shape().to_vec()).collect();
        let weight_optimizer = optimizer("opt.weights", &weight_shapes, header.weight_optimizer_step, &mut take)?;

        let (model, gate_optimizer) = match header.kind {
            ModelKind::Dense => (ModelState::Dense(net), None),
            ModelKind::Gated => {
                let params = header.hard_concrete.ok_or_else(|| err("gated checkpoint without gate parameters".into()))?;
                let m = GatedModel::new(net, params).map_err(|e| err(e.to_string()))?;
                let shapes: Vec<Vec<usize>> = m.gate_groups().iter().map(|g| vec![g.len()]).collect();
                for (i, g) in m.gate_groups().iter().enumerate() {
                    g.log_alpha.set_data(&take(&format!("gate.{i}"), &shapes[i])?);
                }
                let gates = optimizer("opt.gates", &shapes, header.gate_optimizer_step, &mut take)?;
                (ModelState::Gated(m), gates)
            }
            ModelKind::Extracted => {
                let original = header.original.ok_or_else(|| err("pruned checkpoint without original architecture".into()))?;
                let mask = header.mask.ok_or_else(|| err("pruned checkpoint without mask".into()))?;
                mask.validate(&original).map_err(|e| err(e.to_string()))?;
                if mask.apply_to(&original) != net.descriptor {
                    return Err(err("mask does not produce the stored architecture".into()));
                }
                (ModelState::Extracted(ExtractedModel { network: net, original, provenance: mask }), None)
            }
        };
        let lagrange = match data.remove("lagrange") {
            Some((s, v)) if s.len() == 2 && s[1] == 2 && s[0] > 0 => Some(v.chunks_exact(2).map(|c| (c[0], c[1])).collect()),
            Some((s, _)) => return Err(err(format!("lagrange has shape {s:?}"))),
            None => None,
        };
        if let Some(name) = data.keys().min() {
            return Err(err(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint { model, stage: header.stage, step: header.step, lagrange, weight_optimizer, gate_optimizer })
    }
}

/// Bitwise comparison of two models' tensors, for tests and diagnostics.
pub fn same_weights(a: &ModelState, b: &ModelState) -> bool {
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (na, nb) = (a.network().named_tensors(), b.network().named_tensors());
    na.len() == nb.len() && na.iter().zip(&nb).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape() && bits(t1) == bits(t2))
}

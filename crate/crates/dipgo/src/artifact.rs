//! Artifact interchange formats.
//!
//! Gate masks and scores travel as JSON documents that round-trip bit-exactly
//! (serde_json emits shortest-round-trip float literals). Denoiser and pruner
//! weights persist in a small container: an eight-byte magic, a JSON manifest
//! (graph/schedule or pruner config, tensor table, SHA-256 content hash) and
//! the raw little-endian f64 payload in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};


use crate::diffusion::{DenoiserSpec, DenoiserWeights, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{GateVector, SuperNet};
use crate::post::PruneOutcome;
use crate::pruner::{init_pruner, PrunerConfig, PrunerWeights};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"DIPGOAR1";

/// Gate-mask interchange document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateArtifact {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Always "step-major".
    pub ordering: String,
    pub gate: Vec<u8>,
    pub pruning_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// One of "dipgo", "random", "ga", "interval".
    pub source: String,
    pub graph_hash: String,
}

impl GateArtifact {
    pub fn new(
        net: &SuperNet,
        gate: &GateVector,
        pruning_ratio: f64,
        scores: Option<Vec<f64>>,
        source: &str,
    ) -> Self {
        Self {
            n: net.n_blocks,
            t: net.t_steps,
            ordering: "step-major".into(),
            gate: gate.gate.clone(),
            pruning_ratio,
            scores,
            source: source.into(),
            graph_hash: net.graph_hash(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gate artifact serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Checks dimensions/hash against a supernet and returns the legal gate.
    pub fn into_gate(self, net: &SuperNet) -> Result<GateVector> {
        if self.n != net.n_blocks || self.t != net.t_steps {
            return Err(Error::Format(format!(
                "gate artifact is {}x{} but the graph is {}x{}",
                self.t, self.n, net.t_steps, net.n_blocks
            )));
        }
        if self.ordering != "step-major" {
            return Err(Error::Format(format!("unknown ordering {}", self.ordering)));
        }
        if self.graph_hash != net.graph_hash() {
            return Err(Error::Format(
                "gate artifact was produced for a different graph".into(),
            ));
        }
        let gate = GateVector { gate: self.gate };
        net.validate_gate(&gate)?;
        Ok(gate)
    }
}

/// Importance scores with the pruner configuration echoed back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresArtifact {
    pub scores: Vec<f64>,
    pub config: PrunerConfig,
    pub graph_hash: String,
}

impl ScoresArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores artifact serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Sidecar record describing one bisection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub theta: f64,
    pub p_target: f64,
    pub p_star: f64,
    pub iterations: usize,
    pub best_achievable: bool,
}

impl From<&PruneOutcome> for PruneRecord {
    fn from(o: &PruneOutcome) -> Self {
        Self {
            theta: o.theta,
            p_target: o.target_ratio,
            p_star: o.achieved_ratio,
            iterations: o.iterations,
            best_achievable: o.best_achievable,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    format: String,
    version: u32,
    kind: String,
    content_hash: String,
    tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    denoiser_spec: Option<DenoiserSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<NoiseSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pruner_config: Option<PrunerConfig>,
}

fn write_archive(
    path: &Path,
    kind: &str,
    tensors: &[(String, &[f64])],
    content_hash: String,
    denoiser_spec: Option<DenoiserSpec>,
    schedule: Option<NoiseSchedule>,
    pruner_config: Option<PrunerConfig>,
) -> Result<()> {
    let manifest = ArchiveManifest {
        format: "dipgo-archive".into(),
        version: 1,
        kind: kind.into(),
        content_hash,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
        denoiser_spec,
        schedule,
        pruner_config,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(ARCHIVE_MAGIC)?;
        f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_json)?;
        for (_, t) in tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in *t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_archive(path: &Path, expect_kind: &str) -> Result<(ArchiveManifest, Vec<Vec<f64>>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a dipgo archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_json)?;
    let manifest: ArchiveManifest = serde_json::from_slice(&manifest_json)?;
    if manifest.kind != expect_kind {
        return Err(Error::Format(format!(
            "archive holds {} weights, expected {expect_kind}",
            manifest.kind
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let mut buf = vec![0u8; entry.len * 8];
        f.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(vals);
    }
    Ok((manifest, tensors))
}

pub fn save_denoiser_archive(
    path: &Path,
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
) -> Result<()> {
    write_archive(
        path,
        "denoiser",
        &weights.param_tensors(),
        weights.content_hash(),
        Some(weights.spec.clone()),
        Some(schedule.clone()),
        None,
    )
}

pub fn load_denoiser_archive(path: &Path) -> Result<(DenoiserWeights, NoiseSchedule)> {
    let (manifest, tensors) = read_archive(path, "denoiser")?;
    let spec = manifest
        .denoiser_spec
        .ok_or_else(|| Error::Format("denoiser archive lacks its spec".into()))?;
    let schedule = manifest
        .schedule
        .ok_or_else(|| Error::Format("denoiser archive lacks its schedule".into()))?;
    spec.validate()?;
    let mut weights = DenoiserWeights::init(&spec, 0);
    fill_params(weights.param_tensors_mut(), &tensors)?;
    if weights.content_hash() != manifest.content_hash {
        return Err(Error::Format("denoiser archive failed its content hash".into()));
    }
    Ok((weights, schedule))
}

pub fn save_pruner_archive(path: &Path, weights: &PrunerWeights) -> Result<()> {
    write_archive(
        path,
        "pruner",
        &weights.param_tensors(),
        weights.content_hash(),
        None,
        None,
        Some(weights.config.clone()),
    )
}

pub fn load_pruner_archive(path: &Path) -> Result<PrunerWeights> {
    let (manifest, tensors) = read_archive(path, "pruner")?;
    let config = manifest
        .pruner_config
        .ok_or_else(|| Error::Format("pruner archive lacks its config".into()))?;
    let mut weights = init_pruner(&config, 0)?;
    fill_params(weights.param_tensors_mut(), &tensors)?;
    if weights.content_hash() != manifest.content_hash {
        return Err(Error::Format("pruner archive failed its content hash".into()));
    }
    Ok(weights)
}

fn fill_params(mut params: Vec<&mut Vec<f64>>, tensors: &[Vec<f64>]) -> Result<()> {
    if params.len() != tensors.len() {
        return Err(Error::Format(format!(
            "archive holds {} tensors, expected {}",
            tensors.len(),
            params.len()
        )));
    }
    for (p, t) in params.iter_mut().zip(tensors) {
        if p.len() != t.len() {
            return Err(Error::Format("archive tensor length mismatch".into()));
        }
        p.copy_from_slice(t);
    }
    Ok(())
}

//! Metrics, analysis data and experiment plumbing.

mod plot;
mod rundir;

pub use plot::{heatmap_plot, line_plot, PlotFormat, Series};
pub use rundir::{RunDir, RunLock, RunManifest};

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, BlockKind, DenoiserWeights, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{GateVector, SuperNet};

/// Multiply-accumulate accounting for one gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacsReport {
    pub total_macs: f64,
    pub executed_macs: f64,
    pub keep_ratio: f64,
    /// total / executed.
    pub speedup_estimate: f64,
    /// Executed MACs per execution step.
    pub per_step_breakdown: Vec<f64>,
}

/// External per-block MACs table, so published model totals are checkable
/// without running those models. JSON: {"steps", "blocks_per_step", "macs"}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalMacsTable {
    pub steps: usize,
    pub blocks_per_step: usize,
    /// `macs[t][b]`, execution-step major.
    pub macs: Vec<Vec<f64>>,
}

impl ExternalMacsTable {
    pub fn validate(&self) -> Result<()> {
        if self.macs.len() != self.steps
            || self.macs.iter().any(|row| row.len() != self.blocks_per_step)
        {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.steps, self.blocks_per_step),
                got: format!("{} rows", self.macs.len()),
            });
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.macs.iter().flatten().sum()
    }
}

fn report_from_flat(node_macs: &[f64], t_steps: usize, n_blocks: usize, gate: &GateVector) -> Result<MacsReport> {
    if gate.len() != node_macs.len() {
        return Err(Error::Shape {
            expected: format!("{}", node_macs.len()),
            got: format!("{}", gate.len()),
        });
    }
    let total: f64 = node_macs.iter().sum();
    let mut executed = 0.0;
    let mut per_step = vec![0.0; t_steps];
    for (k, (&m, &g)) in node_macs.iter().zip(&gate.gate).enumerate() {
        if g != 0 {
            executed += m;
            per_step[k / n_blocks] += m;
        }
    }
    Ok(MacsReport {
        total_macs: total,
        executed_macs: executed,
        keep_ratio: executed / total,
        speedup_estimate: total / executed,
        per_step_breakdown: per_step,
    })
}

/// Report from the supernet's own flops table.
pub fn macs_report(net: &SuperNet, gate: &GateVector) -> Result<MacsReport> {
    net.validate_gate(gate)?;
    report_from_flat(&net.node_flops, net.t_steps, net.n_blocks, gate)
}

/// Report from an external per-block MACs table.
pub fn macs_report_external(table: &ExternalMacsTable, gate: &GateVector) -> Result<MacsReport> {
    table.validate()?;
    let flat: Vec<f64> = table.macs.iter().flatten().copied().collect();
    report_from_flat(&flat, table.steps, table.blocks_per_step, gate)
}

/// Step-by-step feature similarity at one probe block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// `values[i][j]`: mean cosine similarity between probe features at
    /// execution steps i+1 and j+1.
    pub values: Vec<Vec<f64>>,
    pub probe_block: usize,
    pub sample_count: usize,
}

impl SimilarityMatrix {
    pub fn t_steps(&self) -> usize {
        self.values.len()
    }

    /// Mean over pairs at exactly the given step distance.
    pub fn mean_at_distance(&self, distance: usize) -> f64 {
        let t = self.t_steps();
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..t {
            for j in 0..t {
                if j > i && j - i == distance {
                    acc += self.values[i][j];
                    count += 1;
                }
            }
        }
        acc / count.max(1) as f64
    }

    /// Mean over pairs at or beyond the given step distance.
    pub fn mean_at_distance_at_least(&self, distance: usize) -> f64 {
        let t = self.t_steps();
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..t {
            for j in (i + 1)..t {
                if j - i >= distance {
                    acc += self.values[i][j];
                    count += 1;
                }
            }
        }
        acc / count.max(1) as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Default probe: the penultimate up-path block.
pub fn default_probe_block(weights: &DenoiserWeights) -> usize {
    let ups: Vec<usize> = weights
        .spec
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BlockKind::Up)
        .map(|(i, _)| i)
        .collect();
    if ups.len() >= 2 {
        ups[ups.len() - 2]
    } else {
        weights.spec.n_blocks().saturating_sub(2)
    }
}

/// Average cosine similarity between the probe block's features at every
/// pair of steps during full inference, over the given seeds.
pub fn similarity_matrix(
    weights: &DenoiserWeights,
    schedule: &NoiseSchedule,
    probe_block: usize,
    seeds: &[u64],
) -> Result<SimilarityMatrix> {
    if seeds.is_empty() {
        return Err(Error::Config("similarity matrix needs at least one seed".into()));
    }
    if probe_block >= weights.spec.n_blocks() {
        return Err(Error::Config(format!("probe block {probe_block} out of range")));
    }
    let t = schedule.t_max;
    let mut acc = vec![vec![0.0; t]; t];
    for &seed in seeds {
        let trace = sample(weights, schedule, seed, true)?;
        let feats = trace.per_step_features.expect("features retained");
        let per_step: Vec<&Vec<f64>> = (1..=t)
            .map(|s| feats.get(&(s, probe_block)).expect("full run retains all blocks"))
            .collect();
        for i in 0..t {
            for j in 0..t {
                acc[i][j] += cosine(per_step[i], per_step[j]);
            }
        }
    }
    let n = seeds.len() as f64;
    for row in acc.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(SimilarityMatrix {
        values: acc,
        probe_block,
        sample_count: seeds.len(),
    })
}

/// Reshapes a step-major gate into a (T x N) matrix plus per-step keep counts.
pub fn gate_heatmap_data(gate: &GateVector, net: &SuperNet) -> Result<(Vec<Vec<u8>>, Vec<usize>)> {
    net.validate_gate(gate)?;
    let mut rows = Vec::with_capacity(net.t_steps);
    let mut counts = Vec::with_capacity(net.t_steps);
    for step in 1..=net.t_steps {
        let row: Vec<u8> = (0..net.n_blocks)
            .map(|b| gate.gate[net.node_of(step, b)])
            .collect();
        counts.push(row.iter().filter(|&&g| g == 1).count());
        rows.push(row);
    }
    Ok((rows, counts))
}

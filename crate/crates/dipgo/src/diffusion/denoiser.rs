//! Block-structured toy denoiser.
//!
//! A denoiser is a DAG of residual blocks executed once per timestep. Blocks
//! are stored in topological order (every producer index is smaller than its
//! consumer), block 0 consumes the step input, and exactly one block feeds
//! nothing else — its output is the noise prediction. The same block math has
//! a plain path (used by the sampler and the hard SubNet executor) and a tape
//! path (used wherever gradients are needed); both accumulate in the same
//! order so that their outputs agree bit for bit.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataShape {
    Image { h: usize, w: usize },
    Vector { dim: usize },
}

impl DataShape {
    pub fn len(&self) -> usize {
        match self {
            DataShape::Image { h, w } => h * w,
            DataShape::Vector { dim } => *dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DataShape::Image { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Down => write!(f, "down"),
            BlockKind::Mid => write!(f, "mid"),
            BlockKind::Up => write!(f, "up"),
        }
    }
}

/// Source of one block input edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    StepInput,
    Block(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    /// Ordered in-edges; `inputs[0]` is the main path carried by the shortcut.
    pub inputs: Vec<Producer>,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub data: DataShape,
    pub blocks: Vec<BlockSpec>,
    /// Multiply-accumulate count per block forward pass.
    pub per_block_flops: Vec<f64>,
}

impl DenoiserSpec {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dim(&self, p: Producer) -> usize {
        match p {
            Producer::StepInput => self.data.len(),
            Producer::Block(i) => self.blocks[i].out_dim,
        }
    }

    /// The single block whose output nobody consumes.
    pub fn output_block(&self) -> usize {
        let mut consumed = vec![false; self.blocks.len()];
        for b in &self.blocks {
            for p in &b.inputs {
                if let Producer::Block(i) = p {
                    consumed[*i] = true;
                }
            }
        }
        consumed.iter().position(|c| !c).expect("validated spec has an output block")
    }

    /// MAC count of one forward pass of `block`, from its matrix shapes.
    pub fn block_mac_count(&self, block: usize) -> f64 {
        let b = &self.blocks[block];
        let d_out = b.out_dim;
        let mut macs = 0usize;
        for p in &b.inputs {
            macs += d_out * self.input_dim(*p);
        }
        macs += d_out * TIME_EMBED_DIM; // time projection
        macs += d_out * d_out; // nonlinearity projection
        macs += d_out * self.input_dim(b.inputs[0]); // shortcut
        macs as f64
    }

    /// Constructs a spec with `per_block_flops` derived from the block shapes.
    pub fn with_computed_flops(data: DataShape, blocks: Vec<BlockSpec>) -> Result<Self> {
        let mut spec = DenoiserSpec {
            data,
            blocks,
            per_block_flops: Vec::new(),
        };
        spec.per_block_flops = (0..spec.blocks.len())
            .map(|i| spec.block_mac_count(i))
            .collect();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::Spec("need at least one block".into()));
        }
        if self.per_block_flops.len() != n {
            return Err(Error::Spec("per_block_flops length mismatch".into()));
        }
        if self.per_block_flops.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Spec("per_block_flops must be positive".into()));
        }
        let mut step_input_consumers = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.inputs.is_empty() {
                return Err(Error::Spec(format!("block {i} has no inputs")));
            }
            if b.out_dim == 0 {
                return Err(Error::Spec(format!("block {i} has zero output dim")));
            }
            for p in &b.inputs {
                match p {
                    Producer::StepInput => step_input_consumers += 1,
                    Producer::Block(j) => {
                        if *j >= i {
                            return Err(Error::Spec(format!(
                                "block {i} consumes block {j}: producers must precede consumers"
                            )));
                        }
                    }
                }
            }
        }
        if step_input_consumers != 1 || !matches!(self.blocks[0].inputs[0], Producer::StepInput) {
            return Err(Error::Spec(
                "exactly one step-input edge is allowed and it must be the main input of block 0"
                    .into(),
            ));
        }
        // Single output block, everything reaches it, everything is reachable.
        let mut consumed = vec![false; n];
        for b in &self.blocks {
            for p in &b.inputs {
                if let Producer::Block(i) = p {
                    consumed[*i] = true;
                }
            }
        }
        let sinks: Vec<usize> = (0..n).filter(|&i| !consumed[i]).collect();
        if sinks.len() != 1 {
            return Err(Error::Spec(format!(
                "graph must have exactly one output block, found {sinks:?}"
            )));
        }
        let out = sinks[0];
        if self.blocks[out].out_dim != self.data.len() {
            return Err(Error::Spec(format!(
                "output block dim {} must equal data dim {}",
                self.blocks[out].out_dim,
                self.data.len()
            )));
        }
        // Reachability from block 0 along forward edges.
        let mut reach = vec![false; n];
        reach[0] = true;
        for (i, b) in self.blocks.iter().enumerate() {
            for p in &b.inputs {
                if let Producer::Block(j) = p {
                    if reach[*j] {
                        reach[i] = true;
                    }
                }
            }
        }
        if reach.iter().any(|r| !r) {
            return Err(Error::Spec("every block must be reachable from the input".into()));
        }
        // Everything must reach the output block (reverse reachability).
        let mut reaches_out = vec![false; n];
        reaches_out[out] = true;
        for i in (0..n).rev() {
            if !reaches_out[i] {
                continue;
            }
            for p in &self.blocks[i].inputs {
                if let Producer::Block(j) = p {
                    reaches_out[*j] = true;
                }
            }
        }
        if reaches_out.iter().any(|r| !r) {
            return Err(Error::Spec("every block must reach the output".into()));
        }
        Ok(())
    }

    /// Stable hash of the structural content (shapes, edges, flops).
    pub fn graph_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(&json);
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Default testbed: a six-block U shape over 16x16 images with one skip
    /// connection from the first down block to the last up block.
    pub fn toy_unet6() -> Self {
        let data = DataShape::Image { h: 16, w: 16 };
        let blocks = vec![
            BlockSpec {
                name: "down0".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::StepInput],
                out_dim: 64,
            },
            BlockSpec {
                name: "down1".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::Block(0)],
                out_dim: 32,
            },
            BlockSpec {
                name: "mid0".into(),
                kind: BlockKind::Mid,
                inputs: vec![Producer::Block(1)],
                out_dim: 32,
            },
            BlockSpec {
                name: "mid1".into(),
                kind: BlockKind::Mid,
                inputs: vec![Producer::Block(2)],
                out_dim: 32,
            },
            BlockSpec {
                name: "up0".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(3)],
                out_dim: 64,
            },
            BlockSpec {
                name: "up1".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(4), Producer::Block(0)],
                out_dim: 256,
            },
        ];
        Self::with_computed_flops(data, blocks).expect("builtin spec is valid")
    }

    /// Nine-block U shape (4 down, 1 mid, 4 up) with a skip per resolution.
    pub fn unet9() -> Self {
        let data = DataShape::Image { h: 16, w: 16 };
        let dims = [64, 32, 16, 8, 8, 16, 32, 64, 256];
        let blocks = vec![
            BlockSpec {
                name: "down0".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::StepInput],
                out_dim: dims[0],
            },
            BlockSpec {
                name: "down1".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::Block(0)],
                out_dim: dims[1],
            },
            BlockSpec {
                name: "down2".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::Block(1)],
                out_dim: dims[2],
            },
            BlockSpec {
                name: "down3".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::Block(2)],
                out_dim: dims[3],
            },
            BlockSpec {
                name: "mid0".into(),
                kind: BlockKind::Mid,
                inputs: vec![Producer::Block(3)],
                out_dim: dims[4],
            },
            BlockSpec {
                name: "up0".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(4), Producer::Block(3)],
                out_dim: dims[5],
            },
            BlockSpec {
                name: "up1".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(5), Producer::Block(2)],
                out_dim: dims[6],
            },
            BlockSpec {
                name: "up2".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(6), Producer::Block(1)],
                out_dim: dims[7],
            },
            BlockSpec {
                name: "up3".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(7), Producer::Block(0)],
                out_dim: dims[8],
            },
        ];
        Self::with_computed_flops(data, blocks).expect("builtin spec is valid")
    }

    /// Minimal two-block chain over 2-vectors, for fast tests.
    pub fn chain2() -> Self {
        let data = DataShape::Vector { dim: 2 };
        let blocks = vec![
            BlockSpec {
                name: "down0".into(),
                kind: BlockKind::Down,
                inputs: vec![Producer::StepInput],
                out_dim: 4,
            },
            BlockSpec {
                name: "up0".into(),
                kind: BlockKind::Up,
                inputs: vec![Producer::Block(0)],
                out_dim: 2,
            },
        ];
        Self::with_computed_flops(data, blocks).expect("builtin spec is valid")
    }
}

/// Parameters of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    /// One (out_dim x d_e) matrix per in-edge, row-major.
    pub in_mats: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// (out_dim x TIME_EMBED_DIM)
    pub time: Vec<f64>,
    /// (out_dim x out_dim) applied to the nonlinearity.
    pub proj: Vec<f64>,
    /// (out_dim x d_main) linear shortcut on the main input.
    pub shortcut: Vec<f64>,
    pub bias2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserWeights {
    pub spec: DenoiserSpec,
    pub blocks: Vec<BlockWeights>,
}

/// Tape bindings of one block's parameters.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub in_mats: Vec<Var>,
    pub bias: Var,
    pub time: Var,
    pub proj: Var,
    pub shortcut: Var,
    pub bias2: Var,
}

#[derive(Debug, Clone)]
pub struct SharedBlock {
    pub in_mats: Vec<Rc<Vec<f64>>>,
    pub bias: Rc<Vec<f64>>,
    pub time: Rc<Vec<f64>>,
    pub proj: Rc<Vec<f64>>,
    pub shortcut: Rc<Vec<f64>>,
    pub bias2: Rc<Vec<f64>>,
}

/// Frozen parameters held behind `Rc` so segment tapes bind them for free.
#[derive(Debug, Clone)]
pub struct SharedWeights {
    pub blocks: Vec<SharedBlock>,
}

impl SharedWeights {
    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .map(|w| BoundBlock {
                in_mats: w
                    .in_mats
                    .iter()
                    .map(|m| tape.leaf_shared(m.clone()))
                    .collect(),
                bias: tape.leaf_shared(w.bias.clone()),
                time: tape.leaf_shared(w.time.clone()),
                proj: tape.leaf_shared(w.proj.clone()),
                shortcut: tape.leaf_shared(w.shortcut.clone()),
                bias2: tape.leaf_shared(w.bias2.clone()),
            })
            .collect()
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            n * std
        })
        .collect()
}

impl DenoiserWeights {
    pub fn init(spec: &DenoiserSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .blocks
            .iter()
            .map(|b| {
                let d_out = b.out_dim;
                let in_mats = b
                    .inputs
                    .iter()
                    .map(|p| {
                        let d_in = spec.input_dim(*p);
                        normal_matrix(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt())
                    })
                    .collect();
                let d_main = spec.input_dim(b.inputs[0]);
                BlockWeights {
                    in_mats,
                    bias: vec![0.0; d_out],
                    time: normal_matrix(
                        &mut rng,
                        d_out,
                        TIME_EMBED_DIM,
                        1.0 / (TIME_EMBED_DIM as f64).sqrt(),
                    ),
                    proj: normal_matrix(&mut rng, d_out, d_out, 1.0 / (d_out as f64).sqrt()),
                    shortcut: normal_matrix(&mut rng, d_out, d_main, 1.0 / (d_main as f64).sqrt()),
                    bias2: vec![0.0; d_out],
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            blocks,
        }
    }

    /// pre = sum_e M_e x_e + bias + U temb; out = V tanh(pre) + bias2 + S x_main.
    pub fn block_forward(&self, block: usize, inputs: &[&[f64]], temb: &[f64]) -> Vec<f64> {
        let spec_b = &self.spec.blocks[block];
        let w = &self.blocks[block];
        let d_out = spec_b.out_dim;
        debug_assert_eq!(inputs.len(), spec_b.inputs.len());
        let mut pre = vec![0.0; d_out];
        for (e, x) in inputs.iter().enumerate() {
            let d_in = self.spec.input_dim(spec_b.inputs[e]);
            debug_assert_eq!(x.len(), d_in);
            matvec_add(&w.in_mats[e], x, d_out, d_in, &mut pre);
        }
        for (p, b) in pre.iter_mut().zip(&w.bias) {
            *p += b;
        }
        matvec_add(&w.time, temb, d_out, TIME_EMBED_DIM, &mut pre);
        let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let mut out = vec![0.0; d_out];
        matvec_add(&w.proj, &h, d_out, d_out, &mut out);
        for (o, b) in out.iter_mut().zip(&w.bias2) {
            *o += b;
        }
        let d_main = self.spec.input_dim(spec_b.inputs[0]);
        matvec_add(&w.shortcut, inputs[0], d_out, d_main, &mut out);
        out
    }

    /// Reference-counted copy of the parameters for repeated frozen binding.
    pub fn to_shared(&self) -> SharedWeights {
        SharedWeights {
            blocks: self
                .blocks
                .iter()
                .map(|w| SharedBlock {
                    in_mats: w.in_mats.iter().map(|m| Rc::new(m.clone())).collect(),
                    bias: Rc::new(w.bias.clone()),
                    time: Rc::new(w.time.clone()),
                    proj: Rc::new(w.proj.clone()),
                    shortcut: Rc::new(w.shortcut.clone()),
                    bias2: Rc::new(w.bias2.clone()),
                })
                .collect(),
        }
    }

    /// Binds every parameter tensor onto a tape as leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .map(|w| BoundBlock {
                in_mats: w
                    .in_mats
                    .iter()
                    .map(|m| tape.leaf(m.clone(), requires_grad))
                    .collect(),
                bias: tape.leaf(w.bias.clone(), requires_grad),
                time: tape.leaf(w.time.clone(), requires_grad),
                proj: tape.leaf(w.proj.clone(), requires_grad),
                shortcut: tape.leaf(w.shortcut.clone(), requires_grad),
                bias2: tape.leaf(w.bias2.clone(), requires_grad),
            })
            .collect()
    }

    /// Tape twin of [`Self::block_forward`]; accumulation order matches.
    pub fn block_forward_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundBlock],
        block: usize,
        inputs: &[Var],
        temb: Var,
    ) -> Var {
        let spec_b = &self.spec.blocks[block];
        let bb = &bound[block];
        let d_out = spec_b.out_dim;
        let mut pre: Option<Var> = None;
        for (e, &x) in inputs.iter().enumerate() {
            let d_in = self.spec.input_dim(spec_b.inputs[e]);
            let y = tape.matvec(bb.in_mats[e], x, d_out, d_in);
            pre = Some(match pre {
                None => y,
                Some(p) => tape.add(p, y),
            });
        }
        let pre = pre.expect("block has at least one input");
        let pre = tape.add(pre, bb.bias);
        let t_proj = tape.matvec(bb.time, temb, d_out, TIME_EMBED_DIM);
        let pre = tape.add(pre, t_proj);
        let h = tape.tanh(pre);
        let out = tape.matvec(bb.proj, h, d_out, d_out);
        let out = tape.add(out, bb.bias2);
        let d_main = self.spec.input_dim(spec_b.inputs[0]);
        let sc = tape.matvec(bb.shortcut, inputs[0], d_out, d_main);
        tape.add(out, sc)
    }

    /// Deterministic iteration over every parameter tensor.
    pub fn param_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, w) in self.blocks.iter().enumerate() {
            for (e, m) in w.in_mats.iter().enumerate() {
                out.push((format!("block{i}.in{e}"), m.as_slice()));
            }
            out.push((format!("block{i}.bias"), w.bias.as_slice()));
            out.push((format!("block{i}.time"), w.time.as_slice()));
            out.push((format!("block{i}.proj"), w.proj.as_slice()));
            out.push((format!("block{i}.shortcut"), w.shortcut.as_slice()));
            out.push((format!("block{i}.bias2"), w.bias2.as_slice()));
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for w in self.blocks.iter_mut() {
            for m in w.in_mats.iter_mut() {
                out.push(m);
            }
            out.push(&mut w.bias);
            out.push(&mut w.time);
            out.push(&mut w.proj);
            out.push(&mut w.shortcut);
            out.push(&mut w.bias2);
        }
        out
    }

    /// SHA-256 over all parameter bytes in deterministic order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, tensor) in self.param_tensors() {
            h.update(name.as_bytes());
            for v in tensor {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn matvec_add(mat: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &mat[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] += acc;
    }
}

/// Standard sinusoidal embedding of an integer timestep.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        emb[2 * i] = angle.sin();
        emb[2 * i + 1] = angle.cos();
    }
    emb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_validate() {
        for spec in [DenoiserSpec::toy_unet6(), DenoiserSpec::unet9(), DenoiserSpec::chain2()] {
            spec.validate().unwrap();
            assert!(spec.per_block_flops.iter().all(|f| *f > 0.0));
        }
        assert_eq!(DenoiserSpec::toy_unet6().output_block(), 5);
        assert_eq!(DenoiserSpec::unet9().n_blocks(), 9);
    }

    #[test]
    fn rejects_malformed_graphs() {
        // Two sinks.
        let bad = DenoiserSpec::with_computed_flops(
            DataShape::Vector { dim: 2 },
            vec![
                BlockSpec {
                    name: "a".into(),
                    kind: BlockKind::Down,
                    inputs: vec![Producer::StepInput],
                    out_dim: 2,
                },
                BlockSpec {
                    name: "b".into(),
                    kind: BlockKind::Mid,
                    inputs: vec![Producer::Block(0)],
                    out_dim: 2,
                },
                BlockSpec {
                    name: "c".into(),
                    kind: BlockKind::Up,
                    inputs: vec![Producer::Block(0)],
                    out_dim: 2,
                },
            ],
        );
        assert!(bad.is_err());
        // Output dim mismatch.
        let bad = DenoiserSpec::with_computed_flops(
            DataShape::Vector { dim: 3 },
            vec![BlockSpec {
                name: "a".into(),
                kind: BlockKind::Mid,
                inputs: vec![Producer::StepInput],
                out_dim: 2,
            }],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward_exactly() {
        let spec = DenoiserSpec::toy_unet6();
        let weights = DenoiserWeights::init(&spec, 11);
        let x: Vec<f64> = (0..spec.data.len()).map(|i| ((i * 37 % 97) as f64) / 97.0 - 0.5).collect();
        let temb = sinusoidal_time_embedding(5, TIME_EMBED_DIM);

        // Plain pass over the whole graph.
        let mut plain_outs: Vec<Vec<f64>> = Vec::new();
        for b in 0..spec.n_blocks() {
            let inputs: Vec<&[f64]> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => x.as_slice(),
                    Producer::Block(i) => plain_outs[*i].as_slice(),
                })
                .collect();
            plain_outs.push(weights.block_forward(b, &inputs, &temb));
        }

        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(temb.clone());
        let mut vars: Vec<Var> = Vec::new();
        for b in 0..spec.n_blocks() {
            let inputs: Vec<Var> = spec.blocks[b]
                .inputs
                .iter()
                .map(|p| match p {
                    Producer::StepInput => xv,
                    Producer::Block(i) => vars[*i],
                })
                .collect();
            vars.push(weights.block_forward_tape(&mut tape, &bound, b, &inputs, tv));
        }
        for b in 0..spec.n_blocks() {
            assert_eq!(tape.value(vars[b]), plain_outs[b].as_slice(), "block {b}");
        }
    }

    #[test]
    fn mac_counts_are_integer_valued_and_stored() {
        let spec = DenoiserSpec::toy_unet6();
        for (i, f) in spec.per_block_flops.iter().enumerate() {
            assert_eq!(*f, spec.block_mac_count(i));
            assert_eq!(f.fract(), 0.0);
        }
        // up1: 256x64 (main) + 256x64 (skip) + 256x16 (time) + 256x256 (proj)
        // + 256x64 (shortcut)
        let expected = 256.0 * (64.0 + 64.0 + 16.0 + 256.0 + 64.0);
        assert_eq!(spec.per_block_flops[5], expected);
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let spec = DenoiserSpec::chain2();
        let w1 = DenoiserWeights::init(&spec, 1);
        let w2 = DenoiserWeights::init(&spec, 1);
        let w3 = DenoiserWeights::init(&spec, 2);
        assert_eq!(w1.content_hash(), w2.content_hash());
        assert_ne!(w1.content_hash(), w3.content_hash());
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = sinusoidal_time_embedding(7, TIME_EMBED_DIM);
        assert_eq!(e.len(), TIME_EMBED_DIM);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(
            sinusoidal_time_embedding(1, TIME_EMBED_DIM),
            sinusoidal_time_embedding(2, TIME_EMBED_DIM)
        );
    }
}

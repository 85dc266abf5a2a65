//! Plugin pruner network.
//!
//! N*T learnable queries pass through a query encoder (a per-query linear
//! stack, or a pre-norm single-head self-attention stack that lets queries
//! interact) into N*T independent two-layer head branches ending in a two-way
//! softmax. The keep-channel probability is the block's importance score.
//!
//! The final head layer starts at zero weights with keep-bias 1 and
//! remove-bias 0, so every initial score is e/(1+e) and every initial hard
//! gate is 1: the pruned chain starts identical to full inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{GateVector, SuperNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    LinearStack,
    SelfAttentionStack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    /// Query embedding dimension D.
    pub embed_dim: usize,
    /// Encoder depth L.
    pub depth: usize,
    pub encoder: EncoderKind,
    /// Hidden width of each head branch.
    pub head_hidden: usize,
    pub n_blocks: usize,
    pub t_steps: usize,
}

impl PrunerConfig {
    pub fn new(n_blocks: usize, t_steps: usize) -> Self {
        Self {
            embed_dim: 512,
            depth: 1,
            encoder: EncoderKind::SelfAttentionStack,
            head_hidden: 32,
            n_blocks,
            t_steps,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_blocks * self.t_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.head_hidden < 1 || self.n_blocks < 1 || self.t_steps < 1 {
            return Err(Error::Config("pruner dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderWeights {
    Linear(Vec<LinearLayer>),
    Attention(Vec<AttentionLayer>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBranch {
    /// (head_hidden x D)
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// (2 x head_hidden); row 0 is the remove channel, row 1 the keep channel.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerWeights {
    pub config: PrunerConfig,
    /// (N*T x D) query embeddings.
    pub queries: Vec<f64>,
    pub encoder: EncoderWeights,
    pub heads: Vec<HeadBranch>,
}

/// Continuous keep probabilities with the raw head logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Keep probability per node, step-major.
    pub s: Vec<f64>,
    /// (remove, keep) logits per node.
    pub logits: Vec<[f64; 2]>,
}

impl ImportanceScores {
    /// (keep, remove) probability pairs of the two-way softmax.
    pub fn prob_pairs(&self) -> Vec<(f64, f64)> {
        self.logits
            .iter()
            .map(|[r, k]| {
                let keep = 1.0 / (1.0 + (r - k).exp());
                let remove = 1.0 / (1.0 + (k - r).exp());
                (keep, remove)
            })
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
            v * std
        })
        .collect()
}

/// Initializes pruner weights: small random queries and encoder, zero final
/// head weights with keep-bias 1.
pub fn init_pruner(config: &PrunerConfig, seed: u64) -> Result<PrunerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let nq = config.n_queries();
    let queries = normal(&mut rng, nq * d, 0.02);
    let std = 1.0 / (d as f64).sqrt();
    let encoder = match config.encoder {
        EncoderKind::LinearStack => EncoderWeights::Linear(
            (0..config.depth)
                .map(|_| LinearLayer {
                    w: normal(&mut rng, d * d, std),
                    b: vec![0.0; d],
                })
                .collect(),
        ),
        EncoderKind::SelfAttentionStack => EncoderWeights::Attention(
            (0..config.depth)
                .map(|_| AttentionLayer {
                    ln1_gain: vec![1.0; d],
                    ln1_bias: vec![0.0; d],
                    wq: normal(&mut rng, d * d, std),
                    wk: normal(&mut rng, d * d, std),
                    wv: normal(&mut rng, d * d, std),
                    wo: normal(&mut rng, d * d, std),
                    ln2_gain: vec![1.0; d],
                    ln2_bias: vec![0.0; d],
                    w_fc: normal(&mut rng, d * d, std),
                    b_fc: vec![0.0; d],
                    w_out: normal(&mut rng, d * d, std),
                    b_out: vec![0.0; d],
                })
                .collect(),
        ),
    };
    let h = config.head_hidden;
    let heads = (0..nq)
        .map(|_| HeadBranch {
            w1: normal(&mut rng, h * d, std),
            b1: vec![0.0; h],
            w2: vec![0.0; 2 * h],
            b2: vec![0.0, 1.0],
        })
        .collect();
    Ok(PrunerWeights {
        config: config.clone(),
        queries,
        encoder,
        heads,
    })
}

impl PrunerWeights {
    pub fn param_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("queries".into(), self.queries.as_slice())];
        match &self.encoder {
            EncoderWeights::Linear(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("enc{i}.w"), l.w.as_slice()));
                    out.push((format!("enc{i}.b"), l.b.as_slice()));
                }
            }
            EncoderWeights::Attention(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    for (name, t) in [
                        ("ln1_gain", &l.ln1_gain),
                        ("ln1_bias", &l.ln1_bias),
                        ("wq", &l.wq),
                        ("wk", &l.wk),
                        ("wv", &l.wv),
                        ("wo", &l.wo),
                        ("ln2_gain", &l.ln2_gain),
                        ("ln2_bias", &l.ln2_bias),
                        ("w_fc", &l.w_fc),
                        ("b_fc", &l.b_fc),
                        ("w_out", &l.w_out),
                        ("b_out", &l.b_out),
                    ] {
                        out.push((format!("enc{i}.{name}"), t.as_slice()));
                    }
                }
            }
        }
        for (k, head) in self.heads.iter().enumerate() {
            out.push((format!("head{k}.w1"), head.w1.as_slice()));
            out.push((format!("head{k}.b1"), head.b1.as_slice()));
            out.push((format!("head{k}.w2"), head.w2.as_slice()));
            out.push((format!("head{k}.b2"), head.b2.as_slice()));
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.queries];
        match &mut self.encoder {
            EncoderWeights::Linear(layers) => {
                for l in layers.iter_mut() {
                    out.push(&mut l.w);
                    out.push(&mut l.b);
                }
            }
            EncoderWeights::Attention(layers) => {
                for l in layers.iter_mut() {
                    out.push(&mut l.ln1_gain);
                    out.push(&mut l.ln1_bias);
                    out.push(&mut l.wq);
                    out.push(&mut l.wk);
                    out.push(&mut l.wv);
                    out.push(&mut l.wo);
                    out.push(&mut l.ln2_gain);
                    out.push(&mut l.ln2_bias);
                    out.push(&mut l.w_fc);
                    out.push(&mut l.b_fc);
                    out.push(&mut l.w_out);
                    out.push(&mut l.b_out);
                }
            }
        }
        for head in self.heads.iter_mut() {
            out.push(&mut head.w1);
            out.push(&mut head.b1);
            out.push(&mut head.w2);
            out.push(&mut head.b2);
        }
        out
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.param_tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape forward of the pruner with handles for training.
pub struct PrunerForward {
    pub tape: Tape,
    /// Length-1 score variables, step-major.
    pub score_vars: Vec<Var>,
    pub scores: ImportanceScores,
    /// Parameter leaves aligned with `param_tensors()`.
    pub param_vars: Vec<Var>,
}

/// Runs the pruner on a fresh tape. Deterministic in the weights.
pub fn pruner_forward(weights: &PrunerWeights, requires_grad: bool) -> PrunerForward {
    let cfg = &weights.config;
    let d = cfg.embed_dim;
    let nq = cfg.n_queries();
    let h = cfg.head_hidden;
    let mut tape = Tape::new();
    let mut param_vars = Vec::new();

    let queries = tape.leaf(weights.queries.clone(), requires_grad);
    param_vars.push(queries);

    let mut x = queries;
    match &weights.encoder {
        EncoderWeights::Linear(layers) => {
            for l in layers {
                let w = tape.leaf(l.w.clone(), requires_grad);
                let b = tape.leaf(l.b.clone(), requires_grad);
                param_vars.push(w);
                param_vars.push(b);
                let y = tape.matmul(x, w, nq, d, d, false, true);
                let y = tape.add_row(y, b, nq, d);
                x = tape.tanh(y);
            }
        }
        EncoderWeights::Attention(layers) => {
            for l in layers {
                let ln1_gain = tape.leaf(l.ln1_gain.clone(), requires_grad);
                let ln1_bias = tape.leaf(l.ln1_bias.clone(), requires_grad);
                let wq = tape.leaf(l.wq.clone(), requires_grad);
                let wk = tape.leaf(l.wk.clone(), requires_grad);
                let wv = tape.leaf(l.wv.clone(), requires_grad);
                let wo = tape.leaf(l.wo.clone(), requires_grad);
                let ln2_gain = tape.leaf(l.ln2_gain.clone(), requires_grad);
                let ln2_bias = tape.leaf(l.ln2_bias.clone(), requires_grad);
                let w_fc = tape.leaf(l.w_fc.clone(), requires_grad);
                let b_fc = tape.leaf(l.b_fc.clone(), requires_grad);
                let w_out = tape.leaf(l.w_out.clone(), requires_grad);
                let b_out = tape.leaf(l.b_out.clone(), requires_grad);
                param_vars.extend([
                    ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_fc, b_fc, w_out,
                    b_out,
                ]);

                let normed = tape.layer_norm(x, ln1_gain, ln1_bias, nq, d);
                let q = tape.matmul(normed, wq, nq, d, d, false, true);
                let k = tape.matmul(normed, wk, nq, d, d, false, true);
                let v = tape.matmul(normed, wv, nq, d, d, false, true);
                let scores = tape.matmul(q, k, nq, d, nq, false, true);
                let scaled = tape.mul_scalar(scores, 1.0 / (d as f64).sqrt());
                let attn = tape.row_softmax(scaled, nq, nq);
                let mixed = tape.matmul(attn, v, nq, nq, d, false, false);
                let proj = tape.matmul(mixed, wo, nq, d, d, false, true);
                x = tape.add(x, proj);

                let normed2 = tape.layer_norm(x, ln2_gain, ln2_bias, nq, d);
                let f = tape.matmul(normed2, w_fc, nq, d, d, false, true);
                let f = tape.add_row(f, b_fc, nq, d);
                let f = tape.tanh(f);
                let f = tape.matmul(f, w_out, nq, d, d, false, true);
                let f = tape.add_row(f, b_out, nq, d);
                x = tape.add(x, f);
            }
        }
    }

    let mut score_vars = Vec::with_capacity(nq);
    let mut scores = Vec::with_capacity(nq);
    let mut logits = Vec::with_capacity(nq);
    for (k, head) in weights.heads.iter().enumerate() {
        let w1 = tape.leaf(head.w1.clone(), requires_grad);
        let b1 = tape.leaf(head.b1.clone(), requires_grad);
        let w2 = tape.leaf(head.w2.clone(), requires_grad);
        let b2 = tape.leaf(head.b2.clone(), requires_grad);
        param_vars.extend([w1, b1, w2, b2]);

        let row = tape.slice(x, k * d, d);
        let hid = tape.matvec(w1, row, h, d);
        let hid = tape.add(hid, b1);
        let hid = tape.tanh(hid);
        let z = tape.matvec(w2, hid, 2, h);
        let z = tape.add(z, b2);
        let keep = tape.slice(z, 1, 1);
        let remove = tape.slice(z, 0, 1);
        let diff = tape.sub(keep, remove);
        let s = tape.sigmoid(diff);
        logits.push([tape.value(z)[0], tape.value(z)[1]]);
        scores.push(tape.scalar_value(s));
        score_vars.push(s);
    }
    PrunerForward {
        tape,
        score_vars,
        scores: ImportanceScores { s: scores, logits },
        param_vars,
    }
}

/// Deterministic score prediction on frozen weights.
pub fn predict_scores(weights: &PrunerWeights) -> ImportanceScores {
    pruner_forward(weights, false).scores
}

/// Hard gate derived from scores with the straight-through contract.
#[derive(Debug, Clone)]
pub struct StGate {
    pub gate: GateVector,
    /// Elementwise (s >= 0.5) before mandatory masking and cascade closure.
    pub raw: Vec<u8>,
    /// Nodes whose final value was forced (mandatory mask, or flipped from
    /// keep to remove by the cascade); these pass no gradient back to scores.
    pub forced: Vec<bool>,
}

/// Thresholds scores at 0.5, applies the mandatory mask and cascade closure,
/// and marks which assignments were forced.
pub fn st_gate(scores: &[f64], net: &SuperNet) -> Result<StGate> {
    if scores.len() != net.node_count() {
        return Err(Error::Shape {
            expected: format!("{}", net.node_count()),
            got: format!("{}", scores.len()),
        });
    }
    let raw: Vec<u8> = scores.iter().map(|s| u8::from(*s >= 0.5)).collect();
    let mut pre_cascade = raw.clone();
    let mut forced = vec![false; raw.len()];
    for (k, m) in net.mandatory_mask.iter().enumerate() {
        if *m {
            pre_cascade[k] = 1;
            forced[k] = true;
        }
    }
    let gate = net.cascade_close(&pre_cascade);
    for k in 0..gate.len() {
        if pre_cascade[k] == 1 && gate.gate[k] == 0 {
            forced[k] = true;
        }
    }
    Ok(StGate { gate, raw, forced })
}

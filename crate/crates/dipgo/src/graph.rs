//! SuperNet construction over the unrolled sampler.
//!
//! The SuperNet expands the denoiser's block DAG over all T timesteps in
//! step-major order (node k = (step - 1) * N + block, steps 1-based in
//! execution order). Every input of every block at steps after the first
//! gains a backup edge to the producing block's previous-step instance;
//! the first step has no backup source, so all of its nodes are mandatory.
//!
//! A block j *depends on* k when every intra-step path from the step input
//! to j passes through k (k dominates j); removing k then leaves j without
//! a live within-step input path and forces it out too. The dependents table
//! is transitively closed by the transitivity of dominance.

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserSpec, Producer};
use crate::error::{Error, Result};

/// Expanded block graph over all timesteps.
#[derive(Debug, Clone)]
pub struct SuperNet {
    pub n_blocks: usize,
    pub t_steps: usize,
    pub spec: DenoiserSpec,
    /// Within-step dependents per block: `dependents[b]` lists blocks forced
    /// out when b is removed (same step), ascending.
    pub dependents: Vec<Vec<usize>>,
    /// Backup edges: (consumer node, producer block at previous step).
    pub backup_edges: Vec<(usize, usize)>,
    pub mandatory_mask: Vec<bool>,
    /// Flops of each node (the per-block counts replicated per step).
    pub node_flops: Vec<f64>,
}

/// Binary keep/remove decisions, step-major, always legal by construction
/// (mandatory respected, cascade-closed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVector {
    pub gate: Vec<u8>,
}

impl GateVector {
    pub fn all_keep(len: usize) -> Self {
        Self { gate: vec![1; len] }
    }

    pub fn len(&self) -> usize {
        self.gate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gate.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.gate.iter().map(|&g| g as usize).sum()
    }

    /// True when `self` keeps no node that `other` removes.
    pub fn le(&self, other: &GateVector) -> bool {
        self.gate.iter().zip(&other.gate).all(|(a, b)| a <= b)
    }

    /// Short content hash of the bit pattern, for search logs.
    pub fn short_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(&self.gate);
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Marginal flops-reduction ratios per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsProfile {
    pub gamma: Vec<f64>,
    pub total_flops: f64,
}

impl SuperNet {
    pub fn node_count(&self) -> usize {
        self.n_blocks * self.t_steps
    }

    pub fn node_of(&self, step: usize, block: usize) -> usize {
        debug_assert!(step >= 1 && step <= self.t_steps && block < self.n_blocks);
        (step - 1) * self.n_blocks + block
    }

    pub fn step_block(&self, node: usize) -> (usize, usize) {
        (node / self.n_blocks + 1, node % self.n_blocks)
    }

    /// Checks length, mandatory nodes and cascade closure; reports the first
    /// violating node.
    pub fn validate_gate(&self, gate: &GateVector) -> Result<()> {
        if gate.len() != self.node_count() {
            return Err(Error::Shape {
                expected: format!("{}", self.node_count()),
                got: format!("{}", gate.len()),
            });
        }
        for (k, &g) in gate.gate.iter().enumerate() {
            if g > 1 {
                return Err(Error::IllegalGate {
                    node: k,
                    reason: format!("gate value {g} is not binary"),
                });
            }
            if self.mandatory_mask[k] && g == 0 {
                return Err(Error::IllegalGate {
                    node: k,
                    reason: "mandatory initial-step node removed".into(),
                });
            }
            if g == 0 {
                let (step, block) = self.step_block(k);
                for &dep in &self.dependents[block] {
                    let j = self.node_of(step, dep);
                    if gate.gate[j] != 0 {
                        return Err(Error::IllegalGate {
                            node: j,
                            reason: format!("kept while its dominator node {k} is removed"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Forces mandatory nodes on, then removes every removed node's
    /// dependents to a fixpoint. Total on arbitrary binary input; idempotent.
    pub fn cascade_close(&self, raw: &[u8]) -> GateVector {
        assert_eq!(raw.len(), self.node_count(), "gate length mismatch");
        let mut gate: Vec<u8> = raw.iter().map(|&g| u8::from(g != 0)).collect();
        for (k, m) in self.mandatory_mask.iter().enumerate() {
            if *m {
                gate[k] = 1;
            }
        }
        let mut changed = true;
        while changed {
            changed = false;
            for k in 0..gate.len() {
                if gate[k] != 0 {
                    continue;
                }
                let (step, block) = self.step_block(k);
                for &dep in &self.dependents[block] {
                    let j = self.node_of(step, dep);
                    if gate[j] != 0 {
                        gate[j] = 0;
                        changed = true;
                    }
                }
            }
        }
        GateVector { gate }
    }

    /// Executed flops under a gate: sum of node flops over kept nodes.
    pub fn executed_flops(&self, gate: &GateVector) -> f64 {
        self.node_flops
            .iter()
            .zip(&gate.gate)
            .map(|(f, &g)| if g != 0 { *f } else { 0.0 })
            .sum()
    }

    pub fn total_flops(&self) -> f64 {
        self.node_flops.iter().sum()
    }

    /// Flops-weighted pruning ratio: 1 - executed / total.
    pub fn pruning_ratio(&self, gate: &GateVector) -> f64 {
        1.0 - self.executed_flops(gate) / self.total_flops()
    }

    /// Stable hash of the expanded graph structure.
    pub fn graph_hash(&self) -> String {
        format!("{}-t{}", self.spec.graph_hash(), self.t_steps)
    }
}

/// Immediate-dominance-derived dependents of each block in the intra-step DAG.
///
/// Iterative dominator dataflow over the single-entry DAG: Dom(entry) =
/// {entry}; Dom(j) = {j} plus the intersection of its producers' dominator
/// sets (the step input acts as the virtual entry above block 0).
fn block_dependents(spec: &DenoiserSpec) -> Vec<Vec<usize>> {
    let n = spec.n_blocks();
    // dom[j] = bitset of blocks through which every input path to j passes.
    let mut dom: Vec<Vec<bool>> = Vec::with_capacity(n);
    for (j, b) in spec.blocks.iter().enumerate() {
        let mut d = vec![false; n];
        let producer_blocks: Vec<usize> = b
            .inputs
            .iter()
            .filter_map(|p| match p {
                Producer::StepInput => None,
                Producer::Block(i) => Some(*i),
            })
            .collect();
        let consumes_step_input = b.inputs.iter().any(|p| matches!(p, Producer::StepInput));
        if !consumes_step_input {
            // Intersect producers' dominator sets (blocks are topologically
            // ordered so every producer is already computed).
            for bit in d.iter_mut() {
                *bit = true;
            }
            for &p in &producer_blocks {
                let mut with_self = dom[p].clone();
                with_self[p] = true;
                for (bit, pb) in d.iter_mut().zip(&with_self) {
                    *bit = *bit && *pb;
                }
            }
        } else if !producer_blocks.is_empty() {
            // A direct step-input edge is an alternative path that bypasses
            // every other block: only blocks dominating *all* edges count,
            // and the step-input edge is dominated by nothing.
            for bit in d.iter_mut() {
                *bit = false;
            }
        }
        d[j] = false; // a block is not its own dependent
        dom.push(d);
    }
    let mut dependents = vec![Vec::new(); n];
    for (j, d) in dom.iter().enumerate() {
        for (k, &is_dom) in d.iter().enumerate() {
            if is_dom {
                dependents[k].push(j);
            }
        }
    }
    dependents
}

/// Expands a denoiser spec over `t_steps` timesteps.
pub fn build_supernet(spec: &DenoiserSpec, t_steps: usize) -> Result<SuperNet> {
    spec.validate()?;
    if t_steps < 2 {
        return Err(Error::Config(
            "supernet needs at least 2 timesteps (no backup source exists for T < 2)".into(),
        ));
    }
    let n = spec.n_blocks();
    let dependents = block_dependents(spec);
    let mut backup_edges = Vec::new();
    for step in 2..=t_steps {
        for (b, block) in spec.blocks.iter().enumerate() {
            let node = (step - 1) * n + b;
            for p in &block.inputs {
                if let Producer::Block(i) = p {
                    backup_edges.push((node, *i));
                }
            }
            let _ = node;
        }
    }
    let mut mandatory_mask = vec![false; n * t_steps];
    for m in mandatory_mask.iter_mut().take(n) {
        *m = true;
    }
    let node_flops: Vec<f64> = (0..n * t_steps)
        .map(|k| spec.per_block_flops[k % n])
        .collect();
    Ok(SuperNet {
        n_blocks: n,
        t_steps,
        spec: spec.clone(),
        dependents,
        backup_edges,
        mandatory_mask,
        node_flops,
    })
}

/// Per-node flops-reduction ratios: gamma[k] covers node k plus its
/// dependents, normalized by the total flops over all N*T nodes.
pub fn gamma_profile(net: &SuperNet) -> Result<FlopsProfile> {
    let total = net.total_flops();
    if !(total > 0.0) {
        return Err(Error::Config("total flops must be positive".into()));
    }
    let mut gamma = Vec::with_capacity(net.node_count());
    for k in 0..net.node_count() {
        let (_, block) = net.step_block(k);
        let mut flops = net.node_flops[k];
        for &dep in &net.dependents[block] {
            flops += net.spec.per_block_flops[dep];
        }
        gamma.push(flops / total);
    }
    Ok(FlopsProfile {
        gamma,
        total_flops: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Path-enumeration oracle: j depends on k iff every step-input -> j
    /// path in the intra-step DAG contains k.
    fn dependents_oracle(spec: &DenoiserSpec) -> Vec<Vec<usize>> {
        let n = spec.n_blocks();
        // Enumerate all paths from the virtual input to each block.
        fn paths_to(spec: &DenoiserSpec, j: usize) -> Vec<Vec<usize>> {
            let mut result = Vec::new();
            for p in &spec.blocks[j].inputs {
                match p {
                    Producer::StepInput => result.push(vec![j]),
                    Producer::Block(i) => {
                        for mut path in paths_to(spec, *i) {
                            path.push(j);
                            result.push(path);
                        }
                    }
                }
            }
            result
        }
        let mut dependents = vec![Vec::new(); n];
        for j in 0..n {
            let paths = paths_to(spec, j);
            for k in 0..n {
                if k == j {
                    continue;
                }
                if !paths.is_empty() && paths.iter().all(|p| p.contains(&k)) {
                    dependents[k].push(j);
                }
            }
        }
        dependents
    }

    #[test]
    fn node_count_and_search_space_match_unet9_at_50_steps() {
        let net = build_supernet(&DenoiserSpec::unet9(), 50).unwrap();
        assert_eq!(net.node_count(), 450);
        // log2 of the search space is one bit per node.
        let log2_choices = net.node_count() as f64;
        assert_eq!(log2_choices, 450.0);
        assert!(log2_choices * std::f64::consts::LN_2 / std::f64::consts::LN_10 > 135.0);
    }

    #[test]
    fn initial_step_is_mandatory_and_t1_is_rejected() {
        let spec = DenoiserSpec::toy_unet6();
        assert!(build_supernet(&spec, 1).is_err());
        let net = build_supernet(&spec, 2).unwrap();
        let mandatory = net.mandatory_mask.iter().filter(|m| **m).count();
        assert_eq!(mandatory, spec.n_blocks());
        assert!(net.mandatory_mask[..spec.n_blocks()].iter().all(|m| *m));
    }

    #[test]
    fn dependents_match_path_enumeration_oracle_on_toy_graph() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 3).unwrap();
        assert_eq!(net.dependents, dependents_oracle(&spec));
        // down0 dominates everything downstream of the step input.
        assert_eq!(net.dependents[0], vec![1, 2, 3, 4, 5]);
        // up1 is reachable through the skip, so the chain interior does not
        // dominate it.
        assert_eq!(net.dependents[1], vec![2, 3, 4]);
        assert_eq!(net.dependents[4], Vec::<usize>::new());
    }

    #[test]
    fn dependents_match_oracle_on_unet9() {
        let spec = DenoiserSpec::unet9();
        let net = build_supernet(&spec, 2).unwrap();
        assert_eq!(net.dependents, dependents_oracle(&spec));
    }

    #[test]
    fn cascade_keeps_all_ones_and_is_idempotent() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 4).unwrap();
        let all = vec![1u8; net.node_count()];
        assert_eq!(net.cascade_close(&all).gate, all);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let raw: Vec<u8> = (0..net.node_count()).map(|_| rng.gen_range(0..=1)).collect();
            let once = net.cascade_close(&raw);
            let twice = net.cascade_close(&once.gate);
            assert_eq!(once, twice);
            net.validate_gate(&once).unwrap();
        }
    }

    #[test]
    fn zeroing_one_block_removes_exactly_its_dependents() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 4).unwrap();
        let oracle = dependents_oracle(&spec);
        for block in 0..spec.n_blocks() {
            let step = 3;
            let mut raw = vec![1u8; net.node_count()];
            raw[net.node_of(step, block)] = 0;
            let closed = net.cascade_close(&raw);
            let mut expected = vec![1u8; net.node_count()];
            expected[net.node_of(step, block)] = 0;
            for &dep in &oracle[block] {
                expected[net.node_of(step, dep)] = 0;
            }
            assert_eq!(closed.gate, expected, "block {block}");
        }
    }

    #[test]
    fn mandatory_nodes_resist_removal() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 3).unwrap();
        let mut raw = vec![1u8; net.node_count()];
        raw[0] = 0; // first block of the initial step
        let closed = net.cascade_close(&raw);
        assert!(closed.gate.iter().take(spec.n_blocks()).all(|&g| g == 1));
    }

    #[test]
    fn gamma_profile_matches_prune_and_measure_oracle() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 5).unwrap();
        let profile = gamma_profile(&net).unwrap();
        assert_eq!(profile.total_flops, net.total_flops());
        let full = net.executed_flops(&GateVector::all_keep(net.node_count()));
        for k in net.n_blocks..net.node_count() {
            // Brute force: remove node k, cascade, measure the flops drop.
            let mut raw = vec![1u8; net.node_count()];
            raw[k] = 0;
            let closed = net.cascade_close(&raw);
            let removed = full - net.executed_flops(&closed);
            assert_eq!(
                profile.gamma[k],
                removed / profile.total_flops,
                "node {k}"
            );
        }
        for g in &profile.gamma {
            assert!((0.0..=1.0).contains(g));
        }
    }

    #[test]
    fn gamma_of_dependent_free_node_is_own_share() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 3).unwrap();
        let profile = gamma_profile(&net).unwrap();
        // up0 (block 4) has no dependents.
        let k = net.node_of(2, 4);
        assert_eq!(profile.gamma[k], net.node_flops[k] / profile.total_flops);
    }

    #[test]
    fn validate_gate_reports_first_violation() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 3).unwrap();
        let mut gate = GateVector::all_keep(net.node_count());
        gate.gate[net.node_of(2, 0)] = 0; // remove down0 but keep dependents
        match net.validate_gate(&gate) {
            Err(Error::IllegalGate { node, .. }) => {
                assert_eq!(node, net.node_of(2, 1));
            }
            other => panic!("expected IllegalGate, got {other:?}"),
        }
        let mut gate = GateVector::all_keep(net.node_count());
        gate.gate[2] = 0; // mandatory node
        assert!(matches!(
            net.validate_gate(&gate),
            Err(Error::IllegalGate { node: 2, .. })
        ));
    }

    #[test]
    fn backup_edges_cover_non_initial_intra_step_inputs() {
        let spec = DenoiserSpec::toy_unet6();
        let net = build_supernet(&spec, 3).unwrap();
        let intra_edges: usize = spec
            .blocks
            .iter()
            .flat_map(|b| &b.inputs)
            .filter(|p| matches!(p, Producer::Block(_)))
            .count();
        assert_eq!(net.backup_edges.len(), intra_edges * (3 - 1));
    }
}

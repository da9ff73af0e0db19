//! Forward execution with hooks, caches, and interventions.
//!
//! Two paths share the numeric kernels in [`crate::tensor`]:
//!
//! * [`run`] — the plain-buffer engine. Supports edge patches (replace one
//!   source's contribution in one destination's input at one position),
//!   attention-pattern patches (`α · A_source`, rows not re-normalized),
//!   residual-stream additions, and full activation caching.
//! * [`run_taped`] — records the same forward on a [`Tape`] and exposes a
//!   tensor id per destination input, so one backward pass yields the
//!   gradient of any output metric with respect to every edge at every
//!   position.
//!
//! Destination inputs are assembled as running sums over source
//! contributions, which keeps "node input = Σ incoming edge activations"
//! exact and makes patching the full edge set from another run reproduce
//! that run's logits.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, Edge, NodeId};
use crate::model::{ActKind, AttnKind, ModelConfig, NormKind, Parameters};
use crate::rng::SeedStreams;
use crate::tape::{Tape, TensorId};
use crate::tensor::{self, Tensor, RMS_EPS};
use crate::tokenizer::TokenId;

/// Replace `edge.src`'s contribution to `edge.dst` at token position `pos`
/// with `value` (a d_model vector, usually cached from another run).
#[derive(Debug, Clone)]
pub struct EdgePatch {
    pub edge: Edge,
    pub pos: usize,
    pub value: Vec<f64>,
}

/// Use `alpha · pattern` as the post-softmax attention matrix of one head.
/// Rows are deliberately not re-normalized afterwards.
#[derive(Debug, Clone)]
pub struct HeadPatternPatch {
    pub layer: usize,
    pub head: usize,
    pub pattern: Tensor,
    pub alpha: f64,
}

/// Add `value` to the residual stream entering `layer` at position `pos`
/// (`layer == n_layers` addresses the final pre-norm stream).
#[derive(Debug, Clone)]
pub struct ResidualAdd {
    pub layer: usize,
    pub pos: usize,
    pub value: Vec<f64>,
}

/// Ablate every edge instance not in `keep`: destination inputs are rebuilt
/// from `cache` (another run of equal length), with only the kept edges
/// carrying this run's live contributions.
#[derive(Debug, Clone)]
pub struct Ablation<'a> {
    pub cache: &'a ActivationCache,
    pub keep: std::collections::HashSet<(Edge, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunPlan<'a> {
    pub edge_patches: Vec<EdgePatch>,
    pub head_patches: Vec<HeadPatternPatch>,
    pub residual_adds: Vec<ResidualAdd>,
    pub ablation: Option<Ablation<'a>>,
    pub want_cache: bool,
}

impl RunPlan<'_> {
    pub fn cached() -> RunPlan<'static> {
        RunPlan { want_cache: true, ..Default::default() }
    }
}

/// Everything a run recorded: one tensor per graph node and position, the
/// per-head attention patterns, and the residual stream at every layer
/// boundary (index `n_layers` is the final pre-norm stream).
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub seq_len: usize,
    pub contributions: BTreeMap<NodeId, Tensor>,
    pub inputs: BTreeMap<NodeId, Tensor>,
    pub attn_patterns: BTreeMap<(usize, usize), Tensor>,
    pub resid: Vec<Tensor>,
}

impl ActivationCache {
    /// The activation of a node at one position: its residual contribution
    /// for sources, its assembled input for destinations.
    pub fn node_activation(&self, node: NodeId, pos: usize) -> Result<&[f64]> {
        let t = if node.is_source() {
            self.contributions.get(&node)
        } else {
            self.inputs.get(&node)
        };
        let t = t.ok_or_else(|| Error::UnknownEdge(node.to_string()))?;
        if pos >= self.seq_len {
            return Err(Error::UnknownEdge(format!("{node} has no position {pos}")));
        }
        Ok(t.row(pos))
    }

    /// Source contribution vector at one position.
    pub fn contribution(&self, src: NodeId, pos: usize) -> Result<&[f64]> {
        self.contributions
            .get(&src)
            .map(|t| t.row(pos))
            .ok_or_else(|| Error::UnknownEdge(src.to_string()))
    }

    pub fn residual(&self, layer: usize, pos: usize) -> Result<&[f64]> {
        self.resid
            .get(layer)
            .map(|t| t.row(pos))
            .ok_or_else(|| Error::InvalidIntervention(format!("no residual stream {layer}")))
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub logits: Tensor,
    pub cache: Option<ActivationCache>,
}

// ── plan validation ─────────────────────────────────────────────────────

struct CheckedPlan<'a> {
    edge_by_dst: HashMap<NodeId, Vec<(NodeId, usize, &'a [f64])>>,
    head_by_id: HashMap<(usize, usize), (&'a Tensor, f64)>,
    adds_by_layer: HashMap<usize, Vec<(usize, &'a [f64])>>,
    keep_by_dst: Option<HashMap<NodeId, Vec<(NodeId, usize)>>>,
}

fn check_plan<'a>(
    plan: &'a RunPlan<'a>,
    config: &ModelConfig,
    graph: &ComputationGraph,
    seq: usize,
) -> Result<CheckedPlan<'a>> {
    let mut edge_by_dst: HashMap<NodeId, Vec<(NodeId, usize, &[f64])>> = HashMap::new();
    for p in &plan.edge_patches {
        if !graph.has_edge(&p.edge) {
            return Err(Error::UnknownEdge(p.edge.to_string()));
        }
        if p.pos >= seq {
            return Err(Error::UnknownEdge(format!("{} has no position {}", p.edge, p.pos)));
        }
        if p.value.len() != config.d_model {
            return Err(Error::ShapeMismatch {
                op: "edge_patch",
                detail: format!("value has {} entries, want {}", p.value.len(), config.d_model),
            });
        }
        edge_by_dst.entry(p.edge.dst).or_default().push((p.edge.src, p.pos, &p.value));
    }

    let mut head_by_id = HashMap::new();
    for p in &plan.head_patches {
        if p.layer >= config.n_layers || p.head >= config.n_heads {
            return Err(Error::InvalidIntervention(format!(
                "head ({}, {}) out of range",
                p.layer, p.head
            )));
        }
        if p.pattern.shape() != [seq, seq] {
            return Err(Error::ShapeMismatch {
                op: "head_pattern_patch",
                detail: format!("pattern {:?}, want [{seq}, {seq}]", p.pattern.shape()),
            });
        }
        for i in 0..seq {
            for j in (i + 1)..seq {
                if p.pattern.data()[i * seq + j] != 0.0 {
                    return Err(Error::InvalidIntervention(
                        "source pattern must be row-causal".into(),
                    ));
                }
            }
        }
        if !(p.alpha >= 0.0) {
            return Err(Error::InvalidIntervention(format!("alpha {} must be ≥ 0", p.alpha)));
        }
        head_by_id.insert((p.layer, p.head), (&p.pattern, p.alpha));
    }

    let mut adds_by_layer: HashMap<usize, Vec<(usize, &[f64])>> = HashMap::new();
    for a in &plan.residual_adds {
        if a.layer > config.n_layers || a.pos >= seq {
            return Err(Error::InvalidIntervention(format!(
                "residual add at layer {} pos {} out of range",
                a.layer, a.pos
            )));
        }
        if a.value.len() != config.d_model {
            return Err(Error::ShapeMismatch {
                op: "residual_add",
                detail: format!("value has {} entries, want {}", a.value.len(), config.d_model),
            });
        }
        adds_by_layer.entry(a.layer).or_default().push((a.pos, &a.value));
    }

    let keep_by_dst = match &plan.ablation {
        Some(ab) => {
            if !plan.edge_patches.is_empty() {
                return Err(Error::InvalidIntervention(
                    "edge patches and ablation cannot be combined in one run".into(),
                ));
            }
            if ab.cache.seq_len != seq {
                return Err(Error::ShapeMismatch {
                    op: "ablation",
                    detail: format!("cache length {} vs run length {seq}", ab.cache.seq_len),
                });
            }
            let mut by_dst: HashMap<NodeId, Vec<(NodeId, usize)>> = HashMap::new();
            for &(edge, pos) in &ab.keep {
                if !graph.has_edge(&edge) {
                    return Err(Error::UnknownEdge(edge.to_string()));
                }
                if pos >= seq {
                    return Err(Error::UnknownEdge(format!("{edge} has no position {pos}")));
                }
                by_dst.entry(edge.dst).or_default().push((edge.src, pos));
            }
            // Fixed application order for bit-reproducible sums.
            for list in by_dst.values_mut() {
                list.sort();
            }
            Some(by_dst)
        }
        None => None,
    };

    Ok(CheckedPlan { edge_by_dst, head_by_id, adds_by_layer, keep_by_dst })
}

// ── the plain engine ────────────────────────────────────────────────────

pub fn run(params: &Parameters, tokens: &[TokenId], plan: &RunPlan) -> Result<RunOutput> {
    let config = &params.config;
    let seq = tokens.len();
    if seq == 0 || seq > config.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "sequence length {seq} outside 1..={}",
            config.max_seq_len
        )));
    }
    for &t in tokens {
        if t >= config.vocab_size {
            return Err(Error::TokenOutOfRange { id: t, vocab: config.vocab_size });
        }
    }
    let graph = ComputationGraph::new(config);
    let checked = check_plan(plan, config, &graph, seq)?;

    let mut contributions: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    let mut inputs: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    let mut attn_patterns: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    let mut resid_boundaries: Vec<Tensor> = Vec::new();

    let positions: Vec<usize> = (0..seq).collect();
    let tok_embed = tensor::embedding(params.get("embed"), tokens)?;
    let pos_embed = tensor::embedding(params.get("pos_embed"), &positions)?;
    let embed_contrib = tensor::add(&tok_embed, &pos_embed)?;
    contributions.insert(NodeId::Embed, embed_contrib.clone());
    let mut resid = embed_contrib;

    let mask = tensor::causal_mask(seq);
    let scale = 1.0 / (config.d_head as f64).sqrt();

    let assemble = |dst: NodeId,
                    resid: &Tensor,
                    contributions: &BTreeMap<NodeId, Tensor>|
     -> Result<Tensor> {
        if let (Some(ab), Some(keep)) = (&plan.ablation, &checked.keep_by_dst) {
            // Baseline is the cached run's input; kept edges swap their
            // cached contribution for this run's live one.
            let mut input = ab
                .cache
                .inputs
                .get(&dst)
                .ok_or_else(|| Error::UnknownEdge(format!("ablation cache misses {dst}")))?
                .clone();
            if let Some(kept) = keep.get(&dst) {
                for &(src, pos) in kept {
                    let live = contributions
                        .get(&src)
                        .ok_or_else(|| Error::UnknownEdge(src.to_string()))?;
                    let cached = ab.cache.contribution(src, pos)?;
                    let row = input.row_mut(pos);
                    for (i, r) in row.iter_mut().enumerate() {
                        *r += live.row(pos)[i] - cached[i];
                    }
                }
            }
            return Ok(input);
        }
        let mut input = resid.clone();
        if let Some(overrides) = checked.edge_by_dst.get(&dst) {
            for &(src, pos, value) in overrides {
                let current = contributions
                    .get(&src)
                    .ok_or_else(|| Error::UnknownEdge(src.to_string()))?;
                let row = input.row_mut(pos);
                for (i, r) in row.iter_mut().enumerate() {
                    *r += value[i] - current.row(pos)[i];
                }
            }
        }
        Ok(input)
    };

    let norm = |x: &Tensor, gain: &Tensor| -> Result<Tensor> {
        match config.norm {
            NormKind::Rms => tensor::rms_norm(x, gain, RMS_EPS),
            NormKind::Identity => Ok(x.clone()),
        }
    };

    for layer in 0..config.n_layers {
        if let Some(adds) = checked.adds_by_layer.get(&layer) {
            for &(pos, value) in adds {
                tensor::axpy(resid.row_mut(pos), 1.0, value);
            }
        }
        if plan.want_cache {
            resid_boundaries.push(resid.clone());
        }

        let attn_gain = params.get(&format!("layer{layer}.attn_norm"));
        let mut head_outs = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let q_dst = NodeId::AttnQ { layer, head };
            let k_dst = NodeId::AttnK { layer, head };
            let v_dst = NodeId::AttnV { layer, head };
            let q_in = assemble(q_dst, &resid, &contributions)?;
            let k_in = assemble(k_dst, &resid, &contributions)?;
            let v_in = assemble(v_dst, &resid, &contributions)?;

            let pattern = if let Some(&(src_pattern, alpha)) =
                checked.head_by_id.get(&(layer, head))
            {
                tensor::scale(src_pattern, alpha)
            } else {
                match config.attention {
                    AttnKind::Softmax => {
                        let wq = params.get(&format!("layer{layer}.head{head}.wq"));
                        let wk = params.get(&format!("layer{layer}.head{head}.wk"));
                        let q = tensor::matmul(&norm(&q_in, attn_gain)?, wq)?;
                        let k = tensor::matmul(&norm(&k_in, attn_gain)?, wk)?;
                        let scores = tensor::scale(&tensor::matmul_nt(&q, &k)?, scale);
                        tensor::softmax_rows(&tensor::add(&scores, &mask)?)
                    }
                    AttnKind::FixedRandom => fixed_pattern(config.seed, layer, head, seq),
                }
            };

            let wv = params.get(&format!("layer{layer}.head{head}.wv"));
            let wo = params.get(&format!("layer{layer}.head{head}.wo"));
            let v = tensor::matmul(&norm(&v_in, attn_gain)?, wv)?;
            let mixed = tensor::matmul(&pattern, &v)?;
            let out = tensor::matmul(&mixed, wo)?;
            out.check_finite("attention")?;

            if plan.want_cache {
                inputs.insert(q_dst, q_in);
                inputs.insert(k_dst, k_in);
                inputs.insert(v_dst, v_in);
                attn_patterns.insert((layer, head), pattern);
            }
            contributions.insert(NodeId::AttnO { layer, head }, out.clone());
            head_outs.push(out);
        }
        for out in head_outs {
            resid = tensor::add(&resid, &out)?;
        }

        let mlp_dst = NodeId::MlpIn { layer };
        let mlp_in = assemble(mlp_dst, &resid, &contributions)?;
        let mlp_gain = params.get(&format!("layer{layer}.mlp_norm"));
        let w_in = params.get(&format!("layer{layer}.w_in"));
        let w_out = params.get(&format!("layer{layer}.w_out"));
        let pre = tensor::matmul(&norm(&mlp_in, mlp_gain)?, w_in)?;
        let hidden = match config.activation {
            ActKind::Gelu => tensor::gelu(&pre),
            ActKind::Identity => pre,
        };
        let out = tensor::matmul(&hidden, w_out)?;
        out.check_finite("mlp")?;
        if plan.want_cache {
            inputs.insert(mlp_dst, mlp_in);
        }
        contributions.insert(NodeId::MlpOut { layer }, out.clone());
        resid = tensor::add(&resid, &out)?;
    }

    if let Some(adds) = checked.adds_by_layer.get(&config.n_layers) {
        for &(pos, value) in adds {
            tensor::axpy(resid.row_mut(pos), 1.0, value);
        }
    }
    if plan.want_cache {
        resid_boundaries.push(resid.clone());
    }

    let final_in = assemble(NodeId::Logits, &resid, &contributions)?;
    let logits = tensor::matmul(&norm(&final_in, params.get("final_norm"))?, params.get("unembed"))?;
    logits.check_finite("logits")?;
    if plan.want_cache {
        inputs.insert(NodeId::Logits, final_in);
    }

    let cache = plan.want_cache.then_some(ActivationCache {
        seq_len: seq,
        contributions,
        inputs,
        attn_patterns,
        resid: resid_boundaries,
    });
    Ok(RunOutput { logits, cache })
}

/// Input-independent causal pattern for the linear-surrogate attention mode.
pub fn fixed_pattern(seed: u64, layer: usize, head: usize, seq: usize) -> Tensor {
    use rand::Rng;
    let mut rng = SeedStreams::new(seed).rng(&format!("fixed_attn.{layer}.{head}"));
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        let row: Vec<f64> = (0..=i).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut probs = vec![0.0; i + 1];
        tensor::softmax_row_into(&mut probs, &row);
        data[i * seq..i * seq + i + 1].copy_from_slice(&probs);
    }
    Tensor::new(vec![seq, seq], data).expect("shape is consistent")
}

// ── convenience wrappers (the public operation surface) ────────────────

pub fn run_plain(params: &Parameters, tokens: &[TokenId]) -> Result<Tensor> {
    Ok(run(params, tokens, &RunPlan::default())?.logits)
}

pub fn run_with_cache(params: &Parameters, tokens: &[TokenId]) -> Result<(Tensor, ActivationCache)> {
    let out = run(params, tokens, &RunPlan::cached())?;
    Ok((out.logits, out.cache.expect("cache requested")))
}

pub fn run_with_edge_patch(
    params: &Parameters,
    tokens: &[TokenId],
    patches: Vec<EdgePatch>,
) -> Result<Tensor> {
    let plan = RunPlan { edge_patches: patches, ..Default::default() };
    Ok(run(params, tokens, &plan)?.logits)
}

pub fn run_with_head_pattern_patch(
    params: &Parameters,
    tokens: &[TokenId],
    patches: Vec<HeadPatternPatch>,
) -> Result<Tensor> {
    let plan = RunPlan { head_patches: patches, ..Default::default() };
    Ok(run(params, tokens, &plan)?.logits)
}

/// Adds cached residual vectors from a source prompt into this run's stream.
/// `bridges` pairs (source layer, source position) with (destination layer,
/// destination position).
pub fn run_with_residual_add(
    params: &Parameters,
    tokens: &[TokenId],
    bridges: &[((usize, usize), (usize, usize))],
    vector_source_tokens: &[TokenId],
) -> Result<Tensor> {
    let (_, source_cache) = run_with_cache(params, vector_source_tokens)?;
    let mut adds = Vec::with_capacity(bridges.len());
    for &((src_layer, src_pos), (dst_layer, dst_pos)) in bridges {
        adds.push(ResidualAdd {
            layer: dst_layer,
            pos: dst_pos,
            value: source_cache.residual(src_layer, src_pos)?.to_vec(),
        });
    }
    let plan = RunPlan { residual_adds: adds, ..Default::default() };
    Ok(run(params, tokens, &plan)?.logits)
}

/// Edge patches that replace every edge instance with values from `cache`
/// (built on an equal-length prompt).
pub fn full_patch_plan(graph: &ComputationGraph, cache: &ActivationCache) -> Result<Vec<EdgePatch>> {
    let mut patches = Vec::new();
    for edge in graph.edges() {
        for pos in 0..cache.seq_len {
            patches.push(EdgePatch {
                edge: *edge,
                pos,
                value: cache.contribution(edge.src, pos)?.to_vec(),
            });
        }
    }
    Ok(patches)
}

// ── the taped engine ────────────────────────────────────────────────────

pub mod taped {
    use super::*;

    /// A recorded forward pass with per-node hook ids.
    pub struct ModelRun {
        pub tape: Tape,
        pub logits: TensorId,
        pub seq_len: usize,
        /// Gradient hook per destination: the tape node holding that
        /// destination's assembled input.
        pub dst_inputs: BTreeMap<NodeId, TensorId>,
        /// Value hook per source: the tape node holding its contribution.
        pub src_contribs: BTreeMap<NodeId, TensorId>,
        pub param_ids: BTreeMap<String, TensorId>,
    }

    impl ModelRun {
        pub fn logits_tensor(&self) -> &Tensor {
            self.tape.value(self.logits).expect("logits recorded")
        }
    }

    pub fn run_taped(params: &Parameters, tokens: &[TokenId]) -> Result<ModelRun> {
        let config = &params.config;
        let seq = tokens.len();
        if seq == 0 || seq > config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {seq} outside 1..={}",
                config.max_seq_len
            )));
        }
        let mut tape = Tape::new();
        let mut param_ids = BTreeMap::new();
        for (name, tensor) in params.tensors() {
            param_ids.insert(name.clone(), tape.leaf(Arc::clone(tensor)));
        }
        let mut dst_inputs = BTreeMap::new();
        let mut src_contribs = BTreeMap::new();

        let positions: Vec<usize> = (0..seq).collect();
        let tok = tape.embedding(param_ids["embed"], tokens)?;
        let pos = tape.embedding(param_ids["pos_embed"], &positions)?;
        let embed = tape.add(tok, pos)?;
        src_contribs.insert(NodeId::Embed, embed);

        let zero = tape.leaf_owned(Tensor::zeros(vec![seq, config.d_model]));
        let mask = tape.leaf_owned(tensor::causal_mask(seq));
        let scale = 1.0 / (config.d_head as f64).sqrt();
        let mut running = embed;

        let norm = |tape: &mut Tape, x: TensorId, gain: TensorId| -> Result<TensorId> {
            match config.norm {
                NormKind::Rms => tape.rms_norm(x, gain, RMS_EPS),
                NormKind::Identity => Ok(x),
            }
        };

        for layer in 0..config.n_layers {
            let attn_gain = param_ids[&format!("layer{layer}.attn_norm")];
            let mut head_outs = Vec::with_capacity(config.n_heads);
            for head in 0..config.n_heads {
                let q_in = tape.add(running, zero)?;
                let k_in = tape.add(running, zero)?;
                let v_in = tape.add(running, zero)?;
                dst_inputs.insert(NodeId::AttnQ { layer, head }, q_in);
                dst_inputs.insert(NodeId::AttnK { layer, head }, k_in);
                dst_inputs.insert(NodeId::AttnV { layer, head }, v_in);

                let pattern = match config.attention {
                    AttnKind::Softmax => {
                        let qn = norm(&mut tape, q_in, attn_gain)?;
                        let kn = norm(&mut tape, k_in, attn_gain)?;
                        let q = tape.matmul(qn, param_ids[&format!("layer{layer}.head{head}.wq")])?;
                        let k = tape.matmul(kn, param_ids[&format!("layer{layer}.head{head}.wk")])?;
                        let scores = tape.matmul_nt(q, k)?;
                        let scaled = tape.mul_scalar(scores, scale)?;
                        let masked = tape.add(scaled, mask)?;
                        tape.softmax(masked)?
                    }
                    AttnKind::FixedRandom => {
                        tape.leaf_owned(fixed_pattern(config.seed, layer, head, seq))
                    }
                };

                let vn = norm(&mut tape, v_in, attn_gain)?;
                let v = tape.matmul(vn, param_ids[&format!("layer{layer}.head{head}.wv")])?;
                let mixed = tape.matmul(pattern, v)?;
                let out = tape.matmul(mixed, param_ids[&format!("layer{layer}.head{head}.wo")])?;
                src_contribs.insert(NodeId::AttnO { layer, head }, out);
                head_outs.push(out);
            }
            for out in head_outs {
                running = tape.add(running, out)?;
            }

            let mlp_in = tape.add(running, zero)?;
            dst_inputs.insert(NodeId::MlpIn { layer }, mlp_in);
            let mlp_gain = param_ids[&format!("layer{layer}.mlp_norm")];
            let normed = norm(&mut tape, mlp_in, mlp_gain)?;
            let pre = tape.matmul(normed, param_ids[&format!("layer{layer}.w_in")])?;
            let hidden = match config.activation {
                ActKind::Gelu => tape.gelu(pre)?,
                ActKind::Identity => pre,
            };
            let out = tape.matmul(hidden, param_ids[&format!("layer{layer}.w_out")])?;
            src_contribs.insert(NodeId::MlpOut { layer }, out);
            running = tape.add(running, out)?;
        }

        let final_in = tape.add(running, zero)?;
        dst_inputs.insert(NodeId::Logits, final_in);
        let normed = norm(&mut tape, final_in, param_ids["final_norm"])?;
        let logits = tape.matmul(normed, param_ids["unembed"])?;

        Ok(ModelRun { tape, logits, seq_len: seq, dst_inputs, src_contribs, param_ids })
    }
}

pub use taped::{run_taped, ModelRun};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ActKind, AttnKind, ModelConfig, NormKind};

    fn tiny_config(layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 12,
            max_seq_len: 7,
            seed: 5,
            norm: NormKind::Rms,
            activation: ActKind::Gelu,
            attention: AttnKind::Softmax,
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let params = init_model(&tiny_config(2)).unwrap();
        let tokens = [1, 4, 7, 2, 0];
        let a = run_plain(&params, &tokens).unwrap();
        let b = run_plain(&params, &tokens).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_token_prompt_logit_shape() {
        let params = init_model(&tiny_config(1)).unwrap();
        let logits = run_plain(&params, &[3]).unwrap();
        assert_eq!(logits.shape(), &[1, 12]);
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let params = init_model(&tiny_config(1)).unwrap();
        assert!(matches!(
            run_plain(&params, &[99]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
        assert!(run_plain(&params, &[0; 20]).is_err());
    }

    #[test]
    fn node_input_equals_sum_of_incoming_contributions() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [1, 4, 7, 2, 0, 9];
        let (_, cache) = run_with_cache(&params, &tokens).unwrap();
        let graph = ComputationGraph::new(&config);
        for &dst in graph.destinations() {
            let input = &cache.inputs[&dst];
            for pos in 0..tokens.len() {
                let mut sum = vec![0.0; config.d_model];
                for src in graph.predecessors(dst) {
                    tensor::axpy(&mut sum, 1.0, cache.contribution(src, pos).unwrap());
                }
                for (a, b) in sum.iter().zip(input.row(pos)) {
                    assert!((a - b).abs() < 1e-9, "{dst} pos {pos}");
                }
            }
        }
    }

    #[test]
    fn identity_edge_patch_keeps_logits() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [5, 2, 8, 1];
        let (clean_logits, cache) = run_with_cache(&params, &tokens).unwrap();
        let graph = ComputationGraph::new(&config);
        let patches = full_patch_plan(&graph, &cache).unwrap();
        let patched = run_with_edge_patch(&params, &tokens, patches).unwrap();
        assert!(max_abs_diff(&clean_logits, &patched) < 1e-9);
    }

    #[test]
    fn full_patch_reproduces_the_other_run() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens_a = [5, 2, 8, 1, 3];
        let tokens_b = [0, 9, 4, 6, 7];
        let (logits_b, cache_b) = run_with_cache(&params, &tokens_b).unwrap();
        let graph = ComputationGraph::new(&config);
        let patches = full_patch_plan(&graph, &cache_b).unwrap();
        let patched = run_with_edge_patch(&params, &tokens_a, patches).unwrap();
        assert!(max_abs_diff(&logits_b, &patched) < 1e-6);
    }

    #[test]
    fn logits_only_patch_matches_direct_readout_of_other_runs_residual() {
        // Independent check on a 1-layer model: patching only the edges into
        // the logits node with run B's contributions must equal reading out
        // run B's final residual through the unembedding, computed by hand.
        let config = tiny_config(1);
        let params = init_model(&config).unwrap();
        let tokens_a = [5, 2, 8];
        let tokens_b = [0, 9, 4];
        let (_, cache_b) = run_with_cache(&params, &tokens_b).unwrap();
        let graph = ComputationGraph::new(&config);
        let patches: Vec<EdgePatch> = graph
            .edges()
            .iter()
            .filter(|e| e.dst == NodeId::Logits)
            .flat_map(|e| {
                (0..tokens_a.len()).map(|pos| EdgePatch {
                    edge: *e,
                    pos,
                    value: cache_b.contribution(e.src, pos).unwrap().to_vec(),
                })
            })
            .collect();
        let patched = run_with_edge_patch(&params, &tokens_a, patches).unwrap();

        let final_b = cache_b.resid.last().unwrap();
        let normed = tensor::rms_norm(final_b, params.get("final_norm"), RMS_EPS).unwrap();
        let expect = tensor::matmul(&normed, params.get("unembed")).unwrap();
        assert!(max_abs_diff(&expect, &patched) < 1e-9);
    }

    #[test]
    fn self_pattern_alpha_one_is_identity() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3, 4, 5];
        let (clean, cache) = run_with_cache(&params, &tokens).unwrap();
        let patches = vec![
            HeadPatternPatch { layer: 1, head: 0, pattern: cache.attn_patterns[&(1, 0)].clone(), alpha: 1.0 },
            HeadPatternPatch { layer: 0, head: 1, pattern: cache.attn_patterns[&(0, 1)].clone(), alpha: 1.0 },
        ];
        let patched = run_with_head_pattern_patch(&params, &tokens, patches).unwrap();
        assert!(max_abs_diff(&clean, &patched) < 1e-9);
    }

    #[test]
    fn alpha_zero_silences_the_head() {
        let config = tiny_config(1);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3];
        let (_, cache) = run_with_cache(&params, &tokens).unwrap();
        let plan = RunPlan {
            head_patches: vec![HeadPatternPatch {
                layer: 0,
                head: 0,
                pattern: cache.attn_patterns[&(0, 0)].clone(),
                alpha: 0.0,
            }],
            want_cache: true,
            ..Default::default()
        };
        let out = run(&params, &tokens, &plan).unwrap();
        let contrib = &out.cache.unwrap().contributions[&NodeId::AttnO { layer: 0, head: 0 }];
        assert!(contrib.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let config = tiny_config(1);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3];
        let (_, cache) = run_with_cache(&params, &tokens).unwrap();
        let patches = vec![HeadPatternPatch {
            layer: 0,
            head: 0,
            pattern: cache.attn_patterns[&(0, 0)].clone(),
            alpha: -1.0,
        }];
        assert!(run_with_head_pattern_patch(&params, &tokens, patches).is_err());
    }

    #[test]
    fn zero_vector_residual_add_is_identity() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3, 4];
        let clean = run_plain(&params, &tokens).unwrap();
        let plan = RunPlan {
            residual_adds: vec![ResidualAdd { layer: 1, pos: 2, value: vec![0.0; 8] }],
            ..Default::default()
        };
        let patched = run(&params, &tokens, &plan).unwrap().logits;
        assert!(max_abs_diff(&clean, &patched) < 1e-12);
    }

    #[test]
    fn additive_cancellation_of_stacked_residual_adds() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3, 4];
        let clean = run_plain(&params, &tokens).unwrap();
        let v: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let plan = RunPlan {
            residual_adds: vec![
                ResidualAdd { layer: 1, pos: 1, value: v },
                ResidualAdd { layer: 1, pos: 1, value: neg },
            ],
            ..Default::default()
        };
        let patched = run(&params, &tokens, &plan).unwrap().logits;
        assert!(max_abs_diff(&clean, &patched) < 1e-9);
    }

    #[test]
    fn self_add_doubles_the_residual_at_the_site() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3, 4];
        let (_, cache) = run_with_cache(&params, &tokens).unwrap();
        let site = cache.residual(1, 2).unwrap().to_vec();
        let plan = RunPlan {
            residual_adds: vec![ResidualAdd { layer: 1, pos: 2, value: site.clone() }],
            want_cache: true,
            ..Default::default()
        };
        let out = run(&params, &tokens, &plan).unwrap();
        let doubled = out.cache.unwrap().residual(1, 2).unwrap().to_vec();
        for (a, b) in doubled.iter().zip(&site) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_masking_blocks_future_tokens() {
        let params = init_model(&tiny_config(2)).unwrap();
        let a = run_plain(&params, &[1, 2, 3, 4, 5]).unwrap();
        let b = run_plain(&params, &[1, 2, 3, 9, 11]).unwrap();
        for pos in 0..3 {
            assert_eq!(a.row(pos), b.row(pos), "position {pos} depends on the future");
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn taped_and_plain_engines_agree() {
        for layers in [1, 2] {
            let params = init_model(&tiny_config(layers)).unwrap();
            let tokens = [3, 1, 4, 1, 5];
            let plain = run_plain(&params, &tokens).unwrap();
            let taped = run_taped(&params, &tokens).unwrap();
            assert!(max_abs_diff(&plain, taped.logits_tensor()) < 1e-12);
        }
    }

    #[test]
    fn taped_run_exposes_every_hook() {
        let config = tiny_config(2);
        let params = init_model(&config).unwrap();
        let taped = run_taped(&params, &[1, 2, 3]).unwrap();
        let graph = ComputationGraph::new(&config);
        for &dst in graph.destinations() {
            assert!(taped.dst_inputs.contains_key(&dst), "{dst}");
        }
        for &src in graph.sources() {
            assert!(taped.src_contribs.contains_key(&src), "{src}");
        }
    }

    #[test]
    fn fixed_random_attention_is_linear_in_tokens_embedding() {
        // With identity norm/activation and input-independent patterns, the
        // map embedding→logits is linear, so patching scales superpose.
        let mut config = tiny_config(1);
        config.norm = NormKind::Identity;
        config.activation = ActKind::Identity;
        config.attention = AttnKind::FixedRandom;
        let params = init_model(&config).unwrap();
        let tokens = [1, 2, 3];
        let (clean, cache) = run_with_cache(&params, &tokens).unwrap();

        let edge = Edge::new(NodeId::Embed, NodeId::Logits);
        let base = cache.contribution(NodeId::Embed, 1).unwrap().to_vec();
        let delta: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let once: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let twice: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + 2.0 * b).collect();

        let l1 = run_with_edge_patch(&params, &tokens, vec![EdgePatch { edge, pos: 1, value: once }]).unwrap();
        let l2 = run_with_edge_patch(&params, &tokens, vec![EdgePatch { edge, pos: 1, value: twice }]).unwrap();
        // (l2 - l1) must equal (l1 - clean) exactly for a linear map.
        for i in 0..clean.numel() {
            let d1 = l1.data()[i] - clean.data()[i];
            let d2 = l2.data()[i] - l1.data()[i];
            assert!((d1 - d2).abs() < 1e-9);
        }
    }
}

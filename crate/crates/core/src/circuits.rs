//! Circuits: labeled edge subsets, faithfulness, banded search, soft
//! intersection, and overlap metrics.
//!
//! A circuit member is an (edge, position-label) pair, so circuits found on
//! different templates compare at semantically equivalent positions.
//! Running a circuit keeps member edges live and patches every other edge
//! instance with its activation from the corrupt run; faithfulness is the
//! recovered fraction of the full model's clean−corrupt logit difference,
//! in percent.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{Operation, PosLabel, PromptPair, Template, TokenLabelMap};
use crate::error::{Error, Result};
use crate::exec::{self, Ablation, RunPlan};
use crate::graph::{ComputationGraph, Edge, NodeId};
use crate::model::Parameters;
use crate::par;
use crate::patching::{logit_diff, AttributionTable, MetricChoice};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CircuitMember {
    pub src: NodeId,
    pub dst: NodeId,
    pub pos_label: PosLabel,
}

impl CircuitMember {
    pub fn edge(&self) -> Edge {
        Edge::new(self.src, self.dst)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub templates: Vec<u8>,
    pub operation: Option<Operation>,
    /// Soft-intersection threshold as a fraction (numerator, denominator).
    pub tau: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub model_fingerprint: String,
    pub provenance: Provenance,
    pub members: BTreeSet<CircuitMember>,
}

impl Circuit {
    pub fn new(
        members: BTreeSet<CircuitMember>,
        provenance: Provenance,
        model_fingerprint: String,
    ) -> Circuit {
        Circuit { model_fingerprint, provenance, members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, edge: Edge, pos_label: PosLabel) -> bool {
        self.members.contains(&CircuitMember { src: edge.src, dst: edge.dst, pos_label })
    }

    /// Attention heads that appear in any member edge.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let mut heads = BTreeSet::new();
        for m in &self.members {
            for node in [m.src, m.dst] {
                match node {
                    NodeId::AttnQ { layer, head }
                    | NodeId::AttnK { layer, head }
                    | NodeId::AttnV { layer, head }
                    | NodeId::AttnO { layer, head } => {
                        heads.insert((layer, head));
                    }
                    _ => {}
                }
            }
        }
        heads.into_iter().collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::report::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Circuit> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn check_model(&self, params: &Parameters) -> Result<()> {
        let fp = params.fingerprint();
        if self.model_fingerprint != fp {
            return Err(Error::ForeignCircuit {
                circuit: self.model_fingerprint.clone(),
                model: fp,
            });
        }
        Ok(())
    }

    /// The complete circuit: every edge at every position of a template.
    pub fn full(params: &Parameters, label_map: &TokenLabelMap) -> Circuit {
        let graph = ComputationGraph::new(&params.config);
        let mut members = BTreeSet::new();
        for edge in graph.edges() {
            for pos in 0..label_map.len() {
                members.insert(CircuitMember {
                    src: edge.src,
                    dst: edge.dst,
                    pos_label: label_map.label_of(pos),
                });
            }
        }
        Circuit::new(
            members,
            Provenance {
                templates: vec![label_map.template_id],
                operation: Some(label_map.operation),
                tau: None,
            },
            params.fingerprint(),
        )
    }
}

// ── running circuits ────────────────────────────────────────────────────

fn keep_set(
    circuit: &Circuit,
    graph: &ComputationGraph,
    label_map: &TokenLabelMap,
    seq: usize,
) -> HashSet<(Edge, usize)> {
    let mut keep = HashSet::new();
    for edge in graph.edges() {
        for pos in 0..seq {
            if circuit.contains(*edge, label_map.label_of(pos)) {
                keep.insert((*edge, pos));
            }
        }
    }
    keep
}

/// Runs the clean prompt with every non-member edge instance patched to its
/// corrupt-run activation and returns the logits.
pub fn run_circuit(params: &Parameters, circuit: &Circuit, pair: &PromptPair) -> Result<Tensor> {
    let (c_clean, _) = run_circuit_outputs(params, circuit, pair)?;
    Ok(c_clean)
}

/// Circuit outputs on both sides of a pair: (C(X_clean), C(X_corrupt)).
pub fn run_circuit_outputs(
    params: &Parameters,
    circuit: &Circuit,
    pair: &PromptPair,
) -> Result<(Tensor, Tensor)> {
    circuit.check_model(params)?;
    if pair.clean_tokens.len() != pair.corrupt_tokens.len() {
        return Err(Error::Metric("pair prompts differ in length".into()));
    }
    let seq = pair.clean_tokens.len();
    let label_map = Template::get(pair.operation, pair.template_id)?.label_positions();
    let graph = ComputationGraph::new(&params.config);
    let keep = keep_set(circuit, &graph, &label_map, seq);

    let corrupt = exec::run(params, &pair.corrupt_tokens, &RunPlan::cached())?;
    let cache = corrupt.cache.expect("cache requested");

    let plan = RunPlan {
        ablation: Some(Ablation { cache: &cache, keep: keep.clone() }),
        ..Default::default()
    };
    let c_clean = exec::run(params, &pair.clean_tokens, &plan)?.logits;
    let plan = RunPlan { ablation: Some(Ablation { cache: &cache, keep }), ..Default::default() };
    let c_corrupt = exec::run(params, &pair.corrupt_tokens, &plan)?.logits;
    Ok((c_clean, c_corrupt))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Faithfulness {
    /// Mean logit difference recovered, percent.
    pub mean: f64,
    pub std: f64,
    pub per_pair: Vec<f64>,
}

/// Logit difference recovered: mean over pairs of
/// (C_clean − C_corrupt) / (M_clean − M_corrupt) × 100.
pub fn faithfulness(
    params: &Parameters,
    circuit: &Circuit,
    pairs: &[PromptPair],
) -> Result<Faithfulness> {
    if pairs.is_empty() {
        return Err(Error::Metric("faithfulness needs at least one pair".into()));
    }
    circuit.check_model(params)?;

    let per_pair = par::map_range(pairs.len(), |i| -> Result<f64> {
        let pair = &pairs[i];
        let metric = MetricChoice::PerPair.for_pair(pair)?;
        let m_clean = logit_diff(&exec::run_plain(params, &pair.clean_tokens)?, &metric)?;
        let m_corrupt = logit_diff(&exec::run_plain(params, &pair.corrupt_tokens)?, &metric)?;
        let denom = m_clean - m_corrupt;
        if denom.abs() < 1e-9 {
            return Err(Error::DegeneratePair { index: i });
        }
        let (c_clean, c_corrupt) = run_circuit_outputs(params, circuit, pair)?;
        let num = logit_diff(&c_clean, &metric)? - logit_diff(&c_corrupt, &metric)?;
        Ok(num / denom * 100.0)
    });
    let per_pair: Result<Vec<f64>> = per_pair.into_iter().collect();
    let per_pair = per_pair?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    let var = per_pair.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_pair.len() as f64;
    Ok(Faithfulness { mean, std: var.sqrt(), per_pair })
}

// ── banded minimal search ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Initial prefix size.
    pub k: usize,
    /// Increment per iteration.
    pub n: usize,
    /// Acceptable faithfulness band, percent.
    pub band: (f64, f64),
    /// Max pairs used per faithfulness evaluation.
    pub eval_pair_budget: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { k: 100, n: 20, band: (99.0, 101.0), eval_pair_budget: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub circuit: Circuit,
    /// Evaluated (prefix size, faithfulness) points, in order.
    pub trajectory: Vec<(usize, f64)>,
    /// Whether the returned circuit's faithfulness lies inside the band.
    pub in_band: bool,
}

fn prefix_circuit(table: &AttributionTable, size: usize, fingerprint: String) -> Circuit {
    let members: BTreeSet<CircuitMember> = table.entries[..size.min(table.entries.len())]
        .iter()
        .map(|e| CircuitMember { src: e.edge.src, dst: e.edge.dst, pos_label: e.pos_label })
        .collect();
    Circuit::new(
        members,
        Provenance { templates: vec![table.template_id], operation: Some(table.operation), tau: None },
        fingerprint,
    )
}

/// Iterative top-k search: evaluates prefixes of the score-sorted table
/// (k, k+n, k+2n, …) and returns the first circuit whose faithfulness on
/// the evaluation pairs falls inside the band. If the table is exhausted
/// without entering the band, the prefix closest to 100% is returned with
/// `in_band == false`.
pub fn search_minimal_circuit(
    table: &AttributionTable,
    params: &Parameters,
    pairs: &[PromptPair],
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    if cfg.k == 0 || cfg.n == 0 || cfg.band.0 >= cfg.band.1 {
        return Err(Error::Circuit("search config must have k ≥ 1, n ≥ 1, band.0 < band.1".into()));
    }
    if table.model_fingerprint != params.fingerprint() {
        return Err(Error::ForeignCircuit {
            circuit: table.model_fingerprint.clone(),
            model: params.fingerprint(),
        });
    }
    for p in pairs {
        if p.template_id != table.template_id {
            return Err(Error::Circuit("evaluation pairs must match the table's template".into()));
        }
    }
    let eval_pairs = &pairs[..pairs.len().min(cfg.eval_pair_budget)];
    if eval_pairs.is_empty() {
        return Err(Error::Circuit("no evaluation pairs".into()));
    }

    let fingerprint = params.fingerprint();
    let mut trajectory: Vec<(usize, f64)> = Vec::new();
    let mut size = cfg.k.min(table.entries.len());
    loop {
        let circuit = prefix_circuit(table, size, fingerprint.clone());
        let f = faithfulness(params, &circuit, eval_pairs)?;
        trajectory.push((size, f.mean));
        if f.mean >= cfg.band.0 && f.mean <= cfg.band.1 {
            return Ok(SearchResult { circuit, trajectory, in_band: true });
        }
        if size >= table.entries.len() {
            break;
        }
        size = (size + cfg.n).min(table.entries.len());
    }

    // Budget exhausted: fall back to the prefix closest to 100%.
    let best_size = trajectory
        .iter()
        .min_by(|a, b| (a.1 - 100.0).abs().partial_cmp(&(b.1 - 100.0).abs()).unwrap())
        .expect("at least one prefix evaluated")
        .0;
    let circuit = prefix_circuit(table, best_size, fingerprint);
    Ok(SearchResult { circuit, trajectory, in_band: false })
}

// ── soft intersection and set algebra ───────────────────────────────────

/// Members present in at least `tau_num / circuits.len()` of the circuits.
/// `tau_num = 1` is the union, `tau_num = circuits.len()` the strict
/// intersection.
pub fn soft_intersection(circuits: &[Circuit], tau_num: u32) -> Result<Circuit> {
    let m = circuits.len() as u32;
    if m == 0 {
        return Err(Error::Circuit("soft intersection of zero circuits".into()));
    }
    if tau_num == 0 || tau_num > m {
        return Err(Error::Circuit(format!("tau numerator {tau_num} outside 1..={m}")));
    }
    let fingerprint = &circuits[0].model_fingerprint;
    let operation = circuits[0].provenance.operation;
    for c in circuits {
        if &c.model_fingerprint != fingerprint {
            return Err(Error::ForeignCircuit {
                circuit: c.model_fingerprint.clone(),
                model: fingerprint.clone(),
            });
        }
        if c.provenance.operation != operation {
            return Err(Error::Circuit("circuits come from different label domains".into()));
        }
    }

    let mut counts: std::collections::BTreeMap<CircuitMember, u32> = Default::default();
    for c in circuits {
        for &member in &c.members {
            *counts.entry(member).or_insert(0) += 1;
        }
    }
    let members: BTreeSet<CircuitMember> = counts
        .into_iter()
        .filter(|&(_, count)| count >= tau_num)
        .map(|(member, _)| member)
        .collect();

    let mut templates: Vec<u8> =
        circuits.iter().flat_map(|c| c.provenance.templates.iter().copied()).collect();
    templates.sort_unstable();
    templates.dedup();
    Ok(Circuit::new(
        members,
        Provenance { templates, operation, tau: Some((tau_num, m)) },
        fingerprint.clone(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetOp {
    Union,
    Intersection,
}

impl std::str::FromStr for SetOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "union" => Ok(SetOp::Union),
            "intersection" => Ok(SetOp::Intersection),
            other => Err(Error::Circuit(format!("unknown set op '{other}'"))),
        }
    }
}

pub fn set_ops(a: &Circuit, b: &Circuit, op: SetOp) -> Result<Circuit> {
    if a.model_fingerprint != b.model_fingerprint {
        return Err(Error::ForeignCircuit {
            circuit: b.model_fingerprint.clone(),
            model: a.model_fingerprint.clone(),
        });
    }
    let members: BTreeSet<CircuitMember> = match op {
        SetOp::Union => a.members.union(&b.members).copied().collect(),
        SetOp::Intersection => a.members.intersection(&b.members).copied().collect(),
    };
    let mut templates = [a.provenance.templates.clone(), b.provenance.templates.clone()].concat();
    templates.sort_unstable();
    templates.dedup();
    let operation =
        if a.provenance.operation == b.provenance.operation { a.provenance.operation } else { None };
    Ok(Circuit::new(
        members,
        Provenance { templates, operation, tau: None },
        a.model_fingerprint.clone(),
    ))
}

/// (IoU, IoM) of two circuits' positional member sets.
pub fn overlap(a: &Circuit, b: &Circuit) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Circuit("overlap undefined for an empty circuit".into()));
    }
    let inter = a.members.intersection(&b.members).count() as f64;
    let union = a.members.union(&b.members).count() as f64;
    let iou = inter / union;
    let iom = inter / a.len().min(b.len()) as f64;
    Ok((iou, iom))
}

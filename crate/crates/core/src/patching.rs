//! Exact activation patching and its fast linear approximation.
//!
//! `exact_patch_effect` is the oracle: three runs per edge (clean with
//! cache, corrupt baseline, patched corrupt), effect = metric(patched) −
//! metric(corrupt). `eap_scores` approximates the same quantity for *every*
//! edge at *every* position from two forward passes and one backward pass
//! per pair: score = |(z_clean − z_corrupt) · ∂metric/∂z| with the gradient
//! taken on the corrupted run, absolute value applied per pair, then
//! averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{PosLabel, PromptPair, Template};
use crate::error::{Error, Result};
use crate::exec::{self, run_taped, RunPlan};
use crate::graph::{ComputationGraph, Edge};
use crate::model::Parameters;
use crate::par;
use crate::tensor::Tensor;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricPosition {
    Final,
    Index(usize),
}

/// The logit-difference metric: mean logit of the clean answer tokens minus
/// mean logit of the corrupt answer tokens, read at one position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub clean_tokens: Vec<TokenId>,
    pub corrupt_tokens: Vec<TokenId>,
    pub position: MetricPosition,
}

impl MetricSpec {
    pub fn new(
        clean_tokens: Vec<TokenId>,
        corrupt_tokens: Vec<TokenId>,
        position: MetricPosition,
    ) -> Result<MetricSpec> {
        if clean_tokens.is_empty() || corrupt_tokens.is_empty() {
            return Err(Error::Metric("empty answer-token set".into()));
        }
        if clean_tokens.iter().any(|t| corrupt_tokens.contains(t)) {
            return Err(Error::Metric("clean and corrupt token sets must be disjoint".into()));
        }
        Ok(MetricSpec { clean_tokens, corrupt_tokens, position })
    }

    pub fn for_pair(pair: &PromptPair) -> Result<MetricSpec> {
        MetricSpec::new(
            pair.labels.clean.clone(),
            pair.labels.corrupt.clone(),
            MetricPosition::Final,
        )
    }

    fn resolve(&self, seq: usize) -> Result<usize> {
        let pos = match self.position {
            MetricPosition::Final => seq - 1,
            MetricPosition::Index(i) => i,
        };
        if pos >= seq {
            return Err(Error::Metric(format!("metric position {pos} outside sequence {seq}")));
        }
        Ok(pos)
    }
}

/// mean(clean logits) − mean(corrupt logits) at the metric position.
pub fn logit_diff(logits: &Tensor, metric: &MetricSpec) -> Result<f64> {
    let (seq, _) = logits.rows_cols();
    let pos = metric.resolve(seq)?;
    let row = logits.row(pos);
    let mean = |tokens: &[TokenId]| -> f64 {
        tokens.iter().map(|&t| row[t]).sum::<f64>() / tokens.len() as f64
    };
    Ok(mean(&metric.clean_tokens) - mean(&metric.corrupt_tokens))
}

/// Mean of per-prompt logit differences over a batch of runs.
pub fn mean_logit_diff(logits: &[Tensor], metric: &MetricSpec) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Metric("empty batch".into()));
    }
    let mut sum = 0.0;
    for l in logits {
        sum += logit_diff(l, metric)?;
    }
    Ok(sum / logits.len() as f64)
}

/// ∂(logit_diff)/∂logits as a dense seed tensor.
pub fn metric_logit_grad(metric: &MetricSpec, seq: usize, vocab: usize) -> Result<Tensor> {
    let pos = metric.resolve(seq)?;
    let mut seed = Tensor::zeros(vec![seq, vocab]);
    let row = seed.row_mut(pos);
    for &t in &metric.clean_tokens {
        row[t] += 1.0 / metric.clean_tokens.len() as f64;
    }
    for &t in &metric.corrupt_tokens {
        row[t] -= 1.0 / metric.corrupt_tokens.len() as f64;
    }
    Ok(seed)
}

// ── attribution tables ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub edge: Edge,
    pub pos: usize,
    pub pos_label: PosLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionTable {
    pub template_id: u8,
    pub operation: crate::dataset::Operation,
    pub n_pairs: usize,
    pub seq_len: usize,
    pub metric: MetricSpec,
    pub model_fingerprint: String,
    /// Sorted by descending score; ties broken by canonical edge order then
    /// position.
    pub entries: Vec<AttributionEntry>,
}

impl AttributionTable {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::report::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<AttributionTable> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Scores for one pair, indexed edge-major (`edge_idx * seq + pos`), taking
/// the gradient seed at the logits.
pub fn eap_pair_scores_from_seed(
    params: &Parameters,
    pair: &PromptPair,
    seed: &Tensor,
) -> Result<Vec<f64>> {
    if pair.clean_tokens.len() != pair.corrupt_tokens.len() {
        return Err(Error::Metric("clean and corrupt prompts differ in length".into()));
    }
    let graph = ComputationGraph::new(&params.config);
    let seq = pair.clean_tokens.len();

    let clean = exec::run(params, &pair.clean_tokens, &RunPlan::cached())?;
    let clean_cache = clean.cache.expect("cache requested");
    let corrupt = run_taped(params, &pair.corrupt_tokens)?;

    let dst_ids: Vec<_> = corrupt.dst_inputs.values().copied().collect();
    let grads = corrupt.tape.backward(corrupt.logits, seed, &dst_ids)?;

    let mut scores = Vec::with_capacity(graph.edges().len() * seq);
    for edge in graph.edges() {
        let clean_contrib = &clean_cache.contributions[&edge.src];
        let corrupt_contrib = corrupt.tape.value(corrupt.src_contribs[&edge.src])?;
        let grad = &grads[&corrupt.dst_inputs[&edge.dst]];
        for pos in 0..seq {
            let mut s = 0.0;
            let c = clean_contrib.row(pos);
            let k = corrupt_contrib.row(pos);
            let g = grad.row(pos);
            for i in 0..c.len() {
                s += (c[i] - k[i]) * g[i];
            }
            scores.push(s.abs());
        }
    }
    Ok(scores)
}

pub fn eap_pair_scores(
    params: &Parameters,
    pair: &PromptPair,
    metric: &MetricSpec,
) -> Result<Vec<f64>> {
    let seed = metric_logit_grad(metric, pair.clean_tokens.len(), params.config.vocab_size)?;
    eap_pair_scores_from_seed(params, pair, &seed)
}

/// Which metric each pair uses.
#[derive(Debug, Clone)]
pub enum MetricChoice {
    /// One metric for every pair (error-detection circuits).
    Shared(MetricSpec),
    /// Per-pair metrics from each pair's own label sets (computation
    /// circuits, where the answer digits vary).
    PerPair,
}

impl MetricChoice {
    pub fn for_pair(&self, pair: &PromptPair) -> Result<MetricSpec> {
        match self {
            MetricChoice::Shared(m) => Ok(m.clone()),
            MetricChoice::PerPair => MetricSpec::for_pair(pair),
        }
    }
}

/// Token-wise edge attribution over a set of same-template pairs.
pub fn eap_scores(
    params: &Parameters,
    pairs: &[PromptPair],
    metric: &MetricChoice,
) -> Result<AttributionTable> {
    if pairs.is_empty() {
        return Err(Error::Metric("eap_scores needs at least one pair".into()));
    }
    let seq = pairs[0].clean_tokens.len();
    let template_id = pairs[0].template_id;
    for p in pairs {
        if p.clean_tokens.len() != seq || p.template_id != template_id {
            return Err(Error::Metric("all pairs must come from one template".into()));
        }
    }

    let per_pair = par::map(pairs, |pair| -> Result<Vec<f64>> {
        let m = metric.for_pair(pair)?;
        eap_pair_scores(params, pair, &m)
    });

    let graph = ComputationGraph::new(&params.config);
    let mut mean = vec![0.0; graph.edges().len() * seq];
    for scores in per_pair {
        let scores = scores?;
        for (acc, s) in mean.iter_mut().zip(&scores) {
            *acc += s;
        }
    }
    let n = pairs.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);

    let label_map = Template::get(pairs[0].operation, template_id)?.label_positions();
    let mut entries = Vec::with_capacity(mean.len());
    for (e_idx, edge) in graph.edges().iter().enumerate() {
        for pos in 0..seq {
            entries.push(AttributionEntry {
                edge: *edge,
                pos,
                pos_label: label_map.label_of(pos),
                score: mean[e_idx * seq + pos],
            });
        }
    }
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.edge, a.pos).cmp(&(b.edge, b.pos)))
    });

    Ok(AttributionTable {
        template_id,
        operation: pairs[0].operation,
        n_pairs: pairs.len(),
        seq_len: seq,
        metric: metric.for_pair(&pairs[0])?,
        model_fingerprint: params.fingerprint(),
        entries,
    })
}

// ── the exact oracle ────────────────────────────────────────────────────

/// Exact indirect effect of patching one edge at one position: runs clean
/// (cached), corrupt (baseline), and corrupt-with-clean-patch, returning
/// metric(patched) − metric(corrupt).
pub fn exact_patch_effect(
    params: &Parameters,
    pair: &PromptPair,
    edge: Edge,
    pos: usize,
    metric: &MetricSpec,
) -> Result<f64> {
    Ok(exact_patch_sweep(params, pair, &[(edge, pos)], metric)?[0])
}

/// Exact effects for many edge instances on one pair, sharing the clean
/// cache and corrupt baseline across instances.
pub fn exact_patch_sweep(
    params: &Parameters,
    pair: &PromptPair,
    instances: &[(Edge, usize)],
    metric: &MetricSpec,
) -> Result<Vec<f64>> {
    if pair.clean_tokens.len() != pair.corrupt_tokens.len() {
        return Err(Error::Metric("clean and corrupt prompts differ in length".into()));
    }
    let clean = exec::run(params, &pair.clean_tokens, &RunPlan::cached())?;
    let clean_cache = clean.cache.expect("cache requested");
    let corrupt_logits = exec::run_plain(params, &pair.corrupt_tokens)?;
    let baseline = logit_diff(&corrupt_logits, metric)?;

    let effects = par::map(instances, |&(edge, pos)| -> Result<f64> {
        let patch = exec::EdgePatch {
            edge,
            pos,
            value: clean_cache.contribution(edge.src, pos)?.to_vec(),
        };
        let logits = exec::run_with_edge_patch(params, &pair.corrupt_tokens, vec![patch])?;
        Ok(logit_diff(&logits, metric)? - baseline)
    });
    effects.into_iter().collect()
}

// ── rank statistics ─────────────────────────────────────────────────────

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric("spearman needs two equal-length samples (n ≥ 2)".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("spearman undefined for constant input".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Per-pair full-model logit differences (clean side, corrupt side).
pub fn model_logit_diffs(
    params: &Parameters,
    pairs: &[PromptPair],
    metric: &MetricChoice,
) -> Result<BTreeMap<usize, (f64, f64)>> {
    let rows = par::map(pairs, |pair| -> Result<(f64, f64)> {
        let m = metric.for_pair(pair)?;
        let clean = exec::run_plain(params, &pair.clean_tokens)?;
        let corrupt = exec::run_plain(params, &pair.corrupt_tokens)?;
        Ok((logit_diff(&clean, &m)?, logit_diff(&corrupt, &m)?))
    });
    let mut out = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        out.insert(i, r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_pairs, ErrorType, Operation, PairLabels};
    use crate::model::{init_model, ActKind, AttnKind, ModelConfig, NormKind};
    use crate::tensor;

    fn surrogate_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 12,
            max_seq_len: 8,
            seed,
            norm: NormKind::Identity,
            activation: ActKind::Identity,
            attention: AttnKind::FixedRandom,
        }
    }

    fn toy_pair(clean: Vec<usize>, corrupt: Vec<usize>) -> PromptPair {
        PromptPair {
            template_id: 1,
            operation: Operation::Add,
            error_type: ErrorType::Result,
            clean_tokens: clean,
            corrupt_tokens: corrupt,
            labels: PairLabels { clean: vec![2], corrupt: vec![5] },
            position_labels: Default::default(),
            assignment: crate::dataset::Assignment {
                instr: 0,
                name: 0,
                obj: 0,
                verb: 0,
                num1: 5,
                num2: 8,
            },
            result: 13,
            error_value: Some(16),
        }
    }

    #[test]
    fn logit_diff_arithmetic() {
        let logits = Tensor::matrix(1, 4, vec![2.0, 0.5, 0.0, 0.0]).unwrap();
        let m = MetricSpec::new(vec![0], vec![1], MetricPosition::Final).unwrap();
        assert_eq!(logit_diff(&logits, &m).unwrap(), 1.5);

        let identical = Tensor::matrix(1, 4, vec![0.7, 0.7, 0.0, 0.0]).unwrap();
        assert_eq!(logit_diff(&identical, &m).unwrap(), 0.0);
    }

    #[test]
    fn batch_metric_is_mean_of_per_prompt_diffs() {
        let m = MetricSpec::new(vec![0], vec![1], MetricPosition::Final).unwrap();
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap();
        assert_eq!(mean_logit_diff(&[a, b], &m).unwrap(), 2.0);
    }

    #[test]
    fn disjointness_is_enforced() {
        assert!(MetricSpec::new(vec![1, 2], vec![2], MetricPosition::Final).is_err());
        assert!(MetricSpec::new(vec![], vec![2], MetricPosition::Final).is_err());
    }

    #[test]
    fn multi_synonym_sets_average() {
        let logits = Tensor::matrix(1, 6, vec![1.0, 3.0, 0.5, 1.5, 0.0, 0.0]).unwrap();
        let m = MetricSpec::new(vec![0, 1], vec![2, 3], MetricPosition::Final).unwrap();
        // (1+3)/2 − (0.5+1.5)/2 = 1.0
        assert!((logit_diff(&logits, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_prompts_have_zero_scores() {
        let params = init_model(&surrogate_config(1)).unwrap();
        let pair = toy_pair(vec![1, 2, 3, 4], vec![1, 2, 3, 4]);
        let m = MetricSpec::for_pair(&pair).unwrap();
        let scores = eap_pair_scores(&params, &pair, &m).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn eap_equals_exact_effect_on_linear_network() {
        let params = init_model(&surrogate_config(7)).unwrap();
        let pair = toy_pair(vec![1, 2, 3, 4, 5], vec![9, 8, 3, 4, 11]);
        let m = MetricSpec::for_pair(&pair).unwrap();
        let scores = eap_pair_scores(&params, &pair, &m).unwrap();

        let graph = ComputationGraph::new(&params.config);
        let seq = pair.clean_tokens.len();
        let instances: Vec<(Edge, usize)> = graph
            .edges()
            .iter()
            .flat_map(|&e| (0..seq).map(move |p| (e, p)))
            .collect();
        let effects = exact_patch_sweep(&params, &pair, &instances, &m).unwrap();
        for (s, e) in scores.iter().zip(&effects) {
            assert!((s - e.abs()).abs() < 1e-6, "eap {s} vs exact {e}");
        }
    }

    #[test]
    fn scale_covariance_of_scores() {
        let params = init_model(&surrogate_config(3)).unwrap();
        let pair = toy_pair(vec![1, 2, 3], vec![4, 5, 6]);
        let m = MetricSpec::for_pair(&pair).unwrap();
        let seed = metric_logit_grad(&m, 3, params.config.vocab_size).unwrap();
        let a = eap_pair_scores_from_seed(&params, &pair, &seed).unwrap();
        let b = eap_pair_scores_from_seed(&params, &pair, &tensor::scale(&seed, 2.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2.5 * x).abs() < 1e-9);
        }
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap().then(i.cmp(&j)));
            idx
        };
        assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn eap_table_is_sorted_and_deterministic() {
        let t = Template::get(Operation::Add, 1).unwrap();
        let pairs = generate_pairs(t, 3, ErrorType::Result, 11).unwrap();
        let vocab = crate::tokenizer::Vocab::shared();
        let mut cfg = surrogate_config(2);
        cfg.vocab_size = vocab.len();
        cfg.max_seq_len = t.token_len();
        let params = init_model(&cfg).unwrap();
        let m = MetricChoice::Shared(MetricSpec::for_pair(&pairs[0]).unwrap());
        let a = eap_scores(&params, &pairs, &m).unwrap();
        let b = eap_scores(&params, &pairs, &m).unwrap();
        assert!(a.entries.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.entries.len(), ComputationGraph::new(&cfg).edges().len() * t.token_len());
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let z = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&x, &z).unwrap() + 1.0).abs() < 1e-12);
    }
}

//! Training the subject model and the detection-accuracy protocol.
//!
//! Two tasks share one next-token objective. The validation task asks for
//! `valid`/`invalid` after the verdict stem at the final position. The
//! computation task asks for the digits of the arithmetic result right
//! after the equation's `=` (and, on full prompts, the units digit after
//! the tens digit). Training data never contains consistent errors at both
//! sites: whether the model generalizes there is something the analyses
//! measure, not something training imposes.
//!
//! The loss gradient is seeded analytically at the logits (softmax minus
//! one-hot), so the tape stays restricted to the model's own primitive set.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ErrorType, Operation, PosLabel, PromptPair, Template};
use crate::error::{Error, Result};
use crate::exec::{self, run_taped};
use crate::model::{param_specs, Parameters};
use crate::par;
use crate::rng::SeedStreams;
use crate::tensor::{self, Tensor};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Relative sampling weight of validation-task examples.
    pub validation_weight: f64,
    /// Relative sampling weight of computation-task examples.
    pub computation_weight: f64,
    /// Evaluate held-out pair accuracy every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop once held-out pair accuracy (percent) reaches this value.
    pub early_stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            steps: 3000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            validation_weight: 1.0,
            computation_weight: 1.0,
            eval_every: 250,
            early_stop_accuracy: Some(97.5),
        }
    }
}

/// One training example: a token sequence plus next-token targets at chosen
/// positions (`(pos, target)` means logits at `pos` should predict
/// `target`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// Validation-task examples from prompt pairs: the clean side with its
/// verdict and the corrupt side with `valid`. Pairs with `ErrorType::None`
/// contribute one prompt (the two sides coincide).
pub fn validation_examples(pairs: &[PromptPair]) -> Vec<TrainExample> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        let final_pos = p.clean_tokens.len() - 1;
        out.push(TrainExample {
            tokens: p.clean_tokens.clone(),
            targets: vec![(final_pos, p.labels.clean[0])],
        });
        if p.error_type != ErrorType::None {
            out.push(TrainExample {
                tokens: p.corrupt_tokens.clone(),
                targets: vec![(final_pos, p.labels.corrupt[0])],
            });
        }
    }
    out
}

/// Computation-task examples: error-free prompts with digit targets after
/// the equals sign, plus equation prefixes over unconstrained single-digit
/// operands so the model also learns results outside the template's range.
pub fn computation_examples(operation: Operation, n: usize, seed: u64) -> Result<Vec<TrainExample>> {
    let vocab = Vocab::shared();
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut out = Vec::with_capacity(n);
    let templates = Template::all(operation);
    for i in 0..n {
        let t = &templates[i % templates.len()];
        let pair = generate_one(t, &mut rng)?;
        let map = t.label_positions();
        let equals = map.position(PosLabel::Equals)?;
        let r1 = map.position(PosLabel::ResultFirst)?;
        let result = pair.result;
        if i % 2 == 0 {
            // Full error-free prompt: predict both result digits.
            out.push(TrainExample {
                tokens: pair.corrupt_tokens.clone(),
                targets: vec![
                    (equals, vocab.digit_id(result / 10)),
                    (r1, vocab.digit_id(result % 10)),
                ],
            });
        } else {
            // Truncated equation with free operands: predict the first digit
            // of whatever the result is (possibly single-digit).
            let (a, b) = match operation {
                Operation::Add => (rng.random_range(1..=9), rng.random_range(1..=9)),
                _ => crate::dataset::sample_operands(operation, &mut rng),
            };
            let asg = crate::dataset::Assignment { num1: a, num2: b, ..pair.assignment };
            let prefix = crate::dataset::render_equation_prefix(t, &asg)?;
            let r = operation.apply(a, b);
            let first = if r >= 10 { r / 10 } else { r };
            out.push(TrainExample {
                tokens: prefix,
                targets: vec![(equals, vocab.digit_id(first))],
            });
        }
    }
    Ok(out)
}

fn generate_one<R: Rng>(t: &Template, rng: &mut R) -> Result<PromptPair> {
    let seed = rng.random::<u64>();
    Ok(crate::dataset::generate_pairs(t, 1, ErrorType::None, seed)?.remove(0))
}

// ── the optimizer ───────────────────────────────────────────────────────

struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(params: &Parameters) -> AdamState {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, shape) in param_specs(&params.config) {
            let n: usize = shape.iter().product();
            m.insert(name.clone(), vec![0.0; n]);
            v.insert(name, vec![0.0; n]);
        }
        AdamState { m, v, t: 0 }
    }

    fn step(
        &mut self,
        params: &Parameters,
        grads: &BTreeMap<String, Tensor>,
        cfg: &TrainConfig,
    ) -> Result<Parameters> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut tensors = BTreeMap::new();
        for (name, _) in param_specs(&params.config) {
            let p = params.get(&name);
            let g = grads[&name].data();
            let m = self.m.get_mut(&name).unwrap();
            let v = self.v.get_mut(&name).unwrap();
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            let t = Tensor::new(p.shape().to_vec(), data)?;
            tensors.insert(name, Arc::new(t));
        }
        Ok(params.with_tensors(tensors))
    }
}

// ── loss and gradients ──────────────────────────────────────────────────

/// Cross-entropy at the example's target positions and the matching seed
/// gradient at the logits (softmax − one-hot, normalized per example).
fn example_loss_and_seed(logits: &Tensor, example: &TrainExample) -> Result<(f64, Tensor)> {
    let (seq, vocab) = logits.rows_cols();
    let mut seed = Tensor::zeros(vec![seq, vocab]);
    let mut loss = 0.0;
    let n = example.targets.len() as f64;
    for &(pos, target) in &example.targets {
        if pos >= seq || target >= vocab {
            return Err(Error::Metric(format!("target ({pos}, {target}) out of range")));
        }
        let row = logits.row(pos);
        let mut probs = vec![0.0; vocab];
        tensor::softmax_row_into(&mut probs, row);
        loss -= probs[target].max(1e-300).ln();
        let srow = seed.row_mut(pos);
        for i in 0..vocab {
            srow[i] += probs[i] / n;
        }
        srow[target] -= 1.0 / n;
    }
    Ok((loss / n, seed))
}

fn example_gradients(
    params: &Parameters,
    example: &TrainExample,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let run = run_taped(params, &example.tokens)?;
    let (loss, seed) = example_loss_and_seed(run.logits_tensor(), example)?;
    let ids: Vec<_> = run.param_ids.values().copied().collect();
    let mut grads = run.tape.backward(run.logits, &seed, &ids)?;
    let mut by_name = BTreeMap::new();
    for (name, id) in &run.param_ids {
        by_name.insert(name.clone(), grads.remove(id).expect("requested gradient"));
    }
    Ok((loss, by_name))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    /// Held-out pair accuracy (percent), when evaluated at this step.
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    pub steps_run: usize,
    pub final_heldout_accuracy: Option<f64>,
}

/// Runs the training loop and returns updated parameters plus the loss
/// curve. Gradients are averaged over the batch in a fixed order, so a
/// given (config, seed, datasets) triple reproduces bit-identical weights.
pub fn train(
    params: &Parameters,
    validation: &[TrainExample],
    computation: &[TrainExample],
    heldout: &[PromptPair],
    cfg: &TrainConfig,
) -> Result<(Parameters, TrainOutcome)> {
    if validation.is_empty() && computation.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut rng = SeedStreams::new(cfg.seed).rng("train.batch");
    let mut current = params.clone();
    let mut adam = AdamState::new(params);
    let mut curve = Vec::new();
    let mut final_acc = None;

    let p_validation = if computation.is_empty() {
        1.0
    } else if validation.is_empty() {
        0.0
    } else {
        cfg.validation_weight / (cfg.validation_weight + cfg.computation_weight)
    };

    for step in 0..cfg.steps {
        let batch: Vec<&TrainExample> = (0..cfg.batch_size)
            .map(|_| {
                if rng.random::<f64>() < p_validation {
                    &validation[rng.random_range(0..validation.len())]
                } else {
                    &computation[rng.random_range(0..computation.len())]
                }
            })
            .collect();

        let results = par::map(&batch, |ex| example_gradients(&current, ex));
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (name, tensor) in g {
                match grads.get_mut(&name) {
                    Some(acc) => *acc = tensor::add(acc, &tensor)?,
                    None => {
                        grads.insert(name, tensor);
                    }
                }
            }
        }
        loss /= batch.len() as f64;
        let scale = 1.0 / batch.len() as f64;
        for g in grads.values_mut() {
            *g = tensor::scale(g, scale);
        }

        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        current = adam.step(&current, &grads, cfg)?;

        let mut point = LossPoint { step, loss, heldout_accuracy: None };
        let evaluate = cfg.eval_every > 0
            && !heldout.is_empty()
            && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        if evaluate {
            let report = evaluate_detection_accuracy(&current, heldout)?;
            point.heldout_accuracy = Some(report.mean);
            final_acc = Some(report.mean);
            curve.push(point);
            if cfg.early_stop_accuracy.is_some_and(|t| report.mean >= t) {
                return Ok((
                    current,
                    TrainOutcome { curve, steps_run: step + 1, final_heldout_accuracy: final_acc },
                ));
            }
        } else {
            curve.push(point);
        }
    }
    Ok((current, TrainOutcome { curve, steps_run: cfg.steps, final_heldout_accuracy: final_acc }))
}

// ── the accuracy protocol ───────────────────────────────────────────────

/// A pair counts as correct iff the highest final-position logit of the
/// clean prompt lies in the clean label set AND the corrupt prompt's lies
/// in the corrupt label set.
pub fn classify_pair(clean_row: &[f64], corrupt_row: &[f64], pair: &PromptPair) -> bool {
    argmax(clean_row).is_some_and(|t| pair.labels.clean.contains(&t))
        && argmax(corrupt_row).is_some_and(|t| pair.labels.corrupt.contains(&t))
}

pub fn argmax(row: &[f64]) -> Option<TokenId> {
    if row.is_empty() {
        return None;
    }
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    Some(best)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Percent accuracy per template id.
    pub per_template: BTreeMap<u8, f64>,
    /// Mean of the per-template accuracies.
    pub mean: f64,
    /// Population standard deviation across templates.
    pub std: f64,
    pub n_pairs: usize,
}

pub fn evaluate_detection_accuracy(
    params: &Parameters,
    pairs: &[PromptPair],
) -> Result<DetectionReport> {
    let correct = pair_correctness(params, pairs)?;
    let mut per_template: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for (pair, ok) in pairs.iter().zip(&correct) {
        let e = per_template.entry(pair.template_id).or_insert((0, 0));
        e.1 += 1;
        if *ok {
            e.0 += 1;
        }
    }
    let accs: BTreeMap<u8, f64> =
        per_template.into_iter().map(|(t, (ok, n))| (t, 100.0 * ok as f64 / n as f64)).collect();
    let mean = accs.values().sum::<f64>() / accs.len().max(1) as f64;
    let var = accs.values().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len().max(1) as f64;
    Ok(DetectionReport { per_template: accs, mean, std: var.sqrt(), n_pairs: pairs.len() })
}

/// Per-pair correctness under the detection protocol.
pub fn pair_correctness(params: &Parameters, pairs: &[PromptPair]) -> Result<Vec<bool>> {
    let rows = par::map(pairs, |pair| -> Result<bool> {
        let clean = exec::run_plain(params, &pair.clean_tokens)?;
        let corrupt = exec::run_plain(params, &pair.corrupt_tokens)?;
        let (cs, _) = clean.rows_cols();
        let (ks, _) = corrupt.rows_cols();
        Ok(classify_pair(clean.row(cs - 1), corrupt.row(ks - 1), pair))
    });
    rows.into_iter().collect()
}

/// Keeps exactly the correctly classified pairs; the second list holds the
/// indices of the removed ones.
pub fn filter_correct_pairs(
    params: &Parameters,
    pairs: &[PromptPair],
) -> Result<(Vec<PromptPair>, Vec<usize>)> {
    let correct = pair_correctness(params, pairs)?;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, (pair, ok)) in pairs.iter().zip(&correct).enumerate() {
        if *ok {
            kept.push(pair.clone());
        } else {
            removed.push(i);
        }
    }
    Ok((kept, removed))
}

pub fn write_loss_csv(path: &std::path::Path, outcome: &TrainOutcome) -> Result<()> {
    let mut s = String::from("step,loss,heldout_accuracy\n");
    for p in &outcome.curve {
        let acc = p.heldout_accuracy.map(|a| format!("{a}")).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, acc));
    }
    crate::report::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_pairs;
    use crate::model::{init_model, ModelConfig};

    fn small_params(seed: u64) -> Parameters {
        let mut cfg = ModelConfig::desk(seed);
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_model = 8;
        cfg.d_head = 4;
        cfg.d_mlp = 16;
        init_model(&cfg).unwrap()
    }

    fn small_data() -> (Vec<TrainExample>, Vec<TrainExample>, Vec<PromptPair>) {
        let t = Template::get(Operation::Add, 1).unwrap();
        let pairs = generate_pairs(t, 8, ErrorType::Result, 2).unwrap();
        let val = validation_examples(&pairs);
        let comp = computation_examples(Operation::Add, 8, 3).unwrap();
        (val, comp, pairs)
    }

    #[test]
    fn zero_steps_leaves_parameters_unchanged() {
        let params = small_params(1);
        let (val, comp, heldout) = small_data();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (after, outcome) = train(&params, &val, &comp, &heldout, &cfg).unwrap();
        assert_eq!(params.fingerprint(), after.fingerprint());
        assert!(outcome.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let params = small_params(1);
        let (val, comp, heldout) = small_data();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            eval_every: 0,
            early_stop_accuracy: None,
            ..Default::default()
        };
        let (a, out_a) = train(&params, &val, &comp, &heldout, &cfg).unwrap();
        let (b, out_b) = train(&params, &val, &comp, &heldout, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(
            out_a.curve.last().unwrap().loss.to_bits(),
            out_b.curve.last().unwrap().loss.to_bits()
        );
        let first: f64 = out_a.curve[..10].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        let last: f64 = out_a.curve[50..].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn always_valid_model_scores_zero() {
        // Doctored logits where `valid` always wins: every clean prompt is
        // misclassified, so pair accuracy is 0.
        let vocab = Vocab::shared();
        let t = Template::get(Operation::Add, 1).unwrap();
        let pairs = generate_pairs(t, 5, ErrorType::Result, 4).unwrap();
        let mut row = vec![0.0; vocab.len()];
        row[vocab.valid_id()] = 10.0;
        for p in &pairs {
            assert!(!classify_pair(&row, &row, p));
        }
    }

    #[test]
    fn ce_seed_matches_numeric_gradient() {
        let logits =
            Tensor::matrix(2, 5, vec![0.3, -0.1, 0.7, 0.0, 0.2, 1.0, 0.5, -0.3, 0.1, 0.0]).unwrap();
        let ex = TrainExample { tokens: vec![0, 1], targets: vec![(0, 2), (1, 0)] };
        let (_, seed) = example_loss_and_seed(&logits, &ex).unwrap();
        let h = 1e-6;
        for pos in 0..2 {
            for tok in 0..5 {
                let mut up = logits.clone();
                up.row_mut(pos)[tok] += h;
                let mut down = logits.clone();
                down.row_mut(pos)[tok] -= h;
                let (lu, _) = example_loss_and_seed(&up, &ex).unwrap();
                let (ld, _) = example_loss_and_seed(&down, &ex).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (fd - seed.row(pos)[tok]).abs() < 1e-6,
                    "pos {pos} tok {tok}: {fd} vs {}",
                    seed.row(pos)[tok]
                );
            }
        }
    }

    #[test]
    fn filtering_removes_exactly_the_misclassified() {
        let params = small_params(3);
        let t = Template::get(Operation::Add, 2).unwrap();
        let pairs = generate_pairs(t, 10, ErrorType::Result, 5).unwrap();
        let correct = pair_correctness(&params, &pairs).unwrap();
        let (kept, removed) = filter_correct_pairs(&params, &pairs).unwrap();
        assert_eq!(kept.len() + removed.len(), pairs.len());
        assert_eq!(kept.len(), correct.iter().filter(|&&c| c).count());
    }

    #[test]
    fn report_shape() {
        let params = small_params(3);
        let mut pairs =
            generate_pairs(Template::get(Operation::Add, 1).unwrap(), 4, ErrorType::Result, 5)
                .unwrap();
        pairs.extend(
            generate_pairs(Template::get(Operation::Add, 2).unwrap(), 4, ErrorType::Result, 6)
                .unwrap(),
        );
        let report = evaluate_detection_accuracy(&params, &pairs).unwrap();
        assert_eq!(report.per_template.len(), 2);
        assert!(report.mean >= 0.0 && report.mean <= 100.0);
        assert!(report.std >= 0.0);
    }
}

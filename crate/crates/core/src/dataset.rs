//! Template-driven prompt generation.
//!
//! Each template renders a math word problem, a worked solution containing
//! an equation (`5 + 8 = 13`) and a restated numeric answer, and a final
//! verdict stem ending in `is`. A prompt pair couples a `clean` prompt —
//! which *contains* the planted error and should be judged `invalid` — with
//! a `corrupt` prompt that is error-free. The two differ only at the digit
//! tokens of the error sites.
//!
//! Token positions carry abstract labels (`result-first`, `answer-second`,
//! `final`, …) so circuits found on different templates can be compared at
//! semantically equivalent positions even though the raw indices differ.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tokenizer::{TokenId, Vocab, ADD_VERBS, INSTRUCTIONS, NAMES, OBJECTS, SUB_VERBS};

pub const TEMPLATES_PER_OP: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operation {
    pub const ALL: [Operation; 4] = [Operation::Add, Operation::Sub, Operation::Mul, Operation::Div];

    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            Operation::Add => a + b,
            Operation::Sub => a - b,
            Operation::Mul => a * b,
            Operation::Div => a / b,
        }
    }

    /// Number of digit tokens used for the first operand.
    pub fn op1_digits(self) -> usize {
        match self {
            Operation::Add => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operation::Add => "add",
            Operation::Sub => "sub",
            Operation::Mul => "mul",
            Operation::Div => "div",
        };
        f.write_str(s)
    }
}

impl FromStr for Operation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Operation::Add),
            "sub" => Ok(Operation::Sub),
            "mul" => Ok(Operation::Mul),
            "div" => Ok(Operation::Div),
            other => Err(Error::Dataset(format!("unknown operation '{other}'"))),
        }
    }
}

/// Where the planted error sits in the clean prompt.
///
/// `Both` uses the *same* wrong value at the equation result and the final
/// numeric answer, so the two sites stay superficially consistent. `None`
/// plants no error; clean and corrupt prompts coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    Result,
    Answer,
    Both,
    None,
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorType::Result => "result",
            ErrorType::Answer => "answer",
            ErrorType::Both => "both",
            ErrorType::None => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for ErrorType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "result" => Ok(ErrorType::Result),
            "answer" => Ok(ErrorType::Answer),
            "both" => Ok(ErrorType::Both),
            "none" => Ok(ErrorType::None),
            other => Err(Error::Dataset(format!("unknown error type '{other}'"))),
        }
    }
}

// ── position labels ─────────────────────────────────────────────────────

/// Abstract label of a token position. The named variants exist in every
/// template; every remaining position gets a template-local label that never
/// matches across templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PosLabel {
    Op1InEq,
    Op2InEq,
    Equals,
    ResultFirst,
    ResultSecond,
    AnswerFirst,
    AnswerSecond,
    Final,
    Local { template: u8, pos: u16 },
}

impl PosLabel {
    pub const SEMANTIC: [PosLabel; 8] = [
        PosLabel::Op1InEq,
        PosLabel::Op2InEq,
        PosLabel::Equals,
        PosLabel::ResultFirst,
        PosLabel::ResultSecond,
        PosLabel::AnswerFirst,
        PosLabel::AnswerSecond,
        PosLabel::Final,
    ];

    pub fn is_semantic(self) -> bool {
        !matches!(self, PosLabel::Local { .. })
    }
}

impl fmt::Display for PosLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PosLabel::Op1InEq => f.write_str("op1-in-eq"),
            PosLabel::Op2InEq => f.write_str("op2-in-eq"),
            PosLabel::Equals => f.write_str("equals"),
            PosLabel::ResultFirst => f.write_str("result-first"),
            PosLabel::ResultSecond => f.write_str("result-second"),
            PosLabel::AnswerFirst => f.write_str("answer-first"),
            PosLabel::AnswerSecond => f.write_str("answer-second"),
            PosLabel::Final => f.write_str("final"),
            PosLabel::Local { template, pos } => write!(f, "t{template}.p{pos}"),
        }
    }
}

impl FromStr for PosLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op1-in-eq" => return Ok(PosLabel::Op1InEq),
            "op2-in-eq" => return Ok(PosLabel::Op2InEq),
            "equals" => return Ok(PosLabel::Equals),
            "result-first" => return Ok(PosLabel::ResultFirst),
            "result-second" => return Ok(PosLabel::ResultSecond),
            "answer-first" => return Ok(PosLabel::AnswerFirst),
            "answer-second" => return Ok(PosLabel::AnswerSecond),
            "final" => return Ok(PosLabel::Final),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix('t') {
            if let Some((t, p)) = rest.split_once(".p") {
                if let (Ok(t), Ok(p)) = (t.parse(), p.parse()) {
                    return Ok(PosLabel::Local { template: t, pos: p });
                }
            }
        }
        Err(Error::UnknownLabel(s.to_string()))
    }
}

impl From<PosLabel> for String {
    fn from(l: PosLabel) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for PosLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Total position↔label correspondence for one template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenLabelMap {
    pub template_id: u8,
    pub operation: Operation,
    labels: Vec<PosLabel>, // indexed by position
}

impl TokenLabelMap {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_of(&self, pos: usize) -> PosLabel {
        self.labels[pos]
    }

    pub fn position(&self, label: PosLabel) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// The semantic-label → index map, as serialized into dataset files.
    pub fn semantic_positions(&self) -> BTreeMap<String, usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_semantic())
            .map(|(i, l)| (l.to_string(), i))
            .collect()
    }

    fn truncated(&self, len: usize) -> TokenLabelMap {
        TokenLabelMap {
            template_id: self.template_id,
            operation: self.operation,
            labels: self.labels[..len].to_vec(),
        }
    }
}

// ── templates ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Lit(&'static str),
    Instr,
    Name,
    Obj,
    Verb,
    Pron,
    Num1,
    Num2,
    EqOp1,
    EqOp2,
    ResultSite,
    AnswerSite,
}

const ADD_TEMPLATES: [&str; 8] = [
    "[instr] . [name] has [num1] [obj] . [pron] [verb] [num2] more . reasoning : [name] has [eq1] + [eq2] = [res] [obj] . so [pron] has [ans] [obj] . the reasoning is",
    "[instr] . [name] starts with [num1] [obj] . then [pron] [verb] [num2] more . we add [eq1] + [eq2] = [res] . so [name] now has [ans] [obj] . the reasoning is",
    "[instr] . [name] owns [num1] [obj] and [verb] [num2] more . we compute [eq1] + [eq2] = [res] in total . thus [name] owns [ans] [obj] . the reasoning is",
    "[instr] . [name] begins with [num1] [obj] . after [verb] [num2] more , the total is [eq1] + [eq2] = [res] . [name] ends with [ans] [obj] . the reasoning is",
    "[instr] . [num1] [obj] belong to [name] . [pron] [verb] [num2] more . adding gives [eq1] + [eq2] = [res] . now [name] holds [ans] [obj] . the reasoning is",
    "[instr] . [name] had [num1] [obj] and then [verb] [num2] more . by addition [eq1] + [eq2] = [res] . [name] therefore has [ans] [obj] . the reasoning is",
    "[instr] . [name] collects [num1] [obj] . [pron] also [verb] [num2] more [obj] . in sum [eq1] + [eq2] = [res] . [pron] keeps [ans] [obj] . the reasoning is",
    "[instr] . [name] gathers [num1] [obj] and [verb] [num2] extra . let us add [eq1] + [eq2] = [res] . finally [name] has [ans] [obj] . the reasoning is",
];

const SUB_TEMPLATES: [&str; 8] = [
    "[instr] . [name] has [num1] [obj] . [pron] [verb] [num2] . reasoning : [name] has [eq1] - [eq2] = [res] [obj] . so [pron] has [ans] [obj] . the reasoning is",
    "[instr] . [name] starts with [num1] [obj] . then [pron] [verb] [num2] . we subtract [eq1] - [eq2] = [res] . so [name] now has [ans] [obj] . the reasoning is",
    "[instr] . [name] owns [num1] [obj] and [verb] [num2] . we compute [eq1] - [eq2] = [res] in total . thus [name] owns [ans] [obj] . the reasoning is",
    "[instr] . [name] begins with [num1] [obj] . after [pron] [verb] [num2] , the rest is [eq1] - [eq2] = [res] . [name] ends with [ans] [obj] . the reasoning is",
    "[instr] . [num1] [obj] belong to [name] . [pron] [verb] [num2] . removing gives [eq1] - [eq2] = [res] . now [name] holds [ans] [obj] . the reasoning is",
    "[instr] . [name] had [num1] [obj] and then [verb] [num2] . by subtraction [eq1] - [eq2] = [res] . [name] therefore has [ans] [obj] . the reasoning is",
    "[instr] . [name] collects [num1] [obj] . [pron] then [verb] [num2] [obj] . in sum [eq1] - [eq2] = [res] . [pron] keeps [ans] [obj] . the reasoning is",
    "[instr] . [name] gathers [num1] [obj] and [verb] [num2] . let us subtract [eq1] - [eq2] = [res] . finally [name] has [ans] [obj] . the reasoning is",
];

const MUL_TEMPLATES: [&str; 8] = [
    "[instr] . [name] makes [num1] [obj] per day . after [num2] days : [eq1] * [eq2] = [res] . so [name] makes [ans] [obj] . the reasoning is",
    "[instr] . [name] buys [num1] [obj] per trip . with [num2] trips we multiply [eq1] * [eq2] = [res] . so [name] buys [ans] [obj] . the reasoning is",
    "[instr] . [name] earns [num1] [obj] per task . over [num2] tasks we compute [eq1] * [eq2] = [res] . thus [name] earns [ans] [obj] . the reasoning is",
    "[instr] . [name] finds [num1] [obj] per week . after [num2] weeks , the total is [eq1] * [eq2] = [res] . [name] ends with [ans] [obj] . the reasoning is",
    "[instr] . [num1] [obj] go to [name] per round . with [num2] rounds multiplying gives [eq1] * [eq2] = [res] . now [name] holds [ans] [obj] . the reasoning is",
    "[instr] . [name] gets [num1] [obj] per visit and makes [num2] visits . by multiplication [eq1] * [eq2] = [res] . [name] therefore has [ans] [obj] . the reasoning is",
    "[instr] . [name] collects [num1] [obj] per game . playing [num2] games : in sum [eq1] * [eq2] = [res] . [pron] keeps [ans] [obj] . the reasoning is",
    "[instr] . [name] wins [num1] [obj] per match over [num2] matches . let us multiply [eq1] * [eq2] = [res] . finally [name] has [ans] [obj] . the reasoning is",
];

const DIV_TEMPLATES: [&str; 8] = [
    "[instr] . [name] has [num1] [obj] . groups of [num2] make [eq1] / [eq2] = [res] groups . so [name] fills [ans] groups . the reasoning is",
    "[instr] . [name] starts with [num1] [obj] . sharing by [num2] we divide [eq1] / [eq2] = [res] . so [name] fills [ans] boxes . the reasoning is",
    "[instr] . [name] owns [num1] [obj] . with [num2] per pile we compute [eq1] / [eq2] = [res] piles . thus [name] makes [ans] piles . the reasoning is",
    "[instr] . [name] begins with [num1] [obj] . putting [num2] per box , the count is [eq1] / [eq2] = [res] . [name] ends with [ans] boxes . the reasoning is",
    "[instr] . [num1] [obj] belong to [name] . splitting by [num2] gives [eq1] / [eq2] = [res] . now [name] holds [ans] piles . the reasoning is",
    "[instr] . [name] had [num1] [obj] and packs [num2] per bag . by division [eq1] / [eq2] = [res] . [name] therefore fills [ans] bags . the reasoning is",
    "[instr] . [name] collects [num1] [obj] . stacking [num2] per row : in sum [eq1] / [eq2] = [res] . [pron] keeps [ans] rows . the reasoning is",
    "[instr] . [name] gathers [num1] [obj] and sorts [num2] per shelf . let us divide [eq1] / [eq2] = [res] . finally [name] fills [ans] shelves . the reasoning is",
];

/// Every template text, for vocabulary construction.
pub(crate) fn template_texts() -> impl Iterator<Item = &'static str> {
    ADD_TEMPLATES
        .iter()
        .chain(&SUB_TEMPLATES)
        .chain(&MUL_TEMPLATES)
        .chain(&DIV_TEMPLATES)
        .copied()
}

#[derive(Debug, Clone)]
pub struct Template {
    pub id: u8,
    pub operation: Operation,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn get(operation: Operation, id: u8) -> Result<&'static Template> {
        if !(1..=TEMPLATES_PER_OP).contains(&id) {
            return Err(Error::Dataset(format!("template id {id} out of range 1..=8")));
        }
        Ok(&Template::all(operation)[id as usize - 1])
    }

    pub fn all(operation: Operation) -> &'static [Template] {
        static TEMPLATES: OnceLock<BTreeMap<Operation, Vec<Template>>> = OnceLock::new();
        &TEMPLATES.get_or_init(|| {
            let mut map = BTreeMap::new();
            for (op, texts) in [
                (Operation::Add, &ADD_TEMPLATES),
                (Operation::Sub, &SUB_TEMPLATES),
                (Operation::Mul, &MUL_TEMPLATES),
                (Operation::Div, &DIV_TEMPLATES),
            ] {
                let ts = texts
                    .iter()
                    .enumerate()
                    .map(|(i, text)| Template::parse(op, i as u8 + 1, text))
                    .collect();
                map.insert(op, ts);
            }
            map
        })[&operation]
    }

    fn parse(operation: Operation, id: u8, text: &'static str) -> Template {
        let pieces = text
            .split_whitespace()
            .map(|w| match w {
                "[instr]" => Piece::Instr,
                "[name]" => Piece::Name,
                "[obj]" => Piece::Obj,
                "[verb]" => Piece::Verb,
                "[pron]" => Piece::Pron,
                "[num1]" => Piece::Num1,
                "[num2]" => Piece::Num2,
                "[eq1]" => Piece::EqOp1,
                "[eq2]" => Piece::EqOp2,
                "[res]" => Piece::ResultSite,
                "[ans]" => Piece::AnswerSite,
                lit => Piece::Lit(lit),
            })
            .collect();
        Template { id, operation, pieces }
    }

    fn piece_width(&self, piece: Piece) -> usize {
        match piece {
            Piece::Instr => 7,
            Piece::Num1 | Piece::EqOp1 => self.operation.op1_digits(),
            Piece::ResultSite | Piece::AnswerSite => 2,
            _ => 1,
        }
    }

    /// Token length of any rendering of this template.
    pub fn token_len(&self) -> usize {
        self.pieces.iter().map(|&p| self.piece_width(p)).sum()
    }

    /// Resolves every abstract label to its token index.
    pub fn label_positions(&self) -> TokenLabelMap {
        let mut labels = Vec::with_capacity(self.token_len());
        for &piece in &self.pieces {
            let base = labels.len() as u16;
            match piece {
                Piece::EqOp1 => {
                    labels.push(PosLabel::Op1InEq);
                    for extra in 1..self.piece_width(piece) {
                        labels.push(PosLabel::Local { template: self.id, pos: base + extra as u16 });
                    }
                }
                Piece::EqOp2 => labels.push(PosLabel::Op2InEq),
                Piece::Lit("=") => labels.push(PosLabel::Equals),
                Piece::ResultSite => {
                    labels.push(PosLabel::ResultFirst);
                    labels.push(PosLabel::ResultSecond);
                }
                Piece::AnswerSite => {
                    labels.push(PosLabel::AnswerFirst);
                    labels.push(PosLabel::AnswerSecond);
                }
                _ => {
                    for extra in 0..self.piece_width(piece) {
                        labels.push(PosLabel::Local { template: self.id, pos: base + extra as u16 });
                    }
                }
            }
        }
        // Last token is the verdict stem "is".
        let last = labels.len() - 1;
        labels[last] = PosLabel::Final;
        TokenLabelMap { template_id: self.id, operation: self.operation, labels }
    }

    fn render(
        &self,
        vocab: &Vocab,
        asg: &Assignment,
        result_site: u32,
        answer_site: u32,
    ) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(self.token_len());
        for &piece in &self.pieces {
            match piece {
                Piece::Lit(w) => out.push(vocab.id(w)?),
                Piece::Instr => out.extend(vocab.encode(INSTRUCTIONS[asg.instr])?),
                Piece::Name => out.push(vocab.id(NAMES[asg.name].0)?),
                Piece::Pron => out.push(vocab.id(NAMES[asg.name].1)?),
                Piece::Obj => out.push(vocab.id(OBJECTS[asg.obj])?),
                Piece::Verb => {
                    let verbs = match self.operation {
                        Operation::Sub => SUB_VERBS,
                        _ => ADD_VERBS,
                    };
                    out.push(vocab.id(verbs[asg.verb])?);
                }
                Piece::Num1 | Piece::EqOp1 => match self.operation.op1_digits() {
                    1 => out.push(vocab.digit_id(asg.num1)),
                    _ => out.extend(vocab.two_digit(asg.num1)?),
                },
                Piece::Num2 | Piece::EqOp2 => out.push(vocab.digit_id(asg.num2)),
                Piece::ResultSite => out.extend(vocab.two_digit(result_site)?),
                Piece::AnswerSite => out.extend(vocab.two_digit(answer_site)?),
            }
        }
        Ok(out)
    }
}

// ── assignments and pairs ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub instr: usize,
    pub name: usize,
    pub obj: usize,
    pub verb: usize,
    pub num1: u32,
    pub num2: u32,
}

impl Assignment {
    fn sample<R: Rng>(operation: Operation, rng: &mut R) -> Assignment {
        let verbs = match operation {
            Operation::Sub => SUB_VERBS.len(),
            _ => ADD_VERBS.len(),
        };
        let (num1, num2) = sample_operands(operation, rng);
        Assignment {
            instr: rng.random_range(0..INSTRUCTIONS.len()),
            name: rng.random_range(0..NAMES.len()),
            obj: rng.random_range(0..OBJECTS.len()),
            verb: rng.random_range(0..verbs),
            num1,
            num2,
        }
    }
}

/// Draws operands within the per-operation value ranges: addition uses two
/// single-digit operands with a two-digit sum; the other operations pair a
/// two-digit with a single-digit operand and keep the result two-digit
/// (division is exact).
pub fn sample_operands<R: Rng>(operation: Operation, rng: &mut R) -> (u32, u32) {
    match operation {
        Operation::Add => {
            let a = rng.random_range(1..=9);
            let b = rng.random_range((10 - a).max(1)..=9);
            (a, b)
        }
        Operation::Sub => {
            let b = rng.random_range(1..=9);
            let a = rng.random_range((b + 10)..=99);
            (a, b)
        }
        Operation::Mul => {
            let a = rng.random_range(10..=49);
            let b = rng.random_range(1..=(99 / a));
            (a, b)
        }
        Operation::Div => {
            let b = rng.random_range(2..=9);
            let q = rng.random_range(10..=(99 / b));
            (b * q, b)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairLabels {
    pub clean: Vec<TokenId>,
    pub corrupt: Vec<TokenId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPair {
    pub template_id: u8,
    pub operation: Operation,
    pub error_type: ErrorType,
    pub clean_tokens: Vec<TokenId>,
    pub corrupt_tokens: Vec<TokenId>,
    /// Answer-token sets: `labels.clean` is expected after the clean prompt,
    /// `labels.corrupt` after the corrupt prompt.
    pub labels: PairLabels,
    pub position_labels: BTreeMap<String, usize>,
    pub assignment: Assignment,
    pub result: u32,
    pub error_value: Option<u32>,
}

impl PromptPair {
    pub fn seq_len(&self) -> usize {
        self.clean_tokens.len()
    }
}

/// Generates `n` (clean, corrupt) prompt pairs for one template.
///
/// The clean prompt carries the error dictated by `error_type` (an incorrect
/// two-digit value; for addition it stays within 10..=19); the corrupt
/// prompt is error-free. With `ErrorType::None` the two prompts coincide and
/// both expect the `valid` verdict.
pub fn generate_pairs(
    template: &Template,
    n: usize,
    error_type: ErrorType,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    if n == 0 {
        return Err(Error::Dataset("pair count must be at least 1".into()));
    }
    let vocab = Vocab::shared();
    let mut rng = rng_from_seed(seed);
    let label_map = template.label_positions();
    let position_labels = label_map.semantic_positions();

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let asg = Assignment::sample(template.operation, &mut rng);
        let result = template.operation.apply(asg.num1, asg.num2);
        let error_value = match error_type {
            ErrorType::None => None,
            _ => Some(sample_error_value(template.operation, result, &mut rng)),
        };
        let (result_site, answer_site) = match (error_type, error_value) {
            (ErrorType::Result, Some(e)) => (e, result),
            (ErrorType::Answer, Some(e)) => (result, e),
            (ErrorType::Both, Some(e)) => (e, e),
            _ => (result, result),
        };
        let clean_tokens = template.render(vocab, &asg, result_site, answer_site)?;
        let corrupt_tokens = template.render(vocab, &asg, result, result)?;
        let clean_label = match error_type {
            ErrorType::None => vocab.valid_id(),
            _ => vocab.invalid_id(),
        };
        pairs.push(PromptPair {
            template_id: template.id,
            operation: template.operation,
            error_type,
            clean_tokens,
            corrupt_tokens,
            labels: PairLabels { clean: vec![clean_label], corrupt: vec![vocab.valid_id()] },
            position_labels: position_labels.clone(),
            assignment: asg,
            result,
            error_value,
        });
    }
    Ok(pairs)
}

fn sample_error_value<R: Rng>(operation: Operation, result: u32, rng: &mut R) -> u32 {
    let range = match operation {
        Operation::Add => 10..=19,
        _ => 10..=99,
    };
    loop {
        let v = rng.random_range(range.clone());
        if v != result {
            return v;
        }
    }
}

const RESAMPLE_BUDGET: usize = 100;

/// Derives result-computation pairs from detection pairs: both prompts are
/// truncated right after the equals sign, the corrupt prompt's operands are
/// resampled so the two correct results start with different digits, and the
/// label of each side becomes the first digit token of its correct result.
pub fn make_computation_pairs(pairs: &[PromptPair], seed: u64) -> Result<Vec<PromptPair>> {
    let vocab = Vocab::shared();
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let template = Template::get(pair.operation, pair.template_id)?;
        let label_map = template.label_positions();
        let equals = label_map.position(PosLabel::Equals)?;
        let cut = equals + 1;

        let result = pair.result;
        let clean_first = first_digit(result);
        let mut found = None;
        for _ in 0..RESAMPLE_BUDGET {
            let (a, b) = sample_computation_corrupt(pair.operation, &mut rng);
            let r = pair.operation.apply(a, b);
            if first_digit(r) != clean_first && (a, b) != (pair.assignment.num1, pair.assignment.num2)
            {
                found = Some((a, b, r));
                break;
            }
        }
        let Some((a, b, corrupt_result)) = found else {
            return Err(Error::Dataset(
                "could not resample corrupt operands with a distinct result".into(),
            ));
        };

        let corrupt_asg = Assignment { num1: a, num2: b, ..pair.assignment };
        // Render with a placeholder two-digit value; sites past the cut are
        // discarded anyway.
        let clean_full = template.render(vocab, &pair.assignment, 10, 10)?;
        let corrupt_full = template.render(vocab, &corrupt_asg, 10, 10)?;

        out.push(PromptPair {
            template_id: pair.template_id,
            operation: pair.operation,
            error_type: ErrorType::None,
            clean_tokens: clean_full[..cut].to_vec(),
            corrupt_tokens: corrupt_full[..cut].to_vec(),
            labels: PairLabels {
                clean: vec![vocab.digit_id(clean_first)],
                corrupt: vec![vocab.digit_id(first_digit(corrupt_result))],
            },
            position_labels: label_map
                .truncated(cut)
                .semantic_positions(),
            assignment: corrupt_asg,
            result: corrupt_result,
            error_value: None,
        });
    }
    Ok(out)
}

fn first_digit(v: u32) -> u32 {
    if v >= 10 {
        v / 10
    } else {
        v
    }
}

/// Tokens up to and including the equals sign under an assignment whose
/// operands need not respect the template's numeric ranges (the result
/// sites are cut off, so they never render).
pub fn render_equation_prefix(template: &Template, asg: &Assignment) -> Result<Vec<TokenId>> {
    let map = template.label_positions();
    let cut = map.position(PosLabel::Equals)? + 1;
    let full = template.render(Vocab::shared(), asg, 10, 10)?;
    Ok(full[..cut].to_vec())
}

/// Corrupt-operand sampler for computation pairs. Addition draws pairs with
/// single-digit sums so the leading digit can differ from the clean 1x
/// result; the other operations redraw from their normal ranges.
fn sample_computation_corrupt<R: Rng>(operation: Operation, rng: &mut R) -> (u32, u32) {
    match operation {
        Operation::Add => {
            let a = rng.random_range(1..=8);
            let b = rng.random_range(1..=(9 - a));
            (a, b)
        }
        _ => sample_operands(operation, rng),
    }
}

// ── file io ─────────────────────────────────────────────────────────────

pub fn write_jsonl(path: &Path, pairs: &[PromptPair]) -> Result<()> {
    let mut file = File::create(path)?;
    for pair in pairs {
        serde_json::to_writer(&mut file, pair)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            pairs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(pairs)
}

//! Oracle-verifiable multi-step arithmetic problems.
//!
//! A problem is a seed value and a chain of integer operations. The reference
//! solver produces the exact step-by-step solution; the corruptor produces
//! solutions with exactly one logically wrong step (later steps recomputed
//! consistently from the wrong value). Every step and every final answer can
//! be checked programmatically, which is what makes reward-model training
//! labels free.
//!
//! Text layout, character-level:
//!   prompt:   "7 + 5 ; * 2 ?"
//!   solution: "7+5=12;12*2=24;#24"
//! Token sequences carry the step-boundary index set: the position of each
//! step's ';' plus the end-of-sequence token that terminates the "#answer"
//! step.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::rng::{derive_seed, Rng};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SYMBOLS: &[char] = &[
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '-', '*', '%', '=', ';', '#', '?', ' ',
];

/// Fixed character-level vocabulary. Ids are stable across runs: specials
/// first (PAD, BOS, EOS), then `SYMBOLS` in declaration order.
pub struct Vocabulary;

impl Vocabulary {
    pub const SIZE: usize = 3 + SYMBOLS.len();

    pub fn size() -> usize {
        Self::SIZE
    }

    pub fn encode_char(c: char) -> Result<usize, TaskError> {
        SYMBOLS
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 3)
            .ok_or(TaskError::UnknownSymbol(c))
    }

    /// Printable character for an id; None for PAD/BOS/EOS.
    pub fn decode_id(id: usize) -> Option<char> {
        if id < 3 {
            None
        } else {
            SYMBOLS.get(id - 3).copied()
        }
    }

    pub fn encode_text(text: &str) -> Result<Vec<usize>, TaskError> {
        text.chars().map(Self::encode_char).collect()
    }
}

pub const SEMI: usize = 18; // ';'
pub const HASH: usize = 19; // '#'

// ---------------------------------------------------------------------------
// Problems and solutions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Simple,
    Complex,
}

impl Family {
    pub fn tag(&self) -> u64 {
        match self {
            Family::Simple => 1,
            Family::Complex => 2,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Simple => write!(f, "simple"),
            Family::Complex => write!(f, "complex"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "%")]
    Mod,
}

impl Operator {
    pub fn symbol(&self) -> char {
        match self {
            Operator::Add => '+',
            Operator::Sub => '-',
            Operator::Mul => '*',
            Operator::Mod => '%',
        }
    }

    /// Exact integer semantics; `%` is Euclidean so results are in [0, rhs).
    pub fn apply(&self, lhs: i64, rhs: i64) -> i64 {
        match self {
            Operator::Add => lhs + rhs,
            Operator::Sub => lhs - rhs,
            Operator::Mul => lhs * rhs,
            Operator::Mod => lhs.rem_euclid(rhs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub family: Family,
    pub seed_value: i64,
    pub operations: Vec<(Operator, i64)>,
    pub prompt_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub lhs: i64,
    pub op: Operator,
    pub operand: i64,
    pub result: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepwiseSolution {
    pub steps: Vec<Step>,
    pub final_answer: i64,
    pub step_labels: Vec<bool>,
    pub answer_correct: bool,
}

impl StepwiseSolution {
    pub fn text(&self) -> String {
        let mut s = String::new();
        for step in &self.steps {
            s.push_str(&format!(
                "{}{}{}={};",
                step.lhs,
                step.op.symbol(),
                step.operand,
                step.result
            ));
        }
        s.push('#');
        s.push_str(&self.final_answer.to_string());
        s
    }
}

/// Growth bound on the true value chain, per family. Simple stays within
/// small two-digit values — the easy regime a desk-scale model can master —
/// while Complex ranges over three-digit values with mod in the operator set.
/// The bound also keeps rendered numbers short enough that every encoded
/// sequence fits the model context.
fn value_bound(family: Family) -> i64 {
    match family {
        Family::Simple => 24,
        Family::Complex => 999,
    }
}

fn render_prompt(seed_value: i64, operations: &[(Operator, i64)]) -> String {
    let mut s = seed_value.to_string();
    for (i, (op, operand)) in operations.iter().enumerate() {
        if i > 0 {
            s.push_str(" ;");
        }
        s.push_str(&format!(" {} {}", op.symbol(), operand));
    }
    s.push_str(" ?");
    s
}

/// Deterministic problem generation: the same (family, seed) yields the same
/// problem. Operators are drawn among those that keep the value chain inside
/// the family bound; Complex always contains at least one `%`.
pub fn generate_problem(family: Family, rng_seed: u64) -> Problem {
    let mut rng = Rng::new(derive_seed(rng_seed, family.tag()));
    let bound = value_bound(family);
    let (n_ops, seed_value, operand_hi) = match family {
        Family::Simple => (rng.int_in(2, 4), rng.int_in(1, 20), 9),
        Family::Complex => (rng.int_in(4, 8), rng.int_in(1, 99), 99),
    };
    let forced_mod = match family {
        Family::Simple => None,
        Family::Complex => Some(rng.index(n_ops as usize)),
    };

    let mut value = seed_value;
    let mut operations = Vec::with_capacity(n_ops as usize);
    for i in 0..n_ops as usize {
        let operand = rng.int_in(1, operand_hi);
        let op = if forced_mod == Some(i) {
            Operator::Mod
        } else {
            draw_operator(family, value, operand, bound, &mut rng)
        };
        value = op.apply(value, operand);
        operations.push((op, operand));
    }

    let prompt_text = render_prompt(seed_value, &operations);
    Problem {
        family,
        seed_value,
        operations,
        prompt_text,
    }
}

fn draw_operator(family: Family, value: i64, operand: i64, bound: i64, rng: &mut Rng) -> Operator {
    // mod is downweighted: its verification is the hardest sub-task and the
    // corpus should stay dominated by checkable add/sub/mul steps.
    let candidates: &[(Operator, f64)] = match family {
        Family::Simple => &[(Operator::Add, 1.0), (Operator::Sub, 1.0), (Operator::Mul, 1.0)],
        Family::Complex => &[
            (Operator::Add, 1.0),
            (Operator::Sub, 1.0),
            (Operator::Mul, 1.0),
            (Operator::Mod, 0.4),
        ],
    };
    let eligible: Vec<(Operator, f64)> = candidates
        .iter()
        .filter(|(op, _)| op.apply(value, operand).abs() <= bound)
        .copied()
        .collect();
    // add is safe for negative values, sub for non-negative ones, so the
    // eligible set is never empty
    debug_assert!(!eligible.is_empty());
    let weights: Vec<f64> = eligible.iter().map(|(_, w)| *w).collect();
    eligible[rng.categorical(&weights)].0
}

/// The oracle: exact chained arithmetic, all labels true.
pub fn solve_reference(problem: &Problem) -> StepwiseSolution {
    let mut steps = Vec::with_capacity(problem.operations.len());
    let mut value = problem.seed_value;
    for &(op, operand) in &problem.operations {
        let result = op.apply(value, operand);
        steps.push(Step {
            lhs: value,
            op,
            operand,
            result,
        });
        value = result;
    }
    let n = steps.len();
    StepwiseSolution {
        steps,
        final_answer: value,
        step_labels: vec![true; n],
        answer_correct: true,
    }
}

/// Replace the result of `steps[step_index]` with `result + offset` and
/// recompute all later steps from the wrong value. Exactly one label flips.
pub fn corrupt_with_offset(
    solution: &StepwiseSolution,
    step_index: usize,
    offset: i64,
) -> Result<StepwiseSolution, TaskError> {
    if step_index >= solution.steps.len() {
        return Err(TaskError::StepIndexOutOfRange {
            index: step_index,
            steps: solution.steps.len(),
        });
    }
    assert!(offset != 0, "corruption offset must be nonzero");
    let mut steps = solution.steps.clone();
    steps[step_index].result += offset;
    let mut value = steps[step_index].result;
    for step in steps.iter_mut().skip(step_index + 1) {
        step.lhs = value;
        step.result = step.op.apply(step.lhs, step.operand);
        value = step.result;
    }
    let mut step_labels = vec![true; steps.len()];
    step_labels[step_index] = false;
    Ok(StepwiseSolution {
        final_answer: value,
        steps,
        step_labels,
        answer_correct: false,
    })
}

/// Corrupt one step with a random offset in +-[1, 5].
pub fn corrupt_solution(
    solution: &StepwiseSolution,
    step_index: usize,
    rng_seed: u64,
) -> Result<StepwiseSolution, TaskError> {
    let mut rng = Rng::new(derive_seed(rng_seed, 0x0c0c));
    let magnitude = rng.int_in(1, 5);
    let offset = if rng.next_u64() & 1 == 0 {
        magnitude
    } else {
        -magnitude
    };
    corrupt_with_offset(solution, step_index, offset)
}

/// Step i is correct iff its lhs chains from the previous result (or the
/// seed for i = 0) and its claimed result is exact arithmetic.
pub fn label_steps(problem: &Problem, solution: &StepwiseSolution) -> Result<Vec<bool>, TaskError> {
    if solution.steps.len() != problem.operations.len() {
        return Err(TaskError::StepCountMismatch {
            solution_steps: solution.steps.len(),
            problem_ops: problem.operations.len(),
        });
    }
    let mut labels = Vec::with_capacity(solution.steps.len());
    let mut expected_lhs = problem.seed_value;
    for step in &solution.steps {
        let chained = step.lhs == expected_lhs;
        let exact = step.result == step.op.apply(step.lhs, step.operand);
        labels.push(chained && exact);
        expected_lhs = step.result;
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

/// Encoded problem(+solution) with step-boundary metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<usize>,
    /// Indices of step-end delimiters: each solution ';' plus the terminal
    /// token that closes the "#answer" step. Strictly increasing.
    pub step_ends: Vec<usize>,
    /// Number of leading tokens covering BOS + prompt text.
    pub prompt_len: usize,
    /// Index of the end-of-sequence token.
    pub terminal: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Encode prompt + solution: `[BOS] prompt solution [EOS]`.
pub fn encode(problem: &Problem, solution: &StepwiseSolution) -> Result<TokenSeq, TaskError> {
    encode_parts(&problem.prompt_text, Some(&solution.text()))
}

/// Encode a bare prompt: `[BOS] prompt [EOS]`, empty step set.
pub fn encode_prompt_only(problem: &Problem) -> Result<TokenSeq, TaskError> {
    encode_parts(&problem.prompt_text, None)
}

/// Prompt tokens for generation: `[BOS] prompt` without a terminator.
pub fn prompt_tokens(prompt_text: &str) -> Result<Vec<usize>, TaskError> {
    let mut tokens = vec![BOS];
    tokens.extend(Vocabulary::encode_text(prompt_text)?);
    Ok(tokens)
}

pub fn encode_parts(prompt_text: &str, solution_text: Option<&str>) -> Result<TokenSeq, TaskError> {
    let mut tokens = vec![BOS];
    tokens.extend(Vocabulary::encode_text(prompt_text)?);
    let prompt_len = tokens.len();
    let mut step_ends = Vec::new();
    if let Some(sol) = solution_text {
        for c in sol.chars() {
            let id = Vocabulary::encode_char(c)?;
            tokens.push(id);
            if id == SEMI {
                step_ends.push(tokens.len() - 1);
            }
        }
    }
    tokens.push(EOS);
    let terminal = tokens.len() - 1;
    if solution_text.is_some() {
        // the final answer is itself a step; its delimiter is the terminal
        step_ends.push(terminal);
    }
    Ok(TokenSeq {
        tokens,
        step_ends,
        prompt_len,
        terminal,
    })
}

/// Inverse of `encode`: the concatenated prompt + solution text. Special
/// tokens decode to nothing.
pub fn decode(seq: &TokenSeq) -> String {
    seq.tokens
        .iter()
        .filter_map(|&id| Vocabulary::decode_id(id))
        .collect()
}

/// Step boundaries of an arbitrary generated continuation: every ';' at or
/// after the prompt, plus the terminal position when a '#answer' was emitted
/// and the sequence was closed with EOS. Empty when the generation has no
/// recognizable step structure.
pub fn detect_step_ends(tokens: &[usize], prompt_len: usize) -> Vec<usize> {
    let mut ends: Vec<usize> = tokens
        .iter()
        .enumerate()
        .skip(prompt_len)
        .filter(|(_, &t)| t == SEMI)
        .map(|(i, _)| i)
        .collect();
    if let Some(eos_at) = tokens.iter().position(|&t| t == EOS) {
        let has_answer = tokens[prompt_len..eos_at.max(prompt_len)].contains(&HASH);
        if has_answer {
            ends.push(eos_at);
        }
    }
    ends
}

// ---------------------------------------------------------------------------
// Generated-text parsing (evaluation)
// ---------------------------------------------------------------------------

/// Structured view of a generated continuation.
#[derive(Debug, Clone, Default)]
pub struct ParsedGeneration {
    pub steps: Vec<Step>,
    pub final_answer: Option<i64>,
    /// True iff the text matches `step;...step;#answer` exactly and the
    /// generation stopped with EOS.
    pub well_formed: bool,
}

/// Parse a generated continuation (token ids, prompt excluded).
pub fn parse_generation(tokens: &[usize], hit_eos: bool) -> ParsedGeneration {
    let text: String = tokens
        .iter()
        .filter_map(|&id| Vocabulary::decode_id(id))
        .collect();
    let mut out = ParsedGeneration::default();
    let mut rest = text.as_str();
    while let Some((step, tail)) = parse_step(rest) {
        out.steps.push(step);
        rest = tail;
    }
    if let Some(ans) = rest.strip_prefix('#') {
        if let Ok(v) = ans.parse::<i64>() {
            out.final_answer = Some(v);
            out.well_formed = hit_eos && !out.steps.is_empty();
        }
    }
    out
}

fn parse_int(s: &str) -> Option<(i64, &str)> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let digits: usize = body.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let v: i64 = body[..digits].parse().ok()?;
    Some((if neg { -v } else { v }, &body[digits..]))
}

fn parse_step(s: &str) -> Option<(Step, &str)> {
    let (lhs, rest) = parse_int(s)?;
    let op = match rest.chars().next()? {
        '+' => Operator::Add,
        '-' => Operator::Sub,
        '*' => Operator::Mul,
        '%' => Operator::Mod,
        _ => return None,
    };
    let (operand, rest) = parse_int(&rest[1..])?;
    let rest = rest.strip_prefix('=')?;
    let (result, rest) = parse_int(rest)?;
    let rest = rest.strip_prefix(';')?;
    Some((
        Step {
            lhs,
            op,
            operand,
            result,
        },
        rest,
    ))
}

/// Oracle check used by evaluation: same per-step rule as `label_steps`, but
/// applied to whatever steps were generated (no count requirement).
pub fn generated_step_labels(seed_value: i64, steps: &[Step]) -> Vec<bool> {
    let mut labels = Vec::with_capacity(steps.len());
    let mut expected_lhs = seed_value;
    for step in steps {
        let chained = step.lhs == expected_lhs;
        let exact = step.result == step.op.apply(step.lhs, step.operand);
        labels.push(chained && exact);
        expected_lhs = step.result;
    }
    labels
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

/// One line of a corpus file. Field order is fixed by this struct.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusRecord {
    pub prompt: String,
    pub steps: Vec<Step>,
    pub step_labels: Vec<bool>,
    pub final_answer: i64,
    pub answer_correct: bool,
    pub family: Family,
    pub seed: u64,
}

impl CorpusRecord {
    pub fn solution(&self) -> StepwiseSolution {
        StepwiseSolution {
            steps: self.steps.clone(),
            final_answer: self.final_answer,
            step_labels: self.step_labels.clone(),
            answer_correct: self.answer_correct,
        }
    }

    pub fn token_seq(&self) -> Result<TokenSeq, TaskError> {
        encode_parts(&self.prompt, Some(&self.solution().text()))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct FamilyCounts {
    pub simple: usize,
    pub complex: usize,
}

impl FamilyCounts {
    pub fn total(&self) -> usize {
        self.simple + self.complex
    }
}

/// Corpus generation spec: how many problems per split and family, the
/// corrupted fraction of the reward-model corpora, and the length filter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusSpec {
    pub sft_train: FamilyCounts,
    pub sft_val: FamilyCounts,
    pub rm_train: FamilyCounts,
    pub rm_val: FamilyCounts,
    pub eval: FamilyCounts,
    /// Fraction of reward-model records that carry a corrupted solution.
    /// The split is exact (stratified), not sampled.
    pub corruption_fraction: f64,
    /// Encoded sequences longer than this are regenerated from the next
    /// derived seed, so every record fits the model context.
    pub max_tokens: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            sft_train: FamilyCounts { simple: 3000, complex: 1500 },
            sft_val: FamilyCounts { simple: 200, complex: 100 },
            rm_train: FamilyCounts { simple: 4500, complex: 1500 },
            rm_val: FamilyCounts { simple: 450, complex: 150 },
            eval: FamilyCounts { simple: 200, complex: 200 },
            corruption_fraction: 0.5,
            max_tokens: 152,
        }
    }
}

/// Split layout: disjoint problem-index ranges per (split, family), so train,
/// validation and eval sets can never share a problem seed.
const SPLITS: &[&str] = &["sft_train", "sft_val", "rm_train", "rm_val", "eval"];

fn split_tag(split: &str, family: Family) -> u64 {
    let split_idx = SPLITS.iter().position(|&s| s == split).unwrap() as u64;
    0x5eed_0000 + split_idx * 0x100 + family.tag()
}

/// Deterministically generate the i-th problem of a split, retrying derived
/// seeds until the encoded oracle solution fits `max_tokens`.
fn problem_for_slot(
    corpus_seed: u64,
    split: &str,
    family: Family,
    index: usize,
    max_tokens: usize,
) -> (Problem, StepwiseSolution, u64) {
    let base = derive_seed(corpus_seed, split_tag(split, family));
    for attempt in 0u64.. {
        let seed = derive_seed(base, (index as u64) << 16 | attempt);
        let problem = generate_problem(family, seed);
        let solution = solve_reference(&problem);
        let seq = encode(&problem, &solution).expect("oracle text always encodes");
        if seq.len() <= max_tokens {
            return (problem, solution, seed);
        }
    }
    unreachable!("bounded generation always fits eventually")
}

fn record(problem: &Problem, solution: &StepwiseSolution, seed: u64) -> CorpusRecord {
    CorpusRecord {
        prompt: problem.prompt_text.clone(),
        steps: solution.steps.clone(),
        step_labels: solution.step_labels.clone(),
        final_answer: solution.final_answer,
        answer_correct: solution.answer_correct,
        family: problem.family,
        seed,
    }
}

/// Build one reward-model record, corrupting when asked. Corruption retries
/// (step index, offset) draws until the corrupted encoding also fits.
fn rm_record(
    corpus_seed: u64,
    split: &str,
    family: Family,
    index: usize,
    corrupt: bool,
    max_tokens: usize,
) -> CorpusRecord {
    let (problem, clean, seed) = problem_for_slot(corpus_seed, split, family, index, max_tokens);
    if !corrupt {
        return record(&problem, &clean, seed);
    }
    let base = derive_seed(seed, 0xbad);
    for attempt in 0u64.. {
        let draw = derive_seed(base, attempt);
        let mut rng = Rng::new(draw);
        let step_index = rng.index(clean.steps.len());
        let corrupted = corrupt_solution(&clean, step_index, draw).expect("index in range");
        // a mod step downstream can collapse the propagated error back onto
        // the oracle answer; such draws are retried so every corrupted record
        // really ends in a wrong final answer
        let collapsed = corrupted.final_answer == clean.final_answer;
        let seq = encode(&problem, &corrupted).expect("corrupted text always encodes");
        if !collapsed && seq.len() <= max_tokens {
            return record(&problem, &corrupted, seed);
        }
    }
    unreachable!()
}

pub struct CorpusFiles {
    pub sft_train: std::path::PathBuf,
    pub sft_val: std::path::PathBuf,
    pub rm_train: std::path::PathBuf,
    pub rm_val: std::path::PathBuf,
    pub eval_simple: std::path::PathBuf,
    pub eval_complex: std::path::PathBuf,
}

/// Generate all corpora under `out_dir`. Line-delimited JSON, one record per
/// line, fixed field order, deterministic under (spec, seed).
pub fn build_corpus(
    spec: &CorpusSpec,
    corpus_seed: u64,
    out_dir: &Path,
) -> Result<CorpusFiles, TaskError> {
    std::fs::create_dir_all(out_dir)?;

    let clean_split = |split: &str, counts: FamilyCounts| -> Vec<CorpusRecord> {
        let mut records = Vec::with_capacity(counts.total());
        for (family, count) in [(Family::Simple, counts.simple), (Family::Complex, counts.complex)]
        {
            for i in 0..count {
                let (p, s, seed) = problem_for_slot(corpus_seed, split, family, i, spec.max_tokens);
                records.push(record(&p, &s, seed));
            }
        }
        records
    };

    let rm_split = |split: &str, counts: FamilyCounts| -> Vec<CorpusRecord> {
        let mut records = Vec::with_capacity(counts.total());
        for (family, count) in [(Family::Simple, counts.simple), (Family::Complex, counts.complex)]
        {
            // exact stratified corruption: shuffle slot indices, corrupt the
            // first round(fraction * count)
            let n_corrupt = (spec.corruption_fraction * count as f64).round() as usize;
            let mut corrupt_flags = vec![false; count];
            let mut order: Vec<usize> = (0..count).collect();
            let mut rng = Rng::new(derive_seed(
                corpus_seed,
                split_tag(split, family) ^ 0xf1a6,
            ));
            rng.shuffle(&mut order);
            for &slot in order.iter().take(n_corrupt) {
                corrupt_flags[slot] = true;
            }
            for (i, &corrupt) in corrupt_flags.iter().enumerate() {
                records.push(rm_record(
                    corpus_seed,
                    split,
                    family,
                    i,
                    corrupt,
                    spec.max_tokens,
                ));
            }
        }
        records
    };

    let write = |name: &str, records: &[CorpusRecord]| -> Result<std::path::PathBuf, TaskError> {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(std::fs::File::create(&path)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(path)
    };

    let sft_train = write("sft_train.jsonl", &clean_split("sft_train", spec.sft_train))?;
    let sft_val = write("sft_val.jsonl", &clean_split("sft_val", spec.sft_val))?;
    let rm_train = write("rm_train.jsonl", &rm_split("rm_train", spec.rm_train))?;
    let rm_val = write("rm_val.jsonl", &rm_split("rm_val", spec.rm_val))?;

    let eval_all = clean_split("eval", spec.eval);
    let (eval_s, eval_c): (Vec<_>, Vec<_>) = eval_all
        .into_iter()
        .partition(|r| r.family == Family::Simple);
    let eval_simple = write("eval_simple.jsonl", &eval_s)?;
    let eval_complex = write("eval_complex.jsonl", &eval_c)?;

    Ok(CorpusFiles {
        sft_train,
        sft_val,
        rm_train,
        rm_val,
        eval_simple,
        eval_complex,
    })
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, TaskError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        // sequence-label consistency is an invariant of every corpus file
        let has_misstep = rec.step_labels.iter().any(|&l| !l);
        if rec.answer_correct == has_misstep {
            return Err(TaskError::MalformedRecord(format!(
                "answer_correct={} inconsistent with step labels {:?}",
                rec.answer_correct, rec.step_labels
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(seed_value: i64, ops: &[(Operator, i64)]) -> Problem {
        Problem {
            family: Family::Simple,
            seed_value,
            operations: ops.to_vec(),
            prompt_text: render_prompt(seed_value, ops),
        }
    }

    #[test]
    fn vocabulary_is_bijective_and_small() {
        assert!(Vocabulary::size() <= 24);
        for id in 3..Vocabulary::size() {
            let c = Vocabulary::decode_id(id).unwrap();
            assert_eq!(Vocabulary::encode_char(c).unwrap(), id);
        }
        assert!(Vocabulary::encode_char('q').is_err());
    }

    #[test]
    fn simple_family_invariants() {
        for seed in 0..200 {
            let p = generate_problem(Family::Simple, seed);
            assert!((2..=4).contains(&p.operations.len()));
            assert!((1..=20).contains(&p.seed_value));
            for &(op, operand) in &p.operations {
                assert!((1..=9).contains(&operand));
                assert!(op != Operator::Mod);
            }
        }
    }

    #[test]
    fn complex_family_invariants() {
        for seed in 0..200 {
            let p = generate_problem(Family::Complex, seed);
            assert!((4..=8).contains(&p.operations.len()));
            assert!((1..=99).contains(&p.seed_value));
            assert!(p.operations.iter().any(|&(op, _)| op == Operator::Mod));
            for &(_, operand) in &p.operations {
                assert!((1..=99).contains(&operand));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_problem(Family::Complex, 12345);
        let b = generate_problem(Family::Complex, 12345);
        assert_eq!(a, b);
    }

    #[test]
    fn solve_reference_hand_checked() {
        let p = problem(7, &[(Operator::Add, 5), (Operator::Mul, 2)]);
        let s = solve_reference(&p);
        assert_eq!(
            s.steps,
            vec![
                Step { lhs: 7, op: Operator::Add, operand: 5, result: 12 },
                Step { lhs: 12, op: Operator::Mul, operand: 2, result: 24 },
            ]
        );
        assert_eq!(s.final_answer, 24);
        assert!(s.answer_correct);

        let p = problem(5, &[(Operator::Mod, 3)]);
        let s = solve_reference(&p);
        assert_eq!(
            s.steps,
            vec![Step { lhs: 5, op: Operator::Mod, operand: 3, result: 2 }]
        );
        assert_eq!(s.final_answer, 2);
    }

    #[test]
    fn oracle_solutions_label_all_true() {
        for seed in 0..500 {
            for family in [Family::Simple, Family::Complex] {
                let p = generate_problem(family, seed);
                let s = solve_reference(&p);
                let labels = label_steps(&p, &s).unwrap();
                assert!(labels.iter().all(|&l| l), "seed {seed} family {family}");
            }
        }
    }

    #[test]
    fn corrupt_first_step_hand_recomputed() {
        let p = problem(7, &[(Operator::Add, 5), (Operator::Mul, 2)]);
        let s = solve_reference(&p);
        let c = corrupt_with_offset(&s, 0, 1).unwrap();
        assert_eq!(
            c.steps,
            vec![
                Step { lhs: 7, op: Operator::Add, operand: 5, result: 13 },
                Step { lhs: 13, op: Operator::Mul, operand: 2, result: 26 },
            ]
        );
        assert_eq!(c.step_labels, vec![false, true]);
        assert_eq!(c.final_answer, 26);
        assert!(!c.answer_correct);
        // re-derive labels independently
        assert_eq!(label_steps(&p, &c).unwrap(), vec![false, true]);
    }

    #[test]
    fn corrupt_last_step_only_flips_final() {
        let p = problem(9, &[(Operator::Sub, 4), (Operator::Mul, 3)]);
        let s = solve_reference(&p);
        let c = corrupt_solution(&s, 1, 77).unwrap();
        assert_eq!(c.step_labels, vec![true, false]);
        assert_eq!(c.step_labels.len(), s.step_labels.len());
        assert_ne!(c.final_answer, s.final_answer);
        assert!(!c.answer_correct);
    }

    #[test]
    fn corrupt_rejects_bad_index() {
        let p = problem(3, &[(Operator::Add, 1)]);
        let s = solve_reference(&p);
        assert!(matches!(
            corrupt_solution(&s, 5, 1),
            Err(TaskError::StepIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn exactly_one_false_label_after_corruption() {
        for seed in 0..300 {
            let family = if seed % 2 == 0 { Family::Simple } else { Family::Complex };
            let p = generate_problem(family, seed);
            let s = solve_reference(&p);
            let mut rng = Rng::new(seed);
            let idx = rng.index(s.steps.len());
            let c = corrupt_solution(&s, idx, seed ^ 0xabc).unwrap();
            let labels = label_steps(&p, &c).unwrap();
            assert_eq!(labels.iter().filter(|&&l| !l).count(), 1);
            assert_eq!(labels, c.step_labels);
            assert!(!c.answer_correct);
        }
    }

    #[test]
    fn label_steps_rejects_count_mismatch() {
        let p = problem(3, &[(Operator::Add, 1), (Operator::Add, 2)]);
        let mut s = solve_reference(&p);
        s.steps.pop();
        assert!(matches!(
            label_steps(&p, &s),
            Err(TaskError::StepCountMismatch { .. })
        ));
    }

    #[test]
    fn wrong_result_with_correct_lhs_is_false() {
        let p = problem(7, &[(Operator::Add, 5)]);
        let mut s = solve_reference(&p);
        s.steps[0].result = 99;
        let labels = label_steps(&p, &s).unwrap();
        assert_eq!(labels, vec![false]);
    }

    #[test]
    fn encode_decode_round_trip() {
        for seed in 0..100 {
            for family in [Family::Simple, Family::Complex] {
                let p = generate_problem(family, seed);
                let s = solve_reference(&p);
                let seq = encode(&p, &s).unwrap();
                let text = decode(&seq);
                assert_eq!(text, format!("{}{}", p.prompt_text, s.text()));
            }
        }
    }

    #[test]
    fn step_ends_count_and_positions() {
        let p = problem(7, &[(Operator::Add, 5), (Operator::Mul, 2)]);
        let s = solve_reference(&p);
        let seq = encode(&p, &s).unwrap();
        // two ';' plus the answer terminator
        assert_eq!(seq.step_ends.len(), 3);
        assert_eq!(*seq.step_ends.last().unwrap(), seq.terminal);
        for &i in &seq.step_ends[..2] {
            assert_eq!(seq.tokens[i], SEMI);
        }
        // strictly increasing, bounded by terminal
        for w in seq.step_ends.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(*seq.step_ends.last().unwrap() <= seq.terminal);
    }

    #[test]
    fn prompt_only_has_empty_step_set() {
        let p = problem(7, &[(Operator::Add, 5)]);
        let seq = encode_prompt_only(&p).unwrap();
        assert!(seq.step_ends.is_empty());
        assert_eq!(seq.terminal, seq.tokens.len() - 1);
        assert_eq!(seq.tokens[seq.terminal], EOS);
    }

    #[test]
    fn detect_step_ends_matches_encode() {
        let p = generate_problem(Family::Complex, 5);
        let s = solve_reference(&p);
        let seq = encode(&p, &s).unwrap();
        let detected = detect_step_ends(&seq.tokens, seq.prompt_len);
        assert_eq!(detected, seq.step_ends);
    }

    #[test]
    fn detect_step_ends_empty_for_degenerate() {
        // no ';' and no '#' in the continuation
        let toks = prompt_tokens("1 + 1 ?").unwrap();
        let mut full = toks.clone();
        full.extend(Vocabulary::encode_text("12345").unwrap());
        full.push(EOS);
        assert!(detect_step_ends(&full, toks.len()).is_empty());
    }

    #[test]
    fn parse_generation_round_trip() {
        let p = problem(7, &[(Operator::Add, 5), (Operator::Mul, 2)]);
        let s = solve_reference(&p);
        let toks = Vocabulary::encode_text(&s.text()).unwrap();
        let parsed = parse_generation(&toks, true);
        assert!(parsed.well_formed);
        assert_eq!(parsed.steps, s.steps);
        assert_eq!(parsed.final_answer, Some(24));
        // negative numbers parse too
        let toks = Vocabulary::encode_text("1-5=-4;-4*2=-8;#-8").unwrap();
        let parsed = parse_generation(&toks, true);
        assert!(parsed.well_formed);
        assert_eq!(parsed.final_answer, Some(-8));
        assert_eq!(parsed.steps[1].lhs, -4);
    }

    #[test]
    fn parse_generation_malformed() {
        let toks = Vocabulary::encode_text("7+5=12;garbage").unwrap_or_else(|_| {
            // 'g' is unencodable; emulate garbage with digits missing structure
            Vocabulary::encode_text("7+5=12;999").unwrap()
        });
        let parsed = parse_generation(&toks, true);
        assert!(!parsed.well_formed);
        assert_eq!(parsed.steps.len(), 1);
        assert_eq!(parsed.final_answer, None);
    }

    #[test]
    fn corpus_build_is_deterministic_and_stratified() {
        let dir = std::env::temp_dir().join("steprl_task_corpus_test");
        std::fs::remove_dir_all(&dir).ok();
        let spec = CorpusSpec {
            sft_train: FamilyCounts { simple: 10, complex: 5 },
            sft_val: FamilyCounts { simple: 4, complex: 2 },
            rm_train: FamilyCounts { simple: 20, complex: 10 },
            rm_val: FamilyCounts { simple: 6, complex: 4 },
            eval: FamilyCounts { simple: 5, complex: 5 },
            corruption_fraction: 0.5,
            max_tokens: 152,
        };
        let files = build_corpus(&spec, 99, &dir.join("a")).unwrap();
        let rm = load_corpus(&files.rm_train).unwrap();
        assert_eq!(rm.len(), 30);
        let n_corrupt = rm.iter().filter(|r| !r.answer_correct).count();
        assert_eq!(n_corrupt, 15, "stratified corruption must be exact");
        // per family too
        let simple_corrupt = rm
            .iter()
            .filter(|r| r.family == Family::Simple && !r.answer_correct)
            .count();
        assert_eq!(simple_corrupt, 10);

        build_corpus(&spec, 99, &dir.join("b")).unwrap();
        let a = std::fs::read(dir.join("a/rm_train.jsonl")).unwrap();
        let b = std::fs::read(dir.join("b/rm_train.jsonl")).unwrap();
        assert_eq!(a, b, "same spec+seed must produce identical bytes");

        // train/eval disjoint by seed
        let train = load_corpus(&files.sft_train).unwrap();
        let eval = load_corpus(&files.eval_simple).unwrap();
        for t in &train {
            for e in &eval {
                assert_ne!(t.seed, e.seed);
            }
        }
        // every record fits the length bound
        for r in rm.iter().chain(&train).chain(&eval) {
            assert!(r.token_seq().unwrap().len() <= spec.max_tokens);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corpus_records_round_trip_token_seq() {
        let p = generate_problem(Family::Complex, 7);
        let s = solve_reference(&p);
        let rec = record(&p, &s, 7);
        let seq_a = rec.token_seq().unwrap();
        let seq_b = encode(&p, &s).unwrap();
        assert_eq!(seq_a, seq_b);
        assert_eq!(seq_a.step_ends.len(), s.steps.len() + 1);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// decode(encode(x)) = x and |S| = steps + 1, clean or corrupted.
            #[test]
            fn encode_round_trip_holds(seed in 0u64..50_000, corrupt_at in 0usize..8, simple in any::<bool>()) {
                let family = if simple { Family::Simple } else { Family::Complex };
                let p = generate_problem(family, seed);
                let clean = solve_reference(&p);
                let sol = if corrupt_at < clean.steps.len() {
                    corrupt_solution(&clean, corrupt_at, seed ^ 0x55).unwrap()
                } else {
                    clean
                };
                let seq = encode(&p, &sol).unwrap();
                prop_assert_eq!(decode(&seq), format!("{}{}", p.prompt_text, sol.text()));
                prop_assert_eq!(seq.step_ends.len(), sol.steps.len() + 1);
                prop_assert!(seq.step_ends.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(*seq.step_ends.last().unwrap(), seq.terminal);
            }

            /// A corrupted solution has exactly one false step label and a
            /// wrong final answer.
            #[test]
            fn corruption_flips_exactly_one_step(seed in 0u64..50_000, pick in any::<u64>()) {
                let family = if seed % 2 == 0 { Family::Simple } else { Family::Complex };
                let p = generate_problem(family, seed);
                let clean = solve_reference(&p);
                let idx = (pick % clean.steps.len() as u64) as usize;
                let bad = corrupt_solution(&clean, idx, seed).unwrap();
                let labels = label_steps(&p, &bad).unwrap();
                prop_assert_eq!(labels.iter().filter(|&&l| !l).count(), 1);
                prop_assert!(!labels[idx]);
                prop_assert!(!bad.answer_correct);
                if family == Family::Simple {
                    // without mod, a propagated nonzero error never collapses
                    prop_assert!(bad.final_answer != clean.final_answer);
                }
            }
        }
    }
}

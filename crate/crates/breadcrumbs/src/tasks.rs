//! Task generators, prompt renderers, answer parsers, and reward verifiers
//! for the three synthetic reasoning tasks: Countdown (combine numbers to a
//! target), LinSys (integer linear systems), and StarGraph (path tracing).
//!
//! Generators are pure functions of (config, seed).  Scoring is total: any
//! byte string maps to one of three reward levels, never an error.

use crate::error::Error;
use crate::Result;
use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

pub const ANSWER_OPEN_TAG: &str = "<answer>";
pub const ANSWER_CLOSE_TAG: &str = "</answer>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Countdown,
    Linsys,
    Stargraph,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Countdown => "countdown",
            TaskKind::Linsys => "linsys",
            TaskKind::Stargraph => "stargraph",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Verbose prompts follow the reference wording; compact prompts carry the
/// same payload in fewer tokens for small-model training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Full,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskPayload {
    Countdown {
        numbers: Vec<i64>,
        target: i64,
    },
    Linsys {
        coeffs: Vec<Vec<i64>>,
        rhs: Vec<i64>,
        solution: Vec<i64>,
    },
    Stargraph {
        edges: Vec<(u32, u32)>,
        center: u32,
        target: u32,
    },
}

impl TaskPayload {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskPayload::Countdown { .. } => TaskKind::Countdown,
            TaskPayload::Linsys { .. } => TaskKind::Linsys,
            TaskPayload::Stargraph { .. } => TaskKind::Stargraph,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt_text: String,
    pub payload: TaskPayload,
    pub seed: u64,
}

/// The three reward levels; generation failures of any sort land on the
/// lowest tier rather than erroring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardLevel {
    WrongOrAbsent,
    FormatOkValueWrong,
    Correct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub wrong_or_absent: f32,
    pub format_ok_value_wrong: f32,
    pub correct: f32,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { wrong_or_absent: 0.0, format_ok_value_wrong: 0.1, correct: 1.0 }
    }
}

impl RewardSpec {
    pub fn value(&self, level: RewardLevel) -> f32 {
        match level {
            RewardLevel::WrongOrAbsent => self.wrong_or_absent,
            RewardLevel::FormatOkValueWrong => self.format_ok_value_wrong,
            RewardLevel::Correct => self.correct,
        }
    }
}

impl RewardLevel {
    pub fn value(self) -> f32 {
        RewardSpec::default().value(self)
    }
}

// ---------------------------------------------------------------------------
// configs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountdownConfig {
    pub num_count: (usize, usize),
    pub number_range: (i64, i64),
    pub target_range: (i64, i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinsysConfig {
    pub n_vars: usize,
    pub max_abs_coef: i64,
    /// cap on non-zero coefficients per equation; None = unrestricted
    pub max_nonzero_per_eq: Option<usize>,
    pub solution_range: (i64, i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StargraphConfig {
    pub branch_len: usize,
    pub branch_count: (usize, usize),
    pub label_range: (u32, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KindConfig {
    Countdown(CountdownConfig),
    Linsys(LinsysConfig),
    Stargraph(StargraphConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub style: PromptStyle,
    #[serde(flatten)]
    pub kind: KindConfig,
}

impl TaskConfig {
    pub fn task_kind(&self) -> TaskKind {
        match &self.kind {
            KindConfig::Countdown(_) => TaskKind::Countdown,
            KindConfig::Linsys(_) => TaskKind::Linsys,
            KindConfig::Stargraph(_) => TaskKind::Stargraph,
        }
    }

    /// Desk-scale presets: small payloads, compact prompts.
    pub fn toy(kind: TaskKind) -> Self {
        let kind = match kind {
            TaskKind::Countdown => KindConfig::Countdown(CountdownConfig {
                num_count: (3, 3),
                number_range: (1, 9),
                target_range: (1, 20),
            }),
            TaskKind::Linsys => KindConfig::Linsys(LinsysConfig {
                n_vars: 2,
                max_abs_coef: 5,
                max_nonzero_per_eq: None,
                solution_range: (-9, 9),
            }),
            TaskKind::Stargraph => KindConfig::Stargraph(StargraphConfig {
                branch_len: 2,
                branch_count: (2, 4),
                label_range: (10, 99),
            }),
        };
        Self { style: PromptStyle::Toy, kind }
    }

    /// Reference-scale presets (LinSys uses the sparse 4x4 configuration).
    pub fn full(kind: TaskKind) -> Self {
        let kind = match kind {
            TaskKind::Countdown => KindConfig::Countdown(CountdownConfig {
                num_count: (3, 4),
                number_range: (1, 25),
                target_range: (1, 100),
            }),
            TaskKind::Linsys => KindConfig::Linsys(LinsysConfig {
                n_vars: 4,
                max_abs_coef: 20,
                max_nonzero_per_eq: Some(2),
                solution_range: (-9, 9),
            }),
            TaskKind::Stargraph => KindConfig::Stargraph(StargraphConfig {
                branch_len: 5,
                branch_count: (2, 25),
                label_range: (10, 999),
            }),
        };
        Self { style: PromptStyle::Full, kind }
    }

    /// Dense 3x3 LinSys variant (the harder of the two reference setups).
    pub fn full_linsys_dense() -> Self {
        Self {
            style: PromptStyle::Full,
            kind: KindConfig::Linsys(LinsysConfig {
                n_vars: 3,
                max_abs_coef: 20,
                max_nonzero_per_eq: None,
                solution_range: (-9, 9),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// generation

const MAX_DRAW_ATTEMPTS: usize = 200;

/// Deterministic in (config, seed).  Countdown targets are chosen only from
/// values reachable with at least one arithmetic combination, so every
/// instance is solvable (and non-degenerate) by construction.
pub fn generate(config: &TaskConfig, seed: u64) -> Result<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let payload = match &config.kind {
        KindConfig::Countdown(c) => gen_countdown(c, &mut rng)?,
        KindConfig::Linsys(c) => gen_linsys(c, &mut rng)?,
        KindConfig::Stargraph(c) => gen_stargraph(c, &mut rng)?,
    };
    let prompt_text = render_payload(&payload, config.style);
    Ok(TaskInstance { kind: payload.kind(), prompt_text, payload, seed })
}

fn gen_countdown(c: &CountdownConfig, rng: &mut ChaCha8Rng) -> Result<TaskPayload> {
    if c.num_count.0 < 2 || c.num_count.0 > c.num_count.1 {
        return Err(Error::Config(format!("bad countdown num_count {:?}", c.num_count)));
    }
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let k = rng.gen_range(c.num_count.0..=c.num_count.1);
        let numbers: Vec<i64> =
            (0..k).map(|_| rng.gen_range(c.number_range.0..=c.number_range.1)).collect();
        let reachable =
            countdown_reachable_targets(&numbers, c.target_range.0, c.target_range.1);
        if reachable.is_empty() {
            continue;
        }
        let pick = rng.gen_range(0..reachable.len());
        let target = *reachable.iter().nth(pick).expect("index in range");
        return Ok(TaskPayload::Countdown { numbers, target });
    }
    Err(Error::Task("no solvable countdown instance found in range".into()))
}

fn gen_linsys(c: &LinsysConfig, rng: &mut ChaCha8Rng) -> Result<TaskPayload> {
    let n = c.n_vars;
    if n == 0 || n > 6 {
        return Err(Error::Config(format!("unsupported linsys size {n}")));
    }
    let solution: Vec<i64> =
        (0..n).map(|_| rng.gen_range(c.solution_range.0..=c.solution_range.1)).collect();
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let mut coeffs = vec![vec![0i64; n]; n];
        for row in coeffs.iter_mut() {
            let nonzero = match c.max_nonzero_per_eq {
                Some(cap) => rng.gen_range(1..=cap.min(n)),
                None => n,
            };
            let mut cols: Vec<usize> = (0..n).collect();
            cols.shuffle(rng);
            for &col in cols.iter().take(nonzero) {
                let mut v = 0;
                while v == 0 {
                    v = rng.gen_range(-c.max_abs_coef..=c.max_abs_coef);
                }
                row[col] = v;
            }
        }
        if det_i128(&coeffs) == 0 {
            continue;
        }
        let rhs: Vec<i64> = coeffs
            .iter()
            .map(|row| row.iter().zip(&solution).map(|(&a, &x)| a * x).sum())
            .collect();
        return Ok(TaskPayload::Linsys { coeffs, rhs, solution });
    }
    Err(Error::Task("no invertible coefficient matrix found".into()))
}

fn gen_stargraph(c: &StargraphConfig, rng: &mut ChaCha8Rng) -> Result<TaskPayload> {
    if c.branch_len == 0 {
        return Err(Error::Config("stargraph branch_len must be positive".into()));
    }
    let branches = rng.gen_range(c.branch_count.0..=c.branch_count.1);
    let need = 1 + branches * c.branch_len;
    let span = (c.label_range.1 - c.label_range.0 + 1) as usize;
    if span < need {
        return Err(Error::Config(format!(
            "label range {:?} too small for {need} nodes",
            c.label_range
        )));
    }
    let mut labels: Vec<u32> = Vec::with_capacity(need);
    let mut seen = HashSet::new();
    while labels.len() < need {
        let l = rng.gen_range(c.label_range.0..=c.label_range.1);
        if seen.insert(l) {
            labels.push(l);
        }
    }
    let center = labels[0];
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(branches * c.branch_len);
    let mut leaves = Vec::with_capacity(branches);
    for b in 0..branches {
        let mut prev = center;
        for s in 0..c.branch_len {
            let node = labels[1 + b * c.branch_len + s];
            edges.push((prev, node));
            prev = node;
        }
        leaves.push(prev);
    }
    edges.shuffle(rng);
    let target = leaves[rng.gen_range(0..leaves.len())];
    Ok(TaskPayload::Stargraph { edges, center, target })
}

/// Cofactor-expansion determinant; inputs are small so i128 never overflows.
fn det_i128(a: &[Vec<i64>]) -> i128 {
    fn go(a: &[Vec<i128>]) -> i128 {
        let n = a.len();
        if n == 1 {
            return a[0][0];
        }
        let mut det = 0i128;
        for (j, &lead) in a[0].iter().enumerate() {
            if lead == 0 {
                continue;
            }
            let minor: Vec<Vec<i128>> = a[1..]
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(k, _)| *k != j)
                        .map(|(_, &v)| v)
                        .collect()
                })
                .collect();
            let sign = if j % 2 == 0 { 1 } else { -1 };
            det += sign * lead * go(&minor);
        }
        det
    }
    let wide: Vec<Vec<i128>> =
        a.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    go(&wide)
}

// ---------------------------------------------------------------------------
// countdown search oracle

type Rat = Ratio<i128>;

fn combine(a: Rat, b: Rat, op: u8) -> Option<Rat> {
    match op {
        0 => a.checked_add(&b),
        1 => a.checked_sub(&b),
        2 => a.checked_mul(&b),
        _ => a.checked_div(&b), // None on zero divisor
    }
}

/// Every integer value in [lo, hi] reachable from `numbers` using +, -, *, /
/// with each number used at most once and at least one combination applied.
pub fn countdown_reachable_targets(numbers: &[i64], lo: i64, hi: i64) -> BTreeSet<i64> {
    fn go(state: &[Rat], lo: i128, hi: i128, out: &mut BTreeSet<i64>) {
        for i in 0..state.len() {
            for j in 0..state.len() {
                if i == j {
                    continue;
                }
                for op in 0..4u8 {
                    // + and * are commutative; visit one order
                    if (op == 0 || op == 2) && i > j {
                        continue;
                    }
                    let Some(v) = combine(state[i], state[j], op) else { continue };
                    if v.is_integer() {
                        let n = v.to_integer();
                        if n >= lo && n <= hi {
                            out.insert(n as i64);
                        }
                    }
                    if state.len() > 2 {
                        let mut rest: Vec<Rat> = Vec::with_capacity(state.len() - 1);
                        for (k, &s) in state.iter().enumerate() {
                            if k != i && k != j {
                                rest.push(s);
                            }
                        }
                        rest.push(v);
                        go(&rest, lo, hi, out);
                    }
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    let state: Vec<Rat> = numbers.iter().map(|&n| Rat::from_integer(n as i128)).collect();
    if state.len() >= 2 {
        go(&state, lo as i128, hi as i128, &mut out);
    }
    out
}

/// Exhaustive search for one expression hitting `target` exactly (subsets
/// allowed, each number at most once).  Returns a fully parenthesized
/// expression, e.g. "((25 - 10) * 7)".
pub fn countdown_solve(numbers: &[i64], target: i64) -> Option<String> {
    fn go(state: &[(Rat, String)], t: Rat) -> Option<String> {
        for (v, e) in state {
            if *v == t {
                return Some(e.clone());
            }
        }
        if state.len() < 2 {
            return None;
        }
        for i in 0..state.len() {
            for j in 0..state.len() {
                if i == j {
                    continue;
                }
                for op in 0..4u8 {
                    if (op == 0 || op == 2) && i > j {
                        continue;
                    }
                    let Some(v) = combine(state[i].0, state[j].0, op) else { continue };
                    let sym = ["+", "-", "*", "/"][op as usize];
                    let expr = format!("({} {} {})", state[i].1, sym, state[j].1);
                    let mut rest: Vec<(Rat, String)> = Vec::with_capacity(state.len() - 1);
                    for (k, s) in state.iter().enumerate() {
                        if k != i && k != j {
                            rest.push(s.clone());
                        }
                    }
                    rest.push((v, expr));
                    if let Some(hit) = go(&rest, t) {
                        return Some(hit);
                    }
                }
            }
        }
        None
    }
    let state: Vec<(Rat, String)> = numbers
        .iter()
        .map(|&n| (Rat::from_integer(n as i128), n.to_string()))
        .collect();
    go(&state, Rat::from_integer(target as i128))
}

// ---------------------------------------------------------------------------
// prompt rendering

pub fn render_prompt(instance: &TaskInstance, style: PromptStyle) -> String {
    render_payload(&instance.payload, style)
}

pub fn render_payload(payload: &TaskPayload, style: PromptStyle) -> String {
    match payload {
        TaskPayload::Countdown { numbers, target } => {
            let nums = join_i64(numbers);
            match style {
                PromptStyle::Full => format!(
                    "Using the numbers {nums}, create an equation that equals {target}. \
                     You can use basic arithmetic operations (+, -, *, /) and each number \
                     can only be used once. Make sure to solve it by thinking step by step. \
                     Return the final answer in <answer> </answer> tags, for example \
                     <answer> (1 + 2) / 3 </answer>."
                ),
                PromptStyle::Toy => format!(
                    "Using the numbers {nums}, create an equation that equals {target}. \
                     Return the final answer in <answer> </answer> tags, for example \
                     <answer> (1 + 2) / 3 </answer>."
                ),
            }
        }
        TaskPayload::Linsys { coeffs, rhs, .. } => {
            let n = coeffs.len();
            let eqs: Vec<String> = coeffs
                .iter()
                .zip(rhs)
                .map(|(row, &b)| format!("{} = {}", render_lhs(row), b))
                .collect();
            let example = join_i64(&[1, -2, 3, 7][..n.min(4)]);
            match style {
                PromptStyle::Full => format!(
                    "Solve the following system of linear equations:\n{}\nFind the values \
                     for x1, x2, ..., x{n}. Make sure to solve it by thinking step by step, \
                     and do not assume access to any external tools.\nReturn the final \
                     answer as a list of numbers in <answer> </answer> tags, for example \
                     <answer>[{example}]</answer>.",
                    eqs.join("\n")
                ),
                PromptStyle::Toy => format!(
                    "Solve the following system of equations: {}. Return the solution as \
                     a list, for example <answer>[{example}]</answer>.",
                    eqs.join("; ")
                ),
            }
        }
        TaskPayload::Stargraph { edges, center, target } => match style {
            PromptStyle::Full => {
                let mut nodes: Vec<u32> = vec![*center];
                for &(u, v) in edges {
                    for n in [u, v] {
                        if !nodes.contains(&n) {
                            nodes.push(n);
                        }
                    }
                }
                let node_list =
                    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ");
                let edge_lines = edges
                    .iter()
                    .map(|(u, v)| format!("{u} -> {v}"))
                    .collect::<Vec<_>>()
                    .join("\n");
                format!(
                    "You are given a star graph with the following nodes: {node_list}.\n\n\
                     The graph has the following directed edges:\n{edge_lines}\n\n\
                     Find the path from the center node {center} to the target node \
                     {target}.\n\nThink step by step about the graph structure and trace \
                     the path from the center node to the target node.\nReturn your answer \
                     as a list of nodes representing the path from center to target.\n\
                     Return the final answer in <answer> </answer> tags, for example \
                     <answer>[1, 3, 7, 12]</answer>."
                )
            }
            PromptStyle::Toy => {
                let edge_list = edges
                    .iter()
                    .map(|(u, v)| format!("{u} -> {v}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!(
                    "Find the path from {center} to {target} in the star graph with edges \
                     {edge_list}. Return the final answer in <answer> </answer> tags, for \
                     example <answer>[1, 3, 7, 12]</answer>."
                )
            }
        },
    }
}

fn join_i64(xs: &[i64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// "2*x1 - x2 + 3*x3" style; unit coefficients drop the multiplier, zero
/// coefficients are omitted entirely.
fn render_lhs(row: &[i64]) -> String {
    let mut s = String::new();
    for (j, &c) in row.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let var = format!("x{}", j + 1);
        let mag = c.abs();
        let term = if mag == 1 { var } else { format!("{mag}*{var}") };
        if s.is_empty() {
            if c < 0 {
                s.push('-');
            }
            s.push_str(&term);
        } else {
            s.push_str(if c < 0 { " - " } else { " + " });
            s.push_str(&term);
        }
    }
    s
}

// ---------------------------------------------------------------------------
// prompt parsing (round-trip check and dataset tooling)

/// Recover the payload from a rendered prompt of either style.  LinSys
/// solutions are re-derived by exact rational elimination, so the result is
/// the complete payload.
pub fn parse_prompt(text: &str) -> Result<TaskPayload> {
    let t = text.trim();
    if t.starts_with("Using the numbers") {
        parse_countdown_prompt(t)
    } else if t.starts_with("Solve the following system") {
        parse_linsys_prompt(t)
    } else if t.starts_with("You are given a star graph") || t.starts_with("Find the path from")
    {
        parse_stargraph_prompt(t)
    } else {
        Err(Error::Task("unrecognized prompt shape".into()))
    }
}

fn slice_between<'a>(text: &'a str, start: &str, end: &str) -> Result<&'a str> {
    let s = text
        .find(start)
        .ok_or_else(|| Error::Task(format!("prompt missing '{start}'")))?
        + start.len();
    let e = text[s..]
        .find(end)
        .ok_or_else(|| Error::Task(format!("prompt missing '{end}'")))?;
    Ok(&text[s..s + e])
}

fn parse_countdown_prompt(t: &str) -> Result<TaskPayload> {
    let nums = slice_between(t, "Using the numbers ", ", create an equation that equals ")?;
    let numbers = parse_int_list::<i64>(nums, ", ")?;
    let rest = slice_between(t, ", create an equation that equals ", ".")?;
    let target: i64 =
        rest.trim().parse().map_err(|_| Error::Task(format!("bad target '{rest}'")))?;
    Ok(TaskPayload::Countdown { numbers, target })
}

fn parse_linsys_prompt(t: &str) -> Result<TaskPayload> {
    let (block, sep) = if t.starts_with("Solve the following system of linear equations:") {
        (slice_between(t, "equations:\n", "\nFind the values")?, "\n")
    } else {
        (slice_between(t, "equations: ", ". Return the solution")?, "; ")
    };
    let eqs: Vec<&str> = block.split(sep).filter(|s| !s.trim().is_empty()).collect();
    let n = eqs.len();
    let mut coeffs = vec![vec![0i64; n]; n];
    let mut rhs = vec![0i64; n];
    for (i, eq) in eqs.iter().enumerate() {
        let (lhs, r) = eq
            .split_once(" = ")
            .ok_or_else(|| Error::Task(format!("equation without '=': '{eq}'")))?;
        rhs[i] = r.trim().parse().map_err(|_| Error::Task(format!("bad rhs '{r}'")))?;
        parse_lhs(lhs.trim(), &mut coeffs[i])?;
    }
    let solution = solve_linear(&coeffs, &rhs)?;
    Ok(TaskPayload::Linsys { coeffs, rhs, solution })
}

fn parse_lhs(lhs: &str, row: &mut [i64]) -> Result<()> {
    // split "2*x1 - x2 + 3*x3" into signed terms
    let mut terms: Vec<(i64, &str)> = Vec::new();
    let mut rest = lhs;
    let mut sign = 1i64;
    loop {
        let plus = rest.find(" + ");
        let minus = rest.find(" - ");
        let (cut, next_sign) = match (plus, minus) {
            (Some(p), Some(m)) if p < m => (p, 1),
            (Some(p), None) => (p, 1),
            (_, Some(m)) => (m, -1),
            (None, None) => {
                terms.push((sign, rest));
                break;
            }
        };
        terms.push((sign, &rest[..cut]));
        sign = next_sign;
        rest = &rest[cut + 3..];
    }
    for (mut sign, term) in terms {
        let mut term = term.trim();
        if let Some(stripped) = term.strip_prefix('-') {
            sign = -sign;
            term = stripped;
        }
        let (coef, var) = match term.split_once('*') {
            Some((c, v)) => (
                c.trim().parse::<i64>().map_err(|_| {
                    Error::Task(format!("bad coefficient '{c}'"))
                })?,
                v.trim(),
            ),
            None => (1, term),
        };
        let idx: usize = var
            .strip_prefix('x')
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Task(format!("bad variable '{var}'")))?;
        if idx == 0 || idx > row.len() {
            return Err(Error::Task(format!("variable x{idx} out of range")));
        }
        row[idx - 1] += sign * coef;
    }
    Ok(())
}

/// Exact Gaussian elimination over rationals; errors on singular systems or
/// non-integer solutions.
pub fn solve_linear(coeffs: &[Vec<i64>], rhs: &[i64]) -> Result<Vec<i64>> {
    let n = coeffs.len();
    if n == 0 || rhs.len() != n || coeffs.iter().any(|r| r.len() != n) {
        return Err(Error::Task("malformed linear system".into()));
    }
    let mut m: Vec<Vec<Rat>> = coeffs
        .iter()
        .zip(rhs)
        .map(|(row, &b)| {
            row.iter()
                .map(|&a| Rat::from_integer(a as i128))
                .chain(std::iter::once(Rat::from_integer(b as i128)))
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| m[r][col] != Rat::from_integer(0))
            .ok_or_else(|| Error::Task("singular system".into()))?;
        m.swap(col, pivot);
        let p = m[col][col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r][col] / p;
            if f != Rat::from_integer(0) {
                for k in col..=n {
                    let sub = f * m[col][k];
                    m[r][k] -= sub;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for (r, row) in m.iter().enumerate() {
        let v = row[n] / row[r];
        if !v.is_integer() {
            return Err(Error::Task("non-integer solution".into()));
        }
        out.push(v.to_integer() as i64);
    }
    Ok(out)
}

fn parse_stargraph_prompt(t: &str) -> Result<TaskPayload> {
    let (center, target, edge_block, edge_sep) = if t.starts_with("You are given") {
        let c = slice_between(t, "from the center node ", " to the target node ")?;
        let g = slice_between(t, " to the target node ", ".")?;
        let e = slice_between(t, "directed edges:\n", "\n\nFind the path")?;
        (c, g, e, "\n")
    } else {
        let c = slice_between(t, "Find the path from ", " to ")?;
        let g = slice_between(t, " to ", " in the star graph with edges ")?;
        let e = slice_between(t, " in the star graph with edges ", ". Return")?;
        (c, g, e, ", ")
    };
    let parse_node = |s: &str| -> Result<u32> {
        s.trim().parse().map_err(|_| Error::Task(format!("bad node '{s}'")))
    };
    let mut edges = Vec::new();
    for part in edge_block.split(edge_sep).filter(|s| !s.trim().is_empty()) {
        let (u, v) = part
            .split_once(" -> ")
            .ok_or_else(|| Error::Task(format!("bad edge '{part}'")))?;
        edges.push((parse_node(u)?, parse_node(v)?));
    }
    Ok(TaskPayload::Stargraph {
        edges,
        center: parse_node(center)?,
        target: parse_node(target)?,
    })
}

/// The unique center→target node sequence of a star graph payload.
pub fn stargraph_path(edges: &[(u32, u32)], center: u32, target: u32) -> Result<Vec<u32>> {
    let mut next: std::collections::HashMap<u32, Vec<u32>> = std::collections::HashMap::new();
    for &(u, v) in edges {
        next.entry(u).or_default().push(v);
    }
    // depth-first walk; branches are chains so this is linear work
    fn dfs(
        node: u32,
        target: u32,
        next: &std::collections::HashMap<u32, Vec<u32>>,
        path: &mut Vec<u32>,
    ) -> bool {
        path.push(node);
        if node == target {
            return true;
        }
        if let Some(succ) = next.get(&node) {
            for &s in succ {
                if dfs(s, target, next, path) {
                    return true;
                }
            }
        }
        path.pop();
        false
    }
    let mut path = Vec::new();
    if dfs(center, target, &next, &mut path) {
        Ok(path)
    } else {
        Err(Error::Task("target not reachable from center".into()))
    }
}

/// A wrapped answer with the right *shape* but random content drawn from the
/// instance's own symbol pool.  Used for format warmup, where the model should
/// learn the answer-tag protocol without being told correct values.
pub fn random_format_answer(payload: &TaskPayload, rng: &mut ChaCha8Rng) -> String {
    let body = match payload {
        TaskPayload::Countdown { numbers, .. } => {
            let ops = ['+', '-', '*', '/'];
            let mut pool = numbers.clone();
            pool.shuffle(rng);
            let a = pool[0];
            let b = pool[1 % pool.len()];
            if pool.len() >= 3 && rng.gen_bool(0.5) {
                let c = pool[2];
                format!(
                    "({a} {} {b}) {} {c}",
                    ops[rng.gen_range(0..4)],
                    ops[rng.gen_range(0..4)]
                )
            } else {
                format!("{a} {} {b}", ops[rng.gen_range(0..4)])
            }
        }
        TaskPayload::Linsys { solution, .. } => {
            let vals: Vec<i64> =
                (0..solution.len()).map(|_| rng.gen_range(-9..=9)).collect();
            format!("[{}]", join_i64(&vals))
        }
        TaskPayload::Stargraph { edges, center, target } => {
            let len = stargraph_path(edges, *center, *target)
                .map(|p| p.len())
                .unwrap_or(3);
            let mut nodes: Vec<u32> = vec![*center];
            for &(u, v) in edges {
                for n in [u, v] {
                    if !nodes.contains(&n) {
                        nodes.push(n);
                    }
                }
            }
            let picks: Vec<String> = (0..len)
                .map(|_| nodes[rng.gen_range(0..nodes.len())].to_string())
                .collect();
            format!("[{}]", picks.join(", "))
        }
    };
    format!("{ANSWER_OPEN_TAG} {body} {ANSWER_CLOSE_TAG}")
}

// ---------------------------------------------------------------------------
// scoring

/// Last well-formed answer span (greedy left-to-right pairing; an unmatched
/// opening tag restarts the span, a trailing unclosed tag is ignored).
pub fn extract_last_answer(text: &str) -> Option<&str> {
    last_answer_bounds(text).map(|(s, c)| &text[s..c])
}

/// Byte offset just past the closing tag of the last well-formed answer.
/// Budget accounting keys off this: the answer exists once that byte exists.
pub fn last_answer_close_end(text: &str) -> Option<usize> {
    last_answer_bounds(text).map(|(_, c)| c + ANSWER_CLOSE_TAG.len())
}

fn last_answer_bounds(text: &str) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut open: Option<usize> = None;
    let mut pos = 0;
    while pos < text.len() {
        let next_open = text[pos..].find(ANSWER_OPEN_TAG).map(|i| pos + i);
        let next_close = text[pos..].find(ANSWER_CLOSE_TAG).map(|i| pos + i);
        match (next_open, next_close) {
            (Some(o), Some(c)) if o < c => {
                open = Some(o + ANSWER_OPEN_TAG.len());
                pos = o + ANSWER_OPEN_TAG.len();
            }
            (_, Some(c)) => {
                if let Some(s) = open.take() {
                    best = Some((s, c));
                }
                pos = c + ANSWER_CLOSE_TAG.len();
            }
            (Some(o), None) => {
                open = Some(o + ANSWER_OPEN_TAG.len());
                pos = o + ANSWER_OPEN_TAG.len();
            }
            (None, None) => break,
        }
    }
    best
}

/// Total scorer: maps any output text to a reward level, never errors.
pub fn score(instance: &TaskInstance, text: &str) -> RewardLevel {
    let Some(span) = extract_last_answer(text) else {
        return RewardLevel::WrongOrAbsent;
    };
    match &instance.payload {
        TaskPayload::Countdown { numbers, target } => score_countdown(span, numbers, *target),
        TaskPayload::Linsys { solution, .. } => score_int_list(span, |got: &[i64]| {
            got.len() == solution.len() && got == solution.as_slice()
        }),
        TaskPayload::Stargraph { edges, center, target } => score_int_list(span, |got| {
            let edge_set: HashSet<(u32, u32)> = edges.iter().copied().collect();
            let nodes: Option<Vec<u32>> =
                got.iter().map(|&v| u32::try_from(v).ok()).collect();
            let Some(nodes) = nodes else { return false };
            nodes.len() >= 2
                && nodes[0] == *center
                && *nodes.last().expect("non-empty") == *target
                && nodes.windows(2).all(|w| edge_set.contains(&(w[0], w[1])))
        }),
    }
}

pub fn score_value(instance: &TaskInstance, text: &str) -> f32 {
    score(instance, text).value()
}

fn score_int_list(span: &str, correct: impl Fn(&[i64]) -> bool) -> RewardLevel {
    let s = span.trim();
    let Some(inner) = s.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return RewardLevel::WrongOrAbsent;
    };
    let Ok(values) = parse_int_list::<i64>(inner, ",") else {
        return RewardLevel::WrongOrAbsent;
    };
    if correct(&values) {
        RewardLevel::Correct
    } else {
        RewardLevel::FormatOkValueWrong
    }
}

fn parse_int_list<T: std::str::FromStr>(s: &str, sep: &str) -> Result<Vec<T>> {
    s.split(sep)
        .map(|p| {
            p.trim().parse::<T>().map_err(|_| Error::Task(format!("bad integer '{p}'")))
        })
        .collect()
}

fn score_countdown(span: &str, numbers: &[i64], target: i64) -> RewardLevel {
    let Some((value, used)) = eval_countdown_expr(span) else {
        return RewardLevel::WrongOrAbsent;
    };
    let exact = value == Rat::from_integer(target as i128);
    if exact && is_multiset_subset(&used, numbers) {
        RewardLevel::Correct
    } else {
        RewardLevel::FormatOkValueWrong
    }
}

fn is_multiset_subset(used: &[i64], available: &[i64]) -> bool {
    let mut pool: Vec<i64> = available.to_vec();
    for u in used {
        match pool.iter().position(|p| p == u) {
            Some(i) => {
                pool.swap_remove(i);
            }
            None => return false,
        }
    }
    true
}

/// Recursive-descent evaluation of `expr := term (('+'|'-') term)*`,
/// `term := factor (('*'|'/') factor)*`, `factor := INT | '(' expr ')'`.
/// No unary minus.  Division by zero or overflow yields None (score 0.0).
/// Returns the exact rational value and the leaf integers used.
pub fn eval_countdown_expr(s: &str) -> Option<(Rat, Vec<i64>)> {
    struct P<'a> {
        b: &'a [u8],
        i: usize,
        used: Vec<i64>,
    }
    impl P<'_> {
        fn skip_ws(&mut self) {
            while self.i < self.b.len() && (self.b[self.i] as char).is_whitespace() {
                self.i += 1;
            }
        }
        fn peek(&mut self) -> Option<u8> {
            self.skip_ws();
            self.b.get(self.i).copied()
        }
        fn expr(&mut self) -> Option<Rat> {
            let mut v = self.term()?;
            loop {
                match self.peek() {
                    Some(b'+') => {
                        self.i += 1;
                        let r = self.term()?;
                        v = v.checked_add(&r)?;
                    }
                    Some(b'-') => {
                        self.i += 1;
                        let r = self.term()?;
                        v = v.checked_sub(&r)?;
                    }
                    _ => return Some(v),
                }
            }
        }
        fn term(&mut self) -> Option<Rat> {
            let mut v = self.factor()?;
            loop {
                match self.peek() {
                    Some(b'*') => {
                        self.i += 1;
                        let r = self.factor()?;
                        v = v.checked_mul(&r)?;
                    }
                    Some(b'/') => {
                        self.i += 1;
                        let r = self.factor()?;
                        v = v.checked_div(&r)?;
                    }
                    _ => return Some(v),
                }
            }
        }
        fn factor(&mut self) -> Option<Rat> {
            match self.peek()? {
                b'(' => {
                    self.i += 1;
                    let v = self.expr()?;
                    if self.peek()? != b')' {
                        return None;
                    }
                    self.i += 1;
                    Some(v)
                }
                c if c.is_ascii_digit() => {
                    let start = self.i;
                    while self.i < self.b.len() && self.b[self.i].is_ascii_digit() {
                        self.i += 1;
                    }
                    let digits = std::str::from_utf8(&self.b[start..self.i]).ok()?;
                    let n: i64 = digits.parse().ok()?;
                    self.used.push(n);
                    Some(Rat::from_integer(n as i128))
                }
                _ => None,
            }
        }
    }
    let mut p = P { b: s.as_bytes(), i: 0, used: Vec::new() };
    let v = p.expr()?;
    p.skip_ws();
    if p.i != p.b.len() {
        return None; // trailing garbage
    }
    Some((v, p.used))
}

// ---------------------------------------------------------------------------
// dataset files

pub fn write_instances_jsonl(path: &std::path::Path, instances: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_instances_jsonl(path: &std::path::Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Instances with seeds seed_start, seed_start+1, ...; used to build train
/// and test splits from disjoint seed ranges.
pub fn generate_batch(config: &TaskConfig, seed_start: u64, n: usize) -> Result<Vec<TaskInstance>> {
    (0..n).map(|i| generate(config, seed_start + i as u64)).collect()
}

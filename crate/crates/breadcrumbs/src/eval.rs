//! Budget-sweep evaluation: run each test instance once at the maximum
//! budget, record when (and at what peak cache occupancy) its answer
//! completed, then derive the whole accuracy-vs-budget curve by
//! thresholding.
//!
//! The shortcut is exact because no implemented cache policy conditions its
//! behavior on the global limit: beacon compression and the vanilla cache
//! stop when occupancy would exceed it, and the eviction baselines follow a
//! budget schedule that depends only on the ratio `c` and the step index.
//! A run under a smaller limit is therefore a prefix of (or identical to)
//! the recorded one until its occupancy first needs more than that limit.

use crate::compression::{self, CompressionRule, GenerationResult, Limits, Mode, StopReason};
use crate::error::Error;
use crate::model::PolicyModel;
use crate::tasks::{self, RewardLevel, TaskInstance};
use crate::training::mix_seed;
use crate::vocab::Vocabulary;
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Budget axis = peak cache entries (prompt included).
    FixedCache,
    /// Budget axis = generated tokens (beacons are cache entries, not
    /// tokens, so they never count here).
    FixedLength,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    /// Maximum budget: cache entries or generated tokens depending on mode.
    pub limit: usize,
    pub temperature: f32,
    pub seed: u64,
    /// Episode length cap for fixed-cache mode (compression lets episodes
    /// run far past `limit` tokens; this bounds eval cost).  Defaults to
    /// 4 * limit.
    pub max_new_tokens: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: EvalMode::FixedCache,
            limit: 1000,
            temperature: 0.0,
            seed: 0,
            max_new_tokens: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.limit == 0 {
            return Err(Error::Eval("budget limit must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Eval(format!("bad temperature {}", self.temperature)));
        }
        Ok(())
    }

    pub fn episode_limits(&self) -> Limits {
        match self.mode {
            EvalMode::FixedCache => Limits {
                max_cache_entries: self.limit,
                max_new_tokens: self.max_new_tokens.unwrap_or(self.limit.saturating_mul(4)),
            },
            EvalMode::FixedLength => Limits {
                max_cache_entries: usize::MAX,
                max_new_tokens: self.max_new_tokens.map_or(self.limit, |m| m.min(self.limit)),
            },
        }
    }
}

/// Everything needed to re-derive curve points for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance_seed: u64,
    pub reward_level: RewardLevel,
    /// Minimal budget under which the generated answer still completes:
    /// peak entries (fixed-cache) or token count (fixed-length) through the
    /// closing answer tag.  None when no well-formed answer appeared.
    pub completion_cost: Option<usize>,
    pub gen_tokens: usize,
    pub peak_entries: usize,
    pub stopped_by: StopReason,
}

impl InstanceOutcome {
    pub fn correct_at(&self, budget: f64) -> bool {
        self.reward_level == RewardLevel::Correct
            && self.completion_cost.is_some_and(|c| c as f64 <= budget)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub budgets: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Instances aggregated per point.
    pub n: usize,
}

impl EvalCurve {
    pub fn new(budgets: Vec<f64>, accuracy: Vec<f64>, n: usize) -> Result<Self> {
        if budgets.len() != accuracy.len() || budgets.is_empty() {
            return Err(Error::Eval("curve needs matching, non-empty axes".into()));
        }
        if !budgets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Eval("curve budgets must be strictly increasing".into()));
        }
        if accuracy.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Eval("accuracy must lie in [0, 1]".into()));
        }
        Ok(Self { budgets, accuracy, n })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub curve: EvalCurve,
    /// Accuracy at the full budget: the curve's last point, exactly.
    pub acc_c: f64,
    pub auac: f64,
    pub outcomes: Vec<InstanceOutcome>,
}

/// Trapezoidal area under the accuracy curve over [0, max_budget],
/// normalized by max_budget.  The curve must reach max_budget.
pub fn auac(curve: &EvalCurve, max_budget: f64) -> Result<f64> {
    if curve.budgets.len() < 2 {
        return Err(Error::Eval("auac needs at least two curve points".into()));
    }
    if !(max_budget > 0.0) {
        return Err(Error::Eval("max budget must be positive".into()));
    }
    let last = *curve.budgets.last().expect("non-empty");
    if last < max_budget {
        return Err(Error::Eval(format!(
            "curve ends at {last}, below max budget {max_budget}"
        )));
    }
    let mut twice_area = 0.0f64;
    for i in 1..curve.budgets.len() {
        let (b0, b1) = (curve.budgets[i - 1], curve.budgets[i]);
        if b0 >= max_budget {
            break;
        }
        let b1c = b1.min(max_budget);
        // linear interpolation if max_budget cuts a segment
        let a1 = if b1c < b1 {
            let t = (b1c - b0) / (b1 - b0);
            curve.accuracy[i - 1] + t * (curve.accuracy[i] - curve.accuracy[i - 1])
        } else {
            curve.accuracy[i]
        };
        twice_area += (curve.accuracy[i - 1] + a1) * (b1c - b0);
    }
    Ok(twice_area / (2.0 * max_budget))
}

/// Fraction of instances whose correct answer fits within `budget`.
pub fn accuracy_at(outcomes: &[InstanceOutcome], budget: f64) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.correct_at(budget)).count() as f64 / outcomes.len() as f64
}

/// Pure re-aggregation: outcomes -> (curve, Acc_c, AUAC).  The budget grid
/// is every multiple of limit/100 plus every observed completion cost.
pub fn curve_from_outcomes(
    outcomes: &[InstanceOutcome],
    limit: usize,
) -> Result<(EvalCurve, f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::Eval("no outcomes to aggregate".into()));
    }
    let max = limit as f64;
    let mut grid: Vec<f64> = (0..=100).map(|k| k as f64 * max / 100.0).collect();
    for o in outcomes {
        if let Some(c) = o.completion_cost {
            let b = c as f64;
            if b <= max {
                grid.push(b);
            }
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let accuracy: Vec<f64> = grid.iter().map(|&b| accuracy_at(outcomes, b)).collect();
    let curve = EvalCurve::new(grid, accuracy, outcomes.len())?;
    let area = auac(&curve, max)?;
    let acc_c = *curve.accuracy.last().expect("non-empty");
    Ok((curve, acc_c, area))
}

/// Token index of the closing tag of the last well-formed answer, found by
/// byte alignment so even tag text spelled out from single characters is
/// credited at the right token.
pub fn completion_token_index(
    vocab: &Vocabulary,
    tokens: &[u32],
    text: &str,
) -> Result<Option<usize>> {
    let Some(close_end) = tasks::last_answer_close_end(text) else {
        return Ok(None);
    };
    let mut consumed = 0usize;
    for (i, &tok) in tokens.iter().enumerate() {
        consumed += vocab.detokenize(&[tok])?.len();
        if consumed >= close_end {
            return Ok(Some(i));
        }
    }
    Err(Error::Eval("answer offset beyond detokenized length".into()))
}

fn budget_cost(
    result: &GenerationResult,
    q_len: usize,
    t_star: usize,
    mode: EvalMode,
) -> usize {
    match mode {
        EvalMode::FixedLength => t_star + 1,
        EvalMode::FixedCache => {
            if t_star == 0 {
                // sampling the first token only needs the prompt cached, but
                // generation refuses to start unless one entry fits on top
                q_len + 1
            } else {
                result.cache_trace[t_star - 1].peak_entries
            }
        }
    }
}

fn eval_one(
    policy: &PolicyModel,
    rule: &CompressionRule,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    protocol: &EvalProtocol,
    index: u64,
) -> Result<InstanceOutcome> {
    let prompt_ids = vocab.tokenize(&instance.prompt_text)?;
    let limits = protocol.episode_limits();
    if prompt_ids.len() + 1 > limits.max_cache_entries {
        // the budget cannot even hold the question; scored as a failure
        return Ok(InstanceOutcome {
            instance_seed: instance.seed,
            reward_level: RewardLevel::WrongOrAbsent,
            completion_cost: None,
            gen_tokens: 0,
            peak_entries: prompt_ids.len(),
            stopped_by: StopReason::CacheLimit,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(protocol.seed, 0xE7A1, index));
    let result = compression::generate(
        policy,
        &prompt_ids,
        rule,
        &limits,
        protocol.temperature,
        &mut rng,
        None,
    )?;
    let text = vocab.detokenize(&result.tokens)?;
    let reward_level = tasks::score(instance, &text);
    let completion_cost = completion_token_index(vocab, &result.tokens, &text)?
        .map(|t| budget_cost(&result, prompt_ids.len(), t, protocol.mode));
    Ok(InstanceOutcome {
        instance_seed: instance.seed,
        reward_level,
        completion_cost,
        gen_tokens: result.tokens.len(),
        peak_entries: result.final_stats.peak_entries,
        stopped_by: result.stopped_by,
    })
}

/// Evaluate one policy + cache rule over a test set.  Episodes run in
/// parallel; aggregation is a pure fold over per-instance outcomes.
pub fn evaluate(
    policy: &PolicyModel,
    rule: &CompressionRule,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    if instances.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let outcomes: Vec<InstanceOutcome> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| eval_one(policy, rule, inst, vocab, protocol, i as u64))
        .collect::<Result<_>>()?;
    let (curve, acc_c, area) = curve_from_outcomes(&outcomes, protocol.limit)?;
    Ok(EvalReport { curve, acc_c, auac: area, outcomes })
}

pub fn mode_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Breadcrumbs => "br",
        Mode::Tova => "tova",
        Mode::Streaming => "streaming",
        Mode::None => "none",
    }
}

// ---------------------------------------------------------------------------
// export

#[derive(Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    pub model_tag: String,
    pub mode: String,
    pub c: usize,
    pub budget: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub c: usize,
    pub acc_c: f64,
    pub auac: f64,
}

pub fn curve_rows(
    report: &EvalReport,
    task: &str,
    model_tag: &str,
    mode: Mode,
    c: usize,
) -> Vec<CurveRow> {
    report
        .curve
        .budgets
        .iter()
        .zip(&report.curve.accuracy)
        .map(|(&budget, &accuracy)| CurveRow {
            task: task.to_string(),
            model_tag: model_tag.to_string(),
            mode: mode_label(mode).to_string(),
            c,
            budget,
            accuracy,
            n: report.curve.n,
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outcomes_jsonl(path: &Path, outcomes: &[InstanceOutcome]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for o in outcomes {
        serde_json::to_writer(&mut f, o)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Minimal line plot of one or more curves, as a standalone SVG string.
pub fn render_svg(curves: &[(String, &EvalCurve)], max_budget: f64, x_label: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const ML: f64 = 60.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 20.0;
    const MB: f64 = 50.0;
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let x = |b: f64| ML + (b / max_budget).clamp(0.0, 1.0) * pw;
    let y = |a: f64| MT + (1.0 - a.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{pw}\" height=\"{ph}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let yy = y(a);
        s.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" \
             stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" \
             text-anchor=\"end\">{a:.2}</text>\n",
            ML + pw,
            ML - 6.0,
            yy + 4.0
        ));
        let b = a * max_budget;
        let xx = x(b);
        s.push_str(&format!(
            "<text x=\"{xx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{b:.0}</text>\n",
            MT + ph + 16.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n",
        ML + pw / 2.0,
        H - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" \
         text-anchor=\"middle\">accuracy</text>\n",
        MT + ph / 2.0,
        MT + ph / 2.0
    ));
    for (ci, (label, curve)) in curves.iter().enumerate() {
        let color = palette[ci % palette.len()];
        let pts: Vec<String> = curve
            .budgets
            .iter()
            .zip(&curve.accuracy)
            .map(|(&b, &a)| format!("{:.1},{:.1}", x(b), y(a)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        let ly = MT + 16.0 + 16.0 * ci as f64;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n",
            ML + pw - 150.0,
            ML + pw - 125.0,
            ML + pw - 118.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionEncoding, Role};
    use crate::tasks::{TaskConfig, TaskKind};
    use crate::training::TaskEnv;
    use crate::vocab;

    fn tiny_model(vocab_size: usize, seed: u64) -> PolicyModel {
        let cfg = ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 512,
            position_encoding: PositionEncoding::Rotary,
            rope_base: 10000.0,
            rms_eps: 1e-5,
            init_std: 0.02,
        };
        PolicyModel::new(cfg, Role::Teacher, seed).unwrap()
    }

    fn uniform_curve(n_points: usize, acc: impl Fn(f64) -> f64) -> EvalCurve {
        let budgets: Vec<f64> =
            (0..=n_points).map(|k| k as f64 * 1000.0 / n_points as f64).collect();
        let accuracy: Vec<f64> = budgets.iter().map(|&b| acc(b)).collect();
        EvalCurve::new(budgets, accuracy, 1).unwrap()
    }

    #[test]
    fn auac_constant_curve_is_exact() {
        for a in [0.5, 0.25, 1.0, 0.0] {
            let curve = uniform_curve(100, |_| a);
            assert_eq!(auac(&curve, 1000.0).unwrap(), a);
        }
    }

    #[test]
    fn auac_step_curve_close_to_analytic() {
        let curve = uniform_curve(100, |b| if b >= 500.0 { 1.0 } else { 0.0 });
        let a = auac(&curve, 1000.0).unwrap();
        assert!((a - 0.5).abs() <= 0.01, "step AUAC {a}");
        // the trapezoid smear at the jump is exactly half a grid cell
        assert!((a - 0.505).abs() < 1e-12);
    }

    #[test]
    fn auac_grid_refinement_converges_on_smooth_curve() {
        let f = |b: f64| b / 1000.0;
        let coarse = auac(&uniform_curve(100, f), 1000.0).unwrap();
        let fine = auac(&uniform_curve(200, f), 1000.0).unwrap();
        assert!((coarse - fine).abs() < 1e-3);
        assert!((coarse - 0.5).abs() < 1e-9);
    }

    #[test]
    fn curve_rejects_bad_axes() {
        assert!(EvalCurve::new(vec![0.0, 0.0], vec![0.1, 0.2], 1).is_err());
        assert!(EvalCurve::new(vec![0.0, 1.0], vec![0.1, 1.2], 1).is_err());
        assert!(EvalCurve::new(vec![0.0], vec![0.1, 0.2], 1).is_err());
    }

    #[test]
    fn hand_built_outcomes_aggregate_as_expected() {
        let mk = |level, cost: Option<usize>| InstanceOutcome {
            instance_seed: 0,
            reward_level: level,
            completion_cost: cost,
            gen_tokens: 5,
            peak_entries: cost.unwrap_or(9),
            stopped_by: StopReason::StopToken,
        };
        let outcomes = vec![
            mk(RewardLevel::Correct, Some(3)),
            mk(RewardLevel::Correct, Some(5)),
            mk(RewardLevel::WrongOrAbsent, None),
        ];
        let (curve, acc_c, area) = curve_from_outcomes(&outcomes, 10).unwrap();
        assert_eq!(curve.accuracy[0], 0.0); // budget 0
        assert!((acc_c - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc_c, *curve.accuracy.last().unwrap());
        // exact integral: 1/3 on [3,5), 2/3 on [5,10] -> 0.4; trapezoid
        // smears half a cell at each jump
        assert!((area - 0.4).abs() <= 0.01, "AUAC {area}");
        assert!(curve.accuracy.windows(2).all(|w| w[0] <= w[1]));
        // re-aggregation is bit-exact
        let (curve2, acc_c2, area2) = curve_from_outcomes(&outcomes, 10).unwrap();
        assert_eq!(curve, curve2);
        assert_eq!(acc_c.to_bits(), acc_c2.to_bits());
        assert_eq!(area.to_bits(), area2.to_bits());
    }

    #[test]
    fn completion_index_on_tag_tokens_and_spelled_out_tags() {
        let v = Vocabulary::core();
        // normal: dedicated tag tokens
        let mut ids = v.tokenize("x = ").unwrap();
        ids.push(vocab::ANSWER_OPEN);
        ids.extend(v.tokenize(" 5 ").unwrap());
        ids.push(vocab::ANSWER_CLOSE);
        ids.extend(v.tokenize(" trailing").unwrap());
        let close_at = ids.iter().position(|&t| t == vocab::ANSWER_CLOSE).unwrap();
        let text = v.detokenize(&ids).unwrap();
        assert_eq!(completion_token_index(&v, &ids, &text).unwrap(), Some(close_at));

        // adversarial: the closing tag spelled out character by character
        let mut ids = v.tokenize("y").unwrap();
        ids.push(vocab::ANSWER_OPEN);
        ids.extend(v.tokenize(" 7 ").unwrap());
        for ch in "</answer>".chars() {
            let mut one = v.tokenize(&ch.to_string()).unwrap();
            assert_eq!(one.len(), 1);
            ids.append(&mut one);
        }
        ids.extend(v.tokenize("z").unwrap());
        let text = v.detokenize(&ids).unwrap();
        // the '>' finishing the spelled-out close tag is 2 tokens from the end
        assert_eq!(completion_token_index(&v, &ids, &text).unwrap(), Some(ids.len() - 2));
        assert_eq!(tasks::extract_last_answer(&text), Some(" 7 "));
    }

    #[test]
    fn evaluate_on_tiny_model_has_sound_curve_shape() {
        let v = Vocabulary::core();
        let model = tiny_model(v.len(), 13);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let instances = env.test_set(6).unwrap();
        let protocol = EvalProtocol {
            limit: 80,
            temperature: 1.0,
            seed: 3,
            max_new_tokens: Some(24),
            ..EvalProtocol::default()
        };
        let rule = CompressionRule::new(Mode::Breadcrumbs, 2).unwrap();
        let report = evaluate(&model, &rule, &instances, &v, &protocol).unwrap();
        assert_eq!(report.curve.accuracy[0], 0.0);
        assert_eq!(report.acc_c, *report.curve.accuracy.last().unwrap());
        assert!(report.curve.accuracy.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(report.outcomes.len(), 6);
        // deterministic: same protocol, same report
        let report2 = evaluate(&model, &rule, &instances, &v, &protocol).unwrap();
        assert_eq!(report.outcomes, report2.outcomes);
        // re-aggregation from outcomes is bit-exact
        let (curve, acc_c, area) = curve_from_outcomes(&report.outcomes, protocol.limit).unwrap();
        assert_eq!(curve, report.curve);
        assert_eq!(acc_c.to_bits(), report.acc_c.to_bits());
        assert_eq!(area.to_bits(), report.auac.to_bits());
    }

    /// The single-pass shortcut's enabling property: a run under a smaller
    /// cache limit reproduces the max-budget run token-for-token until its
    /// occupancy first needs more than that limit.
    #[test]
    fn lower_budget_reruns_match_recorded_prefixes() {
        let v = Vocabulary::core();
        let model = tiny_model(v.len(), 17);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let instances = env.test_set(4).unwrap();
        for mode in [Mode::Breadcrumbs, Mode::None, Mode::Tova, Mode::Streaming] {
            let rule = CompressionRule::new(mode, 2).unwrap();
            for inst in &instances {
                let prompt = v.tokenize(&inst.prompt_text).unwrap();
                let q = prompt.len();
                let full_limits = Limits { max_cache_entries: 1000, max_new_tokens: 20 };
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let full = compression::generate(
                    &model, &prompt, &rule, &full_limits, 0.0, &mut rng, None,
                )
                .unwrap();
                let needed = |t: usize| {
                    if t == 0 { q + 1 } else { full.cache_trace[t - 1].peak_entries }
                };
                for budget in [q + 1, q + 3, q + 6, q + 10, q + 40] {
                    let m = (0..full.tokens.len()).take_while(|&t| needed(t) <= budget).count();
                    let limits =
                        Limits { max_cache_entries: budget, max_new_tokens: 20 };
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let rerun = compression::generate(
                        &model, &prompt, &rule, &limits, 0.0, &mut rng, None,
                    )
                    .unwrap();
                    match mode {
                        Mode::Breadcrumbs | Mode::None => {
                            assert_eq!(
                                rerun.tokens,
                                full.tokens[..m],
                                "{mode:?} budget {budget}"
                            );
                        }
                        Mode::Tova | Mode::Streaming => {
                            // eviction baselines keep generating under the
                            // cap, but the prefix must agree
                            assert!(rerun.tokens.len() >= m);
                            assert_eq!(
                                rerun.tokens[..m],
                                full.tokens[..m],
                                "{mode:?} budget {budget}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn svg_export_is_well_formed() {
        let curve = uniform_curve(10, |b| b / 1000.0);
        let svg = render_svg(
            &[("br c=2".to_string(), &curve)],
            1000.0,
            "cache budget (entries)",
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("br c=2"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let rows = vec![
            SummaryRow { method: "br".into(), c: 2, acc_c: 0.5, auac: 0.41 },
            SummaryRow { method: "tova".into(), c: 2, acc_c: 0.25, auac: 0.2 },
        ];
        write_csv(&path, &rows).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let back: Vec<SummaryRow> =
            rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, "br");
        assert_eq!(back[1].acc_c, 0.25);
    }
}

//! Generation-time cache controllers and their training-time mirror.
//!
//! Beacon compression: after every `c` sampled tokens, feed the reserved
//! beacon token once, then evict the `c` generation entries it summarizes
//! (keeping the beacon itself), and only then feed the pending token.  The
//! cache therefore holds question entries, one beacon per completed window,
//! and the current partial window.
//!
//! Two training-free baselines run under the *same* entry budget
//! `question_len + c + t/c` after `t` sampled tokens: lowest-attention
//! eviction (pooled post-softmax scores, mean over layers and heads) and a
//! sliding window over generation entries with the whole question kept as an
//! attention sink.
//!
//! `interleaved_layout` / `build_breadcrumbs_mask` rebuild the exact
//! visibility pattern of a beacon-compressed episode as a masked full
//! sequence, so a batched tape forward reproduces the incremental logits
//! bit-for-bit — that equivalence is what makes distillation on stored
//! trajectories valid.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::kv::{CacheStats, EntryTag, KvCache};
use crate::mask::AttentionMask;
use crate::model::{PolicyModel, StepOutput};
use crate::vocab::{self, TokenId};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Beacon compression with immediate eviction.
    Breadcrumbs,
    /// Evict the entry with the lowest pooled attention score.
    Tova,
    /// Question kept as sink + sliding window over generation entries.
    Streaming,
    /// No compression or eviction at all.
    None,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Breadcrumbs => "br",
            Mode::Tova => "tova",
            Mode::Streaming => "streaming",
            Mode::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompressionRule {
    pub mode: Mode,
    /// Window size `c`: tokens summarized per beacon, and the budget‑growth
    /// period for the baselines.  Ignored by `Mode::None`.
    pub ratio_c: usize,
}

impl CompressionRule {
    pub fn new(mode: Mode, ratio_c: usize) -> Result<Self> {
        if mode != Mode::None && ratio_c == 0 {
            return Err(Error::Config("compression ratio c must be >= 1".into()));
        }
        Ok(CompressionRule { mode, ratio_c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    /// Hard cap on cache entries; exceeding it stops the episode.
    pub max_cache_entries: usize,
    /// Cap on sampled tokens (beacons never count).
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The model sampled the stop token.  Wins over the other two when they
    /// coincide on the same step.
    StopToken,
    CacheLimit,
    LengthLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Sample,
    Beacon,
    Evict,
    Stop,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEvent {
    /// 0-based index of the most recently sampled token.
    pub step: usize,
    pub event: EventKind,
    pub token: Option<TokenId>,
    /// Cache entries after this event took effect.
    pub entries_now: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    /// Sampled tokens in order, including a trailing stop token if one was
    /// drawn.  Beacons are not tokens and never appear here.
    pub tokens: Vec<TokenId>,
    pub stopped_by: StopReason,
    /// Cache counters after each *fed* token (index parallel to `tokens`,
    /// except a trailing stop token, which is never fed).
    pub cache_trace: Vec<CacheStats>,
    pub events: Vec<TraceEvent>,
    pub final_stats: CacheStats,
    /// Original positions of the entries still cached when the episode ended.
    pub final_positions: Vec<usize>,
    /// Tags parallel to `final_positions`.
    pub final_tags: Vec<EntryTag>,
}

impl GenerationResult {
    /// Highest entry count the cache ever held.
    pub fn peak_entries(&self) -> usize {
        self.final_stats.peak_entries
    }

    /// Compact occupancy trace: the entry count at each sample and after
    /// each eviction, in event order.  The first element is the question
    /// length; for q=3, c=2 over five tokens this is [3, 4, 5, 4, 5, 6, 5]
    /// — counts rise inside a window and drop at each eviction.
    pub fn occupancy_trace(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter(|ev| matches!(ev.event, EventKind::Sample | EventKind::Evict))
            .map(|ev| ev.entries_now)
            .collect()
    }
}

/// Entry budget shared by the baselines: after `t` sampled tokens a
/// budget-matched cache may hold at most `question_len + c + t/c` entries —
/// the same bound beacon compression satisfies by construction (up to its
/// `+1` transient while a beacon coexists with its window).
pub fn budget_at(question_len: usize, c: usize, t: usize) -> usize {
    question_len + c + t / c
}

/// Anything that can run one cached decode step.  `PolicyModel` is the real
/// implementation; `ConstantPolicy` is a cheap stand-in for controller and
/// occupancy tests.
pub trait Policy {
    fn vocab_size(&self) -> usize;
    fn begin_cache(&self) -> KvCache<f32>;
    fn step(
        &self,
        token: TokenId,
        position: usize,
        tag: EntryTag,
        cache: &mut KvCache<f32>,
    ) -> Result<StepOutput>;
}

impl Policy for PolicyModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn begin_cache(&self) -> KvCache<f32> {
        PolicyModel::begin_cache(self)
    }

    fn step(
        &self,
        token: TokenId,
        position: usize,
        tag: EntryTag,
        cache: &mut KvCache<f32>,
    ) -> Result<StepOutput> {
        self.forward_step(token, position, tag, cache)
    }
}

/// Fixed-preference policy: always favors one token, never stops, uniform
/// attention.  Exercises the real cache mechanics at near-zero cost.
pub struct ConstantPolicy {
    pub vocab_size: usize,
    pub favored: TokenId,
}

impl Policy for ConstantPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn begin_cache(&self) -> KvCache<f32> {
        KvCache::new(1, 1, 2)
    }

    fn step(
        &self,
        _token: TokenId,
        position: usize,
        tag: EntryTag,
        cache: &mut KvCache<f32>,
    ) -> Result<StepOutput> {
        cache.append(
            crate::kv::StagedEntry { layers: vec![(vec![0.0, 0.0], vec![0.0, 0.0])] },
            position,
            tag,
        )?;
        let mut logits = vec![0.0f32; self.vocab_size];
        logits[self.favored as usize] = 5.0;
        let n = cache.len();
        Ok(StepOutput { logits, attn_mean: vec![1.0 / n as f32; n] })
    }
}

/// Observer invoked after each sample with (token index, raw logits of the
/// distribution it was drawn from, sampled token).
pub type SampleObserver<'a> = &'a mut dyn FnMut(usize, &[f32], TokenId);

/// Run one episode under `rule`.  Deterministic given (policy weights,
/// prompt, rule, limits, temperature, rng state).
pub fn generate<P: Policy>(
    policy: &P,
    prompt: &[TokenId],
    rule: &CompressionRule,
    limits: &Limits,
    temperature: f32,
    rng: &mut impl Rng,
    mut observer: Option<SampleObserver<'_>>,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::Generation("prompt must be non-empty".into()));
    }
    if rule.mode != Mode::None && rule.ratio_c == 0 {
        return Err(Error::Config("compression ratio c must be >= 1".into()));
    }
    let q_len = prompt.len();
    if q_len + 1 > limits.max_cache_entries {
        return Err(Error::Generation(format!(
            "cache limit {} cannot hold the {q_len}-token question",
            limits.max_cache_entries
        )));
    }

    let mut cache = policy.begin_cache();
    let prompt_tag = if rule.mode == Mode::Streaming { EntryTag::Sink } else { EntryTag::Question };
    let mut out: Option<StepOutput> = None;
    for (i, &id) in prompt.iter().enumerate() {
        out = Some(policy.step(id, i, prompt_tag, &mut cache)?);
    }
    let mut out = out.expect("non-empty prompt");
    let mut next_pos = q_len;

    let c = rule.ratio_c;
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut cache_trace: Vec<CacheStats> = Vec::new();
    let mut events: Vec<TraceEvent> = Vec::new();
    let stopped_by;

    loop {
        if tokens.len() >= limits.max_new_tokens {
            stopped_by = StopReason::LengthLimit;
            break;
        }
        let token = crate::model::sample_token(&out.logits, temperature, &[vocab::BEACON], rng)?;
        let i = tokens.len(); // index of this token
        if let Some(obs) = observer.as_mut() {
            obs(i, &out.logits, token);
        }
        tokens.push(token);
        events.push(TraceEvent { step: i, event: EventKind::Sample, token: Some(token), entries_now: cache.len() });

        if token == vocab::STOP {
            stopped_by = StopReason::StopToken;
            events.push(TraceEvent { step: i, event: EventKind::Stop, token: Some(token), entries_now: cache.len() });
            break;
        }

        // mode-specific cache work due before this token's entry is written
        match rule.mode {
            Mode::Breadcrumbs => {
                if i > 0 && i % c == 0 {
                    // compress the completed window: feed one beacon, then
                    // evict the c entries it stands for
                    if cache.len() + 1 > limits.max_cache_entries {
                        stopped_by = StopReason::CacheLimit;
                        break;
                    }
                    policy.step(vocab::BEACON, next_pos, EntryTag::Beacon, &mut cache)?;
                    next_pos += 1;
                    events.push(TraceEvent { step: i, event: EventKind::Beacon, token: Some(vocab::BEACON), entries_now: cache.len() });
                    cache.evict_suffix_keep_last(c)?;
                    events.push(TraceEvent { step: i, event: EventKind::Evict, token: None, entries_now: cache.len() });
                }
                if cache.len() + 1 > limits.max_cache_entries {
                    stopped_by = StopReason::CacheLimit;
                    break;
                }
            }
            Mode::Tova => {
                // keep the post-append size within budget_at(i+1); evict the
                // lowest pooled-attention slots first (ties: lowest slot)
                let budget = budget_at(q_len, c, i + 1).min(limits.max_cache_entries);
                if cache.len() + 1 > budget {
                    let excess = cache.len() + 1 - budget;
                    let mut order: Vec<usize> = (0..cache.len()).collect();
                    order.sort_by(|&a, &b| {
                        out.attn_mean[a]
                            .partial_cmp(&out.attn_mean[b])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.cmp(&b))
                    });
                    let mut victims: Vec<usize> = order.into_iter().take(excess).collect();
                    victims.sort_unstable();
                    cache.evict_slots(&victims)?;
                    events.push(TraceEvent { step: i, event: EventKind::Evict, token: None, entries_now: cache.len() });
                }
            }
            Mode::Streaming => {
                // same budget; evict the oldest generation entries, never
                // the question sink
                let budget = budget_at(q_len, c, i + 1).min(limits.max_cache_entries);
                if cache.len() + 1 > budget {
                    let excess = cache.len() + 1 - budget;
                    let victims: Vec<usize> = cache
                        .tags()
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t != EntryTag::Sink)
                        .map(|(s, _)| s)
                        .take(excess)
                        .collect();
                    if victims.len() < excess {
                        return Err(Error::Generation("window underflow: nothing left to evict".into()));
                    }
                    cache.evict_slots(&victims)?;
                    events.push(TraceEvent { step: i, event: EventKind::Evict, token: None, entries_now: cache.len() });
                }
            }
            Mode::None => {
                if cache.len() + 1 > limits.max_cache_entries {
                    stopped_by = StopReason::CacheLimit;
                    break;
                }
            }
        }

        out = policy.step(token, next_pos, EntryTag::Generation, &mut cache)?;
        next_pos += 1;
        cache_trace.push(cache.stats());
    }

    Ok(GenerationResult {
        tokens,
        stopped_by,
        cache_trace,
        events,
        final_stats: cache.stats(),
        final_positions: cache.positions().to_vec(),
        final_tags: cache.tags().to_vec(),
    })
}

pub fn breadcrumbs_generate<P: Policy>(
    policy: &P,
    prompt: &[TokenId],
    ratio_c: usize,
    limits: &Limits,
    temperature: f32,
    rng: &mut impl Rng,
    observer: Option<SampleObserver<'_>>,
) -> Result<GenerationResult> {
    generate(policy, prompt, &CompressionRule::new(Mode::Breadcrumbs, ratio_c)?, limits, temperature, rng, observer)
}

pub fn tova_generate<P: Policy>(
    policy: &P,
    prompt: &[TokenId],
    ratio_c: usize,
    limits: &Limits,
    temperature: f32,
    rng: &mut impl Rng,
    observer: Option<SampleObserver<'_>>,
) -> Result<GenerationResult> {
    generate(policy, prompt, &CompressionRule::new(Mode::Tova, ratio_c)?, limits, temperature, rng, observer)
}

pub fn streaming_generate<P: Policy>(
    policy: &P,
    prompt: &[TokenId],
    ratio_c: usize,
    limits: &Limits,
    temperature: f32,
    rng: &mut impl Rng,
    observer: Option<SampleObserver<'_>>,
) -> Result<GenerationResult> {
    generate(policy, prompt, &CompressionRule::new(Mode::Streaming, ratio_c)?, limits, temperature, rng, observer)
}

/// One JSON line per trace event: step, event, token, entries_now.
pub fn write_trace_jsonl(result: &GenerationResult, mut w: impl Write) -> std::io::Result<()> {
    for ev in &result.events {
        let line = serde_json::json!({
            "step": ev.step,
            "event": ev.event,
            "token": ev.token,
            "entries_now": ev.entries_now,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

// ---- training-time mirror ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// i-th question token.
    Question(usize),
    /// i-th generated token.
    Gen(usize),
    /// Beacon closing window m (1-based); sits right before gen index m*c.
    Beacon(usize),
}

/// The beacon-compressed episode written out as one flat sequence: question,
/// then generation tokens with each completed window's beacon spliced in
/// directly before the token that was pending when it was written.  Slot
/// index == the position the entry had at decode time.
#[derive(Debug, Clone)]
pub struct InterleavedLayout {
    pub slots: Vec<SlotKind>,
    pub q_len: usize,
    pub gen_len: usize,
    pub ratio_c: usize,
    /// gen index -> its slot.
    pub gen_slot: Vec<usize>,
    /// gen index i -> row whose logits are the distribution x_i was sampled
    /// from (the previous token's slot; beacons never predict).
    pub prediction_row: Vec<usize>,
}

impl InterleavedLayout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Materialize the token sequence for this layout.
    pub fn tokens(&self, prompt: &[TokenId], gen: &[TokenId], beacon: TokenId) -> Result<Vec<TokenId>> {
        if prompt.len() != self.q_len || gen.len() != self.gen_len {
            return Err(Error::Generation(format!(
                "layout built for q={} g={}, got q={} g={}",
                self.q_len,
                self.gen_len,
                prompt.len(),
                gen.len()
            )));
        }
        Ok(self
            .slots
            .iter()
            .map(|s| match *s {
                SlotKind::Question(i) => prompt[i],
                SlotKind::Gen(i) => gen[i],
                SlotKind::Beacon(_) => beacon,
            })
            .collect())
    }
}

/// Layout of a beacon-compressed episode with `gen_len` sampled tokens.
pub fn interleaved_layout(q_len: usize, gen_len: usize, ratio_c: usize) -> InterleavedLayout {
    assert!(q_len >= 1, "layout needs a non-empty question");
    assert!(ratio_c >= 1, "ratio must be >= 1");
    let mut slots = Vec::with_capacity(q_len + gen_len + gen_len / ratio_c.max(1));
    for i in 0..q_len {
        slots.push(SlotKind::Question(i));
    }
    let mut gen_slot = Vec::with_capacity(gen_len);
    let mut prediction_row = Vec::with_capacity(gen_len);
    for i in 0..gen_len {
        prediction_row.push(if i == 0 { q_len - 1 } else { gen_slot[i - 1] });
        if i > 0 && i % ratio_c == 0 {
            slots.push(SlotKind::Beacon(i / ratio_c));
        }
        gen_slot.push(slots.len());
        slots.push(SlotKind::Gen(i));
    }
    InterleavedLayout { slots, q_len, gen_len, ratio_c, gen_slot, prediction_row }
}

/// The visibility mask matching what each entry could attend to at decode
/// time.  Returned together with its layout.
pub fn build_breadcrumbs_mask(q_len: usize, gen_len: usize, ratio_c: usize) -> (InterleavedLayout, AttentionMask) {
    let layout = interleaved_layout(q_len, gen_len, ratio_c);
    let c = ratio_c;
    let slots = layout.slots.clone();
    let mask = AttentionMask::from_fn(layout.len(), move |row, col| {
        if col > row {
            return false;
        }
        match (slots[row], slots[col]) {
            // the question prefix is never evicted and always visible
            (_, SlotKind::Question(_)) => true,
            // question rows see only the question (handled above) — anything
            // else can't precede them anyway
            (SlotKind::Question(_), _) => false,
            // beacons of completed windows survive for everyone after them
            (SlotKind::Gen(_), SlotKind::Beacon(_)) => true,
            (SlotKind::Beacon(_), SlotKind::Beacon(_)) => true,
            // raw generation entries are only visible within their own
            // window (earlier windows were evicted)
            (SlotKind::Gen(j), SlotKind::Gen(k)) => k / c == j / c,
            // a beacon sees the whole window it summarizes
            (SlotKind::Beacon(m), SlotKind::Gen(k)) => k >= (m - 1) * c,
        }
    });
    (layout, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 20;
    const EMIT: TokenId = 10;

    fn dummy() -> ConstantPolicy {
        ConstantPolicy { vocab_size: V, favored: EMIT }
    }

    fn big_limits() -> Limits {
        Limits { max_cache_entries: 10_000, max_new_tokens: 1_000_000 }
    }

    fn run_br(q_len: usize, c: usize, n_tokens: usize) -> GenerationResult {
        let p = dummy();
        let prompt = vec![EMIT; q_len];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 10_000, max_new_tokens: n_tokens };
        breadcrumbs_generate(&p, &prompt, c, &limits, 0.0, &mut rng, None).unwrap()
    }

    #[test]
    fn occupancy_matches_closed_form() {
        // c=2, q=3: entries after step t = 3 + (t-1)/2 + (t-1)%2 + 1
        let r = run_br(3, 2, 8);
        let got: Vec<usize> = r.cache_trace.iter().map(|s| s.current_entries).collect();
        let want: Vec<usize> = (1..=8).map(|t: usize| 3 + (t - 1) / 2 + (t - 1) % 2 + 1).collect();
        assert_eq!(got, want);
        assert_eq!(got, vec![4, 5, 5, 6, 6, 7, 7, 8]);
    }

    #[test]
    fn two_compressions_leave_question_plus_two_beacons() {
        let r = run_br(3, 2, 5);
        // after the second evict event the cache is [q,q,q,b1,b2]
        let evicts: Vec<&TraceEvent> = r.events.iter().filter(|e| e.event == EventKind::Evict).collect();
        assert_eq!(evicts.len(), 2);
        assert_eq!(evicts[1].entries_now, 5);
    }

    #[test]
    fn position_counter_matches_layout_slots() {
        // c=2, q=3, 5 tokens: slots q0 q1 q2 x0 x1 b1 x2 x3 b2 x4, positions 0..9.
        // The controller must have appended exactly one entry per slot.
        let r = run_br(3, 2, 5);
        assert_eq!(r.tokens.len(), 5);
        let layout = interleaved_layout(3, 5, 2);
        assert_eq!(layout.len(), 10);
        assert_eq!(r.final_stats.appends as usize, layout.len());
        // two compressions evicted 2 entries each; survivors keep the
        // positions the layout assigns to their slots
        assert_eq!(r.final_stats.evicted, 4);
        assert_eq!(r.final_positions, vec![0, 1, 2, 5, 8, 9]);
        use EntryTag::*;
        assert_eq!(r.final_tags, vec![Question, Question, Question, Beacon, Beacon, Generation]);
    }

    #[test]
    fn stop_token_wins_over_compression_step() {
        let p = ConstantPolicy { vocab_size: V, favored: vocab::STOP };
        let prompt = vec![EMIT; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = breadcrumbs_generate(&p, &prompt, 2, &big_limits(), 0.0, &mut rng, None).unwrap();
        assert_eq!(r.stopped_by, StopReason::StopToken);
        assert_eq!(r.tokens, vec![vocab::STOP]);
        assert!(r.cache_trace.is_empty(), "stop token is never fed");
    }

    #[test]
    fn length_limit_counts_sampled_tokens_only() {
        let r = run_br(3, 2, 7);
        assert_eq!(r.stopped_by, StopReason::LengthLimit);
        assert_eq!(r.tokens.len(), 7);
        // beacons were fed but don't count: 3 beacon events for 7 tokens (i=2,4,6)
        let beacons = r.events.iter().filter(|e| e.event == EventKind::Beacon).count();
        assert_eq!(beacons, 3);
    }

    #[test]
    fn cache_limit_fires_on_would_be_beacon_write() {
        // q=3, c=2: before compression at i=2 the cache has 5 entries; the
        // beacon write would make 6
        let p = dummy();
        let prompt = vec![EMIT; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 5, max_new_tokens: 100 };
        let r = breadcrumbs_generate(&p, &prompt, 2, &limits, 0.0, &mut rng, None).unwrap();
        assert_eq!(r.stopped_by, StopReason::CacheLimit);
        assert_eq!(r.tokens.len(), 3); // x0, x1 fed; x2 sampled then hit the wall
        assert!(r.final_stats.peak_entries <= 5);
    }

    #[test]
    fn never_stopping_policy_exceeds_cache_budget_many_times_over() {
        let p = dummy();
        let prompt = vec![EMIT; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 60, max_new_tokens: 100_000 };
        let r = breadcrumbs_generate(&p, &prompt, 4, &limits, 0.0, &mut rng, None).unwrap();
        assert_eq!(r.stopped_by, StopReason::CacheLimit);
        // roughly (60 - 10 - 4) * 4 tokens before the cache fills
        assert!(r.tokens.len() > 150, "got {}", r.tokens.len());
        assert!(r.final_stats.peak_entries <= 60);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let p = dummy();
        let prompt = vec![EMIT; 4];
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let limits = Limits { max_cache_entries: 50, max_new_tokens: 30 };
            breadcrumbs_generate(&p, &prompt, 2, &limits, 1.0, &mut rng, None).unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.stopped_by, b.stopped_by);
        assert_eq!(
            a.cache_trace.iter().map(|s| s.current_entries).collect::<Vec<_>>(),
            b.cache_trace.iter().map(|s| s.current_entries).collect::<Vec<_>>()
        );
    }

    #[test]
    fn observer_sees_every_sampled_token() {
        let p = dummy();
        let prompt = vec![EMIT; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 1000, max_new_tokens: 6 };
        let mut seen = Vec::new();
        let mut obs = |i: usize, logits: &[f32], tok: TokenId| {
            assert_eq!(logits.len(), V);
            seen.push((i, tok));
        };
        let r = breadcrumbs_generate(&p, &prompt, 2, &limits, 0.0, &mut rng, Some(&mut obs)).unwrap();
        assert_eq!(seen.len(), r.tokens.len());
        assert!(seen.iter().enumerate().all(|(k, &(i, _))| k == i));
    }

    #[test]
    fn tova_and_streaming_respect_budget_everywhere() {
        for &(q, c) in &[(3usize, 2usize), (5, 4), (9, 8)] {
            for mode in [Mode::Tova, Mode::Streaming] {
                let p = dummy();
                let prompt = vec![EMIT; q];
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let limits = Limits { max_cache_entries: 10_000, max_new_tokens: 120 };
                let rule = CompressionRule::new(mode, c).unwrap();
                let r = generate(&p, &prompt, &rule, &limits, 0.0, &mut rng, None).unwrap();
                for (idx, s) in r.cache_trace.iter().enumerate() {
                    let t = idx + 1;
                    assert!(
                        s.peak_entries <= budget_at(q, c, t),
                        "{mode:?} q={q} c={c}: peak {} at t={t} over budget {}",
                        s.peak_entries,
                        budget_at(q, c, t)
                    );
                }
            }
        }
    }

    #[test]
    fn streaming_never_evicts_the_question() {
        let p = dummy();
        let q = 6;
        let prompt = vec![EMIT; q];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let limits = Limits { max_cache_entries: 10_000, max_new_tokens: 80 };
        let r = streaming_generate(&p, &prompt, 2, &limits, 0.0, &mut rng, None).unwrap();
        assert_eq!(r.stopped_by, StopReason::LengthLimit);
        assert!(r.events.iter().any(|e| e.event == EventKind::Evict));
        // the question sink survives in full at its original positions
        let sink_positions: Vec<usize> = r
            .final_tags
            .iter()
            .zip(r.final_positions.iter())
            .filter(|(&t, _)| t == EntryTag::Sink)
            .map(|(_, &p)| p)
            .collect();
        assert_eq!(sink_positions, (0..q).collect::<Vec<_>>());
        // the surviving generation entries are the most recent window
        let gen_positions: Vec<usize> = r
            .final_tags
            .iter()
            .zip(r.final_positions.iter())
            .filter(|(&t, _)| t == EntryTag::Generation)
            .map(|(_, &p)| p)
            .collect();
        let newest = q + 80 - 1; // 80 tokens fed at positions q..q+79
        let w = gen_positions.len();
        assert_eq!(gen_positions, ((newest + 1 - w)..=newest).collect::<Vec<_>>());
    }

    #[test]
    fn tova_uniform_attention_evicts_lowest_slots_first() {
        let p = dummy();
        let q = 4;
        let c = 2;
        let prompt = vec![EMIT; q];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 10_000, max_new_tokens: 40 };
        let r = tova_generate(&p, &prompt, c, &limits, 0.0, &mut rng, None).unwrap();
        // with uniform attention the tie-break is the lowest slot, i.e. the
        // oldest entries go first; the cache stays within budget
        let t = r.tokens.len();
        assert!(r.final_stats.current_entries <= budget_at(q, c, t));
        assert!(r.events.iter().any(|e| e.event == EventKind::Evict));
    }

    #[test]
    fn none_mode_grows_one_entry_per_token() {
        let p = dummy();
        let prompt = vec![EMIT; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let limits = Limits { max_cache_entries: 10, max_new_tokens: 100 };
        let rule = CompressionRule::new(Mode::None, 0).unwrap();
        let r = generate(&p, &prompt, &rule, &limits, 0.0, &mut rng, None).unwrap();
        assert_eq!(r.stopped_by, StopReason::CacheLimit);
        assert_eq!(r.tokens.len(), 8); // 3 + 7 = 10 full, 8th token can't be fed
        let trace: Vec<usize> = r.cache_trace.iter().map(|s| s.current_entries).collect();
        assert_eq!(trace, vec![4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn empty_prompt_rejected() {
        let p = dummy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(breadcrumbs_generate(&p, &[], 2, &big_limits(), 0.0, &mut rng, None).is_err());
    }

    #[test]
    fn trace_jsonl_shape() {
        let r = run_br(3, 2, 3);
        let mut buf = Vec::new();
        write_trace_jsonl(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert_eq!(first["event"], "sample");
        assert!(first["entries_now"].is_u64());
    }

    // ---- layout / mask ----

    #[test]
    fn layout_matches_hand_interleaving() {
        // q=3, g=5, c=2: q0 q1 q2 x0 x1 b1 x2 x3 b2 x4
        let l = interleaved_layout(3, 5, 2);
        use SlotKind::*;
        assert_eq!(
            l.slots,
            vec![
                Question(0),
                Question(1),
                Question(2),
                Gen(0),
                Gen(1),
                Beacon(1),
                Gen(2),
                Gen(3),
                Beacon(2),
                Gen(4)
            ]
        );
        assert_eq!(l.gen_slot, vec![3, 4, 6, 7, 9]);
        // x_i is predicted from the previous token's row
        assert_eq!(l.prediction_row, vec![2, 3, 4, 6, 7]);
    }

    #[test]
    fn layout_tokens_splices_beacons() {
        let l = interleaved_layout(2, 3, 2);
        let toks = l.tokens(&[7, 8], &[20, 21, 22], vocab::BEACON).unwrap();
        assert_eq!(toks, vec![7, 8, 20, 21, vocab::BEACON, 22]);
        assert!(l.tokens(&[7], &[20, 21, 22], vocab::BEACON).is_err());
    }

    #[test]
    fn mask_visible_counts_equal_decode_time_occupancy() {
        for &(q, c, g) in &[(3usize, 2usize, 9usize), (5, 4, 13), (2, 3, 7), (4, 8, 20)] {
            let (layout, mask) = build_breadcrumbs_mask(q, g, c);
            for j in 0..g {
                let row = layout.gen_slot[j];
                // cache at the moment x_j was fed: question + beacons so far
                // + current window prefix + x_j itself
                let want = q + j / c + (j % c) + 1;
                assert_eq!(
                    mask.visible_count(row),
                    want,
                    "q={q} c={c} gen {j}"
                );
            }
            // beacon rows see question + earlier beacons + their window + self
            for (slot, kind) in layout.slots.iter().enumerate() {
                if let SlotKind::Beacon(m) = kind {
                    assert_eq!(mask.visible_count(slot), q + (m - 1) + c + 1, "beacon {m}");
                }
            }
        }
    }

    #[test]
    fn mask_hides_prior_windows_from_generation_rows() {
        let (layout, mask) = build_breadcrumbs_mask(2, 6, 2);
        // x4 (window 2) must not see x0..x3 (windows 0,1) but must see both beacons
        let x4 = layout.gen_slot[4];
        for j in 0..4 {
            assert!(!mask.allows(x4, layout.gen_slot[j]), "x4 sees evicted x{j}");
        }
        for (slot, kind) in layout.slots.iter().enumerate() {
            match kind {
                SlotKind::Beacon(_) | SlotKind::Question(_) => {
                    assert!(mask.allows(x4, slot), "x4 blind to surviving slot {slot}")
                }
                _ => {}
            }
        }
    }

    #[test]
    fn budget_formula_hand_values() {
        assert_eq!(budget_at(50, 8, 0), 58);
        assert_eq!(budget_at(50, 8, 7), 58);
        assert_eq!(budget_at(50, 8, 8), 59);
        assert_eq!(budget_at(50, 8, 80), 68);
        assert_eq!(budget_at(10, 2, 5), 14);
    }
}

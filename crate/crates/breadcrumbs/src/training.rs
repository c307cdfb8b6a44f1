//! Teacher PPO training, student KL distillation (joint and two-step), and
//! trajectory persistence with per-token top-k teacher distributions.
//!
//! The teacher generates with a plain growing cache.  Students never sample
//! during training: they re-read teacher trajectories through the interleaved
//! beacon layout and masked full forward, which reproduces compressed
//! decoding bit for bit (see the compression module).

use crate::compression::{self, build_breadcrumbs_mask, CompressionRule, Limits, Mode};
use crate::error::Error;
use crate::mask::AttentionMask;
use crate::model::{masked_log_softmax, PolicyModel, Role};
use crate::optim::{clip_global_norm, global_grad_norm};
use crate::tasks::{self, RewardLevel, TaskConfig, TaskInstance};
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId, Vocabulary};
use crate::{AdamW, AdamWConfig, Result, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Train-split instance seeds start here; test sets use small seeds, so the
/// two ranges can never collide.
pub const TRAIN_SEED_BASE: u64 = 1 << 32;

/// Warmup draws from a distinct index range inside the train split.
const WARMUP_INDEX_BASE: u64 = 1 << 20;

/// splitmix64-style mixer for deriving independent per-episode RNG seeds.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Task sampler with disjoint train/test seed ranges.
#[derive(Clone, Debug)]
pub struct TaskEnv {
    pub config: TaskConfig,
}

impl TaskEnv {
    pub fn new(config: TaskConfig) -> Self {
        Self { config }
    }

    pub fn train_instance(&self, index: u64) -> Result<TaskInstance> {
        tasks::generate(&self.config, TRAIN_SEED_BASE + index)
    }

    pub fn test_set(&self, n: usize) -> Result<Vec<TaskInstance>> {
        tasks::generate_batch(&self.config, 0, n)
    }
}

// ---------------------------------------------------------------------------
// trajectories

/// One persisted episode: everything a later distillation pass needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_ids: Vec<TokenId>,
    pub gen_ids: Vec<TokenId>,
    /// Per generated token: (id, log-probability) of the teacher's sampling
    /// distribution, sorted by descending probability.
    pub topk: Vec<Vec<(TokenId, f32)>>,
    pub reward_level: RewardLevel,
    pub reward: f32,
    pub checkpoint_tag: String,
}

impl Trajectory {
    /// Mean over tokens of the stored probability mass Σ exp(logp).
    pub fn stored_mass_mean(&self) -> f32 {
        if self.topk.is_empty() {
            return 0.0;
        }
        let s: f32 = self
            .topk
            .iter()
            .map(|t| t.iter().map(|&(_, lp)| lp.exp()).sum::<f32>())
            .sum();
        s / self.topk.len() as f32
    }
}

/// Trajectory plus the PPO-only sampling records.
#[derive(Debug, Clone)]
pub struct Episode {
    pub traj: Trajectory,
    /// Per generated token: log-probability of the sampled token under the
    /// behaviour policy (temperature 1, beacon masked).
    pub logp_old: Vec<f32>,
}

fn topk_from_logp(logp: &[f32], k: usize) -> Vec<(TokenId, f32)> {
    let mut idx: Vec<usize> = (0..logp.len()).filter(|&i| logp[i].is_finite()).collect();
    idx.sort_by(|&a, &b| {
        logp[b].partial_cmp(&logp[a]).expect("finite").then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i as TokenId, logp[i])).collect()
}

/// Sample one episode from the uncompressed policy at temperature 1 and
/// score it.  Values are not computed here; the PPO update reads them from
/// the pre-update critic, which is identical to the sampling-time critic.
pub fn rollout_episode(
    actor: &PolicyModel,
    instance: &TaskInstance,
    vocab: &Vocabulary,
    max_new_tokens: usize,
    top_k: usize,
    tag: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let prompt_ids = vocab.tokenize(&instance.prompt_text)?;
    let q_len = prompt_ids.len();
    let max_pos = actor.config.max_positions;
    if q_len + 1 >= max_pos {
        return Err(Error::Training(format!(
            "prompt of {q_len} tokens leaves no room under max_positions {max_pos}"
        )));
    }
    let limits = Limits {
        max_cache_entries: usize::MAX,
        max_new_tokens: max_new_tokens.min(max_pos - q_len),
    };
    let mut logp_old = Vec::new();
    let mut topk = Vec::new();
    let mut observer = |_i: usize, logits: &[f32], token: TokenId| {
        let logp = masked_log_softmax(logits, &[vocab::BEACON]);
        logp_old.push(logp[token as usize]);
        topk.push(topk_from_logp(&logp, top_k));
    };
    let rule = CompressionRule::new(Mode::None, 2)?;
    let result =
        compression::generate(actor, &prompt_ids, &rule, &limits, 1.0, rng, Some(&mut observer))?;
    let text = vocab.detokenize(&result.tokens)?;
    let reward_level = tasks::score(instance, &text);
    let traj = Trajectory {
        prompt_ids,
        gen_ids: result.tokens,
        topk,
        reward_level,
        reward: reward_level.value(),
        checkpoint_tag: tag.to_string(),
    };
    Ok(Episode { traj, logp_old })
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub actor_lr: f32,
    pub critic_lr: f32,
    pub clip_ratio: f32,
    pub epochs: usize,
    /// Trajectories per optimizer step within an epoch.
    pub minibatch: usize,
    /// Trajectories sampled per training step.
    pub batch: usize,
    pub gamma: f32,
    pub gae_lambda: f32,
    pub entropy_coef: f32,
    pub value_coef: f32,
    pub clip_range_value: f32,
    pub max_grad_norm: f32,
    pub normalize_advantages: bool,
    pub weight_decay: f32,
    /// Generation cap during training rollouts.
    pub max_new_tokens: usize,
    /// Teacher distribution entries stored per token.
    pub top_k: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-6,
            critic_lr: 1e-5,
            clip_ratio: 0.2,
            epochs: 1,
            minibatch: 256,
            batch: 256,
            gamma: 1.0,
            gae_lambda: 1.0,
            entropy_coef: 0.001,
            value_coef: 0.5,
            clip_range_value: 0.5,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            weight_decay: 0.01,
            max_new_tokens: 128,
            top_k: 100,
        }
    }
}

impl PpoConfig {
    /// Desk-scale settings for the small from-scratch models.
    pub fn toy() -> Self {
        Self {
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            minibatch: 16,
            batch: 16,
            max_new_tokens: 32,
            top_k: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("clip_ratio", self.clip_ratio),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("value_coef", self.value_coef),
            ("clip_range_value", self.clip_range_value),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::Config("entropy_coef must be non-negative".into()));
        }
        if self.clip_ratio >= 1.0 {
            return Err(Error::Config("clip_ratio must be < 1".into()));
        }
        if self.epochs == 0 || self.batch == 0 || self.minibatch == 0 {
            return Err(Error::Config("epochs, batch, minibatch must be positive".into()));
        }
        if self.max_new_tokens == 0 || self.top_k == 0 {
            return Err(Error::Config("max_new_tokens and top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimation over a terminal-reward episode, with
/// V(terminal) = 0.  Returns (advantages, value targets).  At gamma = 1,
/// lambda = 1 the advantage at every token is reward-to-go minus value.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    gamma: f32,
    lam: f32,
) -> (Vec<f32>, Vec<f32>) {
    let g = rewards.len();
    assert_eq!(values.len(), g, "one value per token");
    let mut adv = vec![0.0f32; g];
    let mut next_adv = 0.0f32;
    let mut next_value = 0.0f32;
    for i in (0..g).rev() {
        let delta = rewards[i] + gamma * next_value - values[i];
        next_adv = delta + gamma * lam * next_adv;
        adv[i] = next_adv;
        next_value = values[i];
    }
    let returns: Vec<f32> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PpoUpdateStats {
    pub actor_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub actor_grad_norm: f32,
    pub critic_grad_norm: f32,
    pub clip_fraction: f32,
    pub mean_value: f32,
    pub n_tokens: usize,
}

struct GradAccum {
    bufs: Vec<Vec<f32>>,
}

impl GradAccum {
    fn new(sizes: &[usize]) -> Self {
        Self { bufs: sizes.iter().map(|&n| vec![0.0f32; n]).collect() }
    }

    fn add_from_tape(&mut self, tape: &Tape, handles: &[Tensor]) {
        for (buf, &h) in self.bufs.iter_mut().zip(handles) {
            if let Some(g) = tape.grad(h) {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
    }

    /// Clip to the max norm, apply the optimizer, and reset to zero.
    fn step(&mut self, model: &mut PolicyModel, opt: &mut AdamW, max_norm: f32) -> Result<f32> {
        let pre = clip_global_norm(&mut self.bufs, max_norm);
        if !pre.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm {pre}")));
        }
        {
            let mut params = model.params_mut()?;
            let mut param_slices: Vec<&mut [f32]> =
                params.iter_mut().map(|p| p.as_mut_slice()).collect();
            let grad_slices: Vec<&[f32]> = self.bufs.iter().map(|b| b.as_slice()).collect();
            opt.step(&mut param_slices, &grad_slices)?;
        }
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(pre)
    }
}

/// A no-grad constant row with -inf at the beacon column, used to reproduce
/// the sampling-time mask inside tape losses.
fn beacon_mask_row(tape: &mut Tape, vocab_size: usize) -> Result<Tensor> {
    let mut row = vec![0.0f32; vocab_size];
    row[vocab::BEACON as usize] = f32::NEG_INFINITY;
    tape.leaf(row, &[vocab_size], false)
}

/// One PPO update over a batch of sampled episodes.  Advantages use the
/// pre-update critic; actor and critic are updated with separate optimizers;
/// losses are token-mean pooled across each minibatch.
pub fn ppo_update(
    actor: &mut PolicyModel,
    critic: &mut PolicyModel,
    actor_opt: &mut AdamW,
    critic_opt: &mut AdamW,
    episodes: &[Episode],
    cfg: &PpoConfig,
) -> Result<PpoUpdateStats> {
    cfg.validate()?;
    if critic.role != Role::Critic {
        return Err(Error::Training("value model must have the critic role".into()));
    }
    let episodes: Vec<&Episode> =
        episodes.iter().filter(|e| !e.traj.gen_ids.is_empty()).collect();
    if episodes.is_empty() {
        return Err(Error::Training("no non-empty episodes in batch".into()));
    }

    // Phase A: sampling-time values -> advantages and value targets.
    let mut values_old: Vec<Vec<f32>> = Vec::with_capacity(episodes.len());
    let mut advantages: Vec<Vec<f32>> = Vec::with_capacity(episodes.len());
    let mut returns: Vec<Vec<f32>> = Vec::with_capacity(episodes.len());
    let mut mean_value = 0.0f32;
    let mut n_tokens = 0usize;
    for ep in &episodes {
        let (tokens, rows) = episode_rows(&ep.traj);
        let mask = AttentionMask::causal(tokens.len());
        let mut tape = Tape::new();
        let out = critic.forward_full(&mut tape, &tokens, &mask)?;
        let vt = out.values.ok_or_else(|| {
            Error::Training("critic forward produced no values".into())
        })?;
        let vdata = tape.data(vt);
        let vals: Vec<f32> = rows.iter().map(|&r| vdata[r]).collect();
        let mut rewards = vec![0.0f32; vals.len()];
        *rewards.last_mut().expect("non-empty") = ep.traj.reward;
        let (adv, ret) = compute_gae(&rewards, &vals, cfg.gamma, cfg.gae_lambda);
        mean_value += vals.iter().sum::<f32>();
        n_tokens += vals.len();
        values_old.push(vals);
        advantages.push(adv);
        returns.push(ret);
    }
    mean_value /= n_tokens as f32;

    // A batch where every episode earned the same reward, and that reward is
    // already matched by the critic, carries no policy signal: the advantages
    // reduce to critic estimation error, and an actor step on them just
    // random-walks the policy away from wherever it is — in practice an
    // entropy collapse onto instance-independent answers during long
    // rewardless stretches.  Fit the critic on such batches but leave the
    // actor alone.  (A constant reward the critic has NOT caught up with is
    // still signal: it pushes every sampled action up or down together.)
    let reward_signal = {
        let rs: Vec<f32> = episodes.iter().map(|e| e.traj.reward).collect();
        let m = rs.iter().sum::<f32>() / rs.len() as f32;
        rs.iter().any(|r| (r - m).abs() > 1e-6) || (m - mean_value).abs() > 0.02
    };
    if cfg.normalize_advantages && n_tokens >= 2 && reward_signal {
        let flat: Vec<f32> = advantages.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f32>() / flat.len() as f32;
        let var =
            flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / flat.len() as f32;
        let denom = var.sqrt() + 1e-8;
        for adv in &mut advantages {
            for a in adv.iter_mut() {
                *a = (*a - mean) / denom;
            }
        }
    }

    // Phase B: clipped-surrogate actor and clipped value loss, one optimizer
    // step per minibatch per epoch.
    let mut actor_acc = GradAccum::new(&actor.param_sizes());
    let mut critic_acc = GradAccum::new(&critic.param_sizes());
    let mut stats = PpoUpdateStats { mean_value, n_tokens, ..Default::default() };
    let mut loss_tokens = 0usize;
    let mut clipped_tokens = 0usize;
    let order: Vec<usize> = (0..episodes.len()).collect();
    for _epoch in 0..cfg.epochs {
        for chunk in order.chunks(cfg.minibatch) {
            let chunk_tokens: usize =
                chunk.iter().map(|&i| episodes[i].traj.gen_ids.len()).sum();
            let inv = 1.0 / chunk_tokens as f32;
            for &i in chunk {
                let ep = episodes[i];
                let traj = &ep.traj;
                let g_len = traj.gen_ids.len();
                let (tokens, rows) = episode_rows(traj);
                let mask = AttentionMask::causal(tokens.len());
                let gen_cols: Vec<usize> =
                    traj.gen_ids.iter().map(|&t| t as usize).collect();

                // actor tape; skipped entirely on signal-free batches
                if reward_signal {
                    let mut tape = Tape::new();
                    let out = actor.forward_full(&mut tape, &tokens, &mask)?;
                    let dec = tape.index_rows(out.logits, &rows)?;
                    let brow = beacon_mask_row(&mut tape, actor.config.vocab_size)?;
                    let masked = tape.add_row_broadcast(dec, brow)?;
                    let logp_all = tape.log_softmax_rows(masked);
                    let new_logp = tape.take_per_row(logp_all, &gen_cols)?;
                    let old_logp = tape.leaf(ep.logp_old.clone(), &[g_len], false)?;
                    let adv = tape.leaf(advantages[i].clone(), &[g_len], false)?;
                    let diff = tape.sub(new_logp, old_logp)?;
                    let ratio = tape.exp(diff);
                    let surr1 = tape.mul(ratio, adv)?;
                    let clipped =
                        tape.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
                    let surr2 = tape.mul(clipped, adv)?;
                    let objective = tape.min_ew(surr1, surr2)?;
                    let neg_obj = tape.scale(objective, -1.0);
                    let ent = tape.entropy_rows(masked);
                    let ent_term = tape.scale(ent, -cfg.entropy_coef);
                    let per_token = tape.add(neg_obj, ent_term)?;
                    let actor_sum = tape.sum_all(per_token);
                    let actor_loss_sum = tape.item(actor_sum)?;
                    if !actor_loss_sum.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite actor loss on episode {i} (tag {})",
                            traj.checkpoint_tag
                        )));
                    }
                    for &r in tape.data(ratio) {
                        if (r - 1.0).abs() > cfg.clip_ratio {
                            clipped_tokens += 1;
                        }
                    }
                    stats.entropy += tape.data(ent).iter().sum::<f32>();
                    stats.actor_loss += actor_loss_sum * inv;
                    let scaled = tape.scale(actor_sum, inv);
                    tape.backward(scaled)?;
                    actor_acc.add_from_tape(&tape, &out.param_handles);
                }

                // critic tape
                let mut tape = Tape::new();
                let out = critic.forward_full(&mut tape, &tokens, &mask)?;
                let vt = out.values.expect("critic role checked above");
                let v_dec = tape.index_rows(vt, &rows)?;
                let v_old = tape.leaf(values_old[i].clone(), &[g_len, 1], false)?;
                let ret = tape.leaf(returns[i].clone(), &[g_len, 1], false)?;
                let v_diff = tape.sub(v_dec, v_old)?;
                let v_diff_c =
                    tape.clamp(v_diff, -cfg.clip_range_value, cfg.clip_range_value);
                let v_clip = tape.add(v_old, v_diff_c)?;
                let e1 = tape.sub(v_dec, ret)?;
                let sq1 = tape.mul(e1, e1)?;
                let e2 = tape.sub(v_clip, ret)?;
                let sq2 = tape.mul(e2, e2)?;
                let worst = tape.max_ew(sq1, sq2)?;
                let v_sum = tape.sum_all(worst);
                let v_scaled = tape.scale(v_sum, 0.5 * cfg.value_coef * inv);
                let v_loss = tape.item(v_scaled)?;
                if !v_loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite value loss on episode {i} (tag {})",
                        traj.checkpoint_tag
                    )));
                }
                stats.value_loss += v_loss;
                tape.backward(v_scaled)?;
                critic_acc.add_from_tape(&tape, &out.param_handles);
                loss_tokens += g_len;
            }
            if reward_signal {
                stats.actor_grad_norm =
                    actor_acc.step(actor, actor_opt, cfg.max_grad_norm)?;
            }
            stats.critic_grad_norm =
                critic_acc.step(critic, critic_opt, cfg.max_grad_norm)?;
        }
    }
    stats.entropy /= loss_tokens as f32;
    stats.clip_fraction = clipped_tokens as f32 / loss_tokens as f32;
    let n_updates = (cfg.epochs * order.len().div_ceil(cfg.minibatch)) as f32;
    stats.actor_loss /= n_updates;
    stats.value_loss /= n_updates;
    Ok(stats)
}

/// Token sequence (prompt ++ generation) and the row indices whose logits
/// decided each generated token.
fn episode_rows(traj: &Trajectory) -> (Vec<TokenId>, Vec<usize>) {
    let q = traj.prompt_ids.len();
    let mut tokens = Vec::with_capacity(q + traj.gen_ids.len());
    tokens.extend_from_slice(&traj.prompt_ids);
    tokens.extend_from_slice(&traj.gen_ids);
    let rows: Vec<usize> = (0..traj.gen_ids.len()).map(|i| q - 1 + i).collect();
    (tokens, rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct PpoStepStats {
    pub step: usize,
    pub mean_reward: f32,
    /// Fraction of episodes with full reward.
    pub accuracy: f32,
    /// Fraction with at least a well-formed answer.
    pub format_rate: f32,
    pub mean_len: f32,
    pub stop_rate: f32,
    pub stored_mass_mean: f32,
    #[serde(flatten)]
    pub update: PpoUpdateStats,
}

pub struct PpoTrainer {
    pub actor: PolicyModel,
    pub critic: PolicyModel,
    pub cfg: PpoConfig,
    pub env: TaskEnv,
    pub vocab: Vocabulary,
    actor_opt: AdamW,
    critic_opt: AdamW,
    seed: u64,
    pub steps_done: usize,
    pub episodes_sampled: u64,
}

impl PpoTrainer {
    /// The critic starts from the actor's weights with a fresh scalar head.
    pub fn new(
        actor: PolicyModel,
        env: TaskEnv,
        vocab: Vocabulary,
        cfg: PpoConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let critic = actor.to_role(Role::Critic, mix_seed(seed, 0xC817, 0));
        let actor_opt = AdamW::new(
            AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::with_lr(cfg.actor_lr) },
            &actor.param_sizes(),
        );
        let critic_opt = AdamW::new(
            AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::with_lr(cfg.critic_lr) },
            &critic.param_sizes(),
        );
        Ok(Self {
            actor,
            critic,
            cfg,
            env,
            vocab,
            actor_opt,
            critic_opt,
            seed,
            steps_done: 0,
            episodes_sampled: 0,
        })
    }

    /// Sample a batch from the current policy, update, and hand the episodes
    /// back for distillation or persistence.
    pub fn step(&mut self) -> Result<(PpoStepStats, Vec<Episode>)> {
        let tag = format!("step{:05}", self.steps_done);
        let base_index = self.episodes_sampled;
        let instances: Vec<TaskInstance> = (0..self.cfg.batch as u64)
            .map(|i| self.env.train_instance(base_index + i))
            .collect::<Result<_>>()?;
        let seed = self.seed;
        let step = self.steps_done as u64;
        let episodes: Vec<Episode> = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step, i as u64));
                rollout_episode(
                    &self.actor,
                    inst,
                    &self.vocab,
                    self.cfg.max_new_tokens,
                    self.cfg.top_k,
                    &tag,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        self.episodes_sampled += self.cfg.batch as u64;

        let update = ppo_update(
            &mut self.actor,
            &mut self.critic,
            &mut self.actor_opt,
            &mut self.critic_opt,
            &episodes,
            &self.cfg,
        )?;

        let n = episodes.len() as f32;
        let stats = PpoStepStats {
            step: self.steps_done,
            mean_reward: episodes.iter().map(|e| e.traj.reward).sum::<f32>() / n,
            accuracy: episodes
                .iter()
                .filter(|e| e.traj.reward_level == RewardLevel::Correct)
                .count() as f32
                / n,
            format_rate: episodes
                .iter()
                .filter(|e| e.traj.reward_level != RewardLevel::WrongOrAbsent)
                .count() as f32
                / n,
            mean_len: episodes.iter().map(|e| e.traj.gen_ids.len() as f32).sum::<f32>() / n,
            stop_rate: episodes
                .iter()
                .filter(|e| e.traj.gen_ids.last() == Some(&vocab::STOP))
                .count() as f32
                / n,
            stored_mass_mean: episodes.iter().map(|e| e.traj.stored_mass_mean()).sum::<f32>()
                / n,
            update,
        };
        self.steps_done += 1;
        Ok((stats, episodes))
    }
}

// ---------------------------------------------------------------------------
// supervised format warmup

/// Teach the answer-tag format before PPO: cross-entropy on answers with the
/// right shape but random values, so reward discovery stays with RL.
pub fn format_warmup(
    actor: &mut PolicyModel,
    opt: &mut AdamW,
    env: &TaskEnv,
    vocab: &Vocabulary,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let mut acc = GradAccum::new(&actor.param_sizes());
    let mut losses = Vec::with_capacity(steps);
    let mut counter = 0u64;
    let lr0 = opt.cfg.lr;
    for step in 0..steps {
        // cosine decay to 10%; the late phase needs small steps to settle
        let frac = step as f32 / steps.max(1) as f32;
        opt.set_lr(lr0 * (0.1 + 0.45 * (1.0 + (std::f32::consts::PI * frac).cos())));
        let mut step_tokens = 0usize;
        let mut step_loss = 0.0f32;
        let mut pending: Vec<(Vec<TokenId>, Vec<TokenId>)> = Vec::with_capacity(batch);
        for b in 0..batch {
            let inst = env.train_instance(WARMUP_INDEX_BASE + counter)?;
            counter += 1;
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xFA11, step as u64 * 1000 + b as u64));
            let answer = tasks::random_format_answer(&inst.payload, &mut rng);
            // On a fixed subset of instances, lead in by restating the two
            // endpoint labels from the question.  This rehearses copying
            // labels out of the prompt — the mechanism the tasks actually
            // need — and because the lead-in is keyed to the instance rather
            // than sampled, the policy keeps a stable mix of short and long
            // completions that survives RL.
            let text = match &inst.payload {
                tasks::TaskPayload::Stargraph { center, target, .. } if target % 2 == 1 => {
                    format!("from {center} to {target}: {answer}")
                }
                _ => answer,
            };
            let prompt_ids = vocab.tokenize(&inst.prompt_text)?;
            let mut target_ids = vocab.tokenize(&text)?;
            target_ids.push(vocab::STOP);
            if prompt_ids.len() + target_ids.len() >= actor.config.max_positions {
                continue;
            }
            step_tokens += target_ids.len();
            pending.push((prompt_ids, target_ids));
        }
        if step_tokens == 0 {
            return Err(Error::Training("warmup batch produced no tokens".into()));
        }
        let inv = 1.0 / step_tokens as f32;
        for (prompt_ids, target_ids) in &pending {
            let q = prompt_ids.len();
            let mut tokens = prompt_ids.clone();
            tokens.extend_from_slice(target_ids);
            let rows: Vec<usize> = (0..target_ids.len()).map(|i| q - 1 + i).collect();
            let cols: Vec<usize> = target_ids.iter().map(|&t| t as usize).collect();
            let mask = AttentionMask::causal(tokens.len());
            let mut tape = Tape::new();
            let out = actor.forward_full(&mut tape, &tokens, &mask)?;
            let dec = tape.index_rows(out.logits, &rows)?;
            let brow = beacon_mask_row(&mut tape, actor.config.vocab_size)?;
            let masked = tape.add_row_broadcast(dec, brow)?;
            let logp = tape.log_softmax_rows(masked);
            let picked = tape.take_per_row(logp, &cols)?;
            let nll_sum = tape.scale(picked, -1.0);
            let loss = tape.sum_all(nll_sum);
            let v = tape.item(loss)?;
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite warmup loss at step {step}")));
            }
            step_loss += v * inv;
            let scaled = tape.scale(loss, inv);
            tape.backward(scaled)?;
            acc.add_from_tape(&tape, &out.param_handles);
        }
        acc.step(actor, opt, 1.0)?;
        losses.push(step_loss);
    }
    opt.set_lr(lr0);
    Ok(losses)
}

// ---------------------------------------------------------------------------
// KL distillation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub student_lr: f32,
    pub ratio_c: usize,
    /// Cap on the stored support actually used per token.
    pub top_k: usize,
    /// Trajectories per distillation step (two-step mode sampling count; in
    /// joint mode each step distills on that step's PPO batch).
    pub batch: usize,
    pub weight_decay: f32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { student_lr: 5e-6, ratio_c: 8, top_k: 100, batch: 256, weight_decay: 0.01 }
    }
}

impl DistillConfig {
    pub fn toy(ratio_c: usize) -> Self {
        Self { student_lr: 3e-4, ratio_c, top_k: 128, batch: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.student_lr > 0.0) {
            return Err(Error::Config("student_lr must be positive".into()));
        }
        if self.ratio_c == 0 || self.top_k == 0 || self.batch == 0 {
            return Err(Error::Config("ratio_c, top_k, batch must be positive".into()));
        }
        Ok(())
    }
}

/// Forward KL(teacher ‖ student) on a shared support, as a tape scalar.
/// `teacher_logp` are stored log-probabilities (renormalized to mass 1 here);
/// `support_logits` are the student's logits gathered on the same ids.
/// Gradient flows only into the student logits.
pub fn kl_on_support(
    tape: &mut Tape,
    teacher_logp: &[f32],
    support_logits: Tensor,
) -> Result<Tensor> {
    let k = teacher_logp.len();
    if k == 0 {
        return Err(Error::Training("empty distillation support".into()));
    }
    if tape.data(support_logits).len() != k {
        return Err(Error::shape(
            "kl_on_support",
            format!("{k} teacher entries vs {} student logits", tape.data(support_logits).len()),
        ));
    }
    // softmax over stored log-probs = renormalization to mass 1
    let mut phat = teacher_logp.to_vec();
    crate::kernels::softmax_row(&mut phat);
    let const_term: f32 =
        phat.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let logq = tape.log_softmax_rows(support_logits);
    let p_leaf = tape.leaf(phat, &[k], false)?;
    let cross = tape.mul(p_leaf, logq)?;
    let cross_sum = tape.sum_all(cross);
    let neg = tape.scale(cross_sum, -1.0);
    tape.add_const_mat(neg, Arc::new(vec![const_term]))
}

/// Token-mean KL for one trajectory, with the student forward run through
/// the interleaved beacon layout and its decode-faithful mask.  Returns the
/// scalar loss and the parameter handles for gradient harvesting.
pub fn kl_distill_loss(
    tape: &mut Tape,
    student: &PolicyModel,
    traj: &Trajectory,
    ratio_c: usize,
    top_k: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let q = traj.prompt_ids.len();
    let g = traj.gen_ids.len();
    if g == 0 {
        return Err(Error::Training("cannot distill an empty trajectory".into()));
    }
    if traj.topk.len() != g {
        return Err(Error::Training(format!(
            "trajectory has {g} tokens but {} top-k lists",
            traj.topk.len()
        )));
    }
    let (layout, mask) = build_breadcrumbs_mask(q, g, ratio_c);
    let tokens = layout.tokens(&traj.prompt_ids, &traj.gen_ids, vocab::BEACON)?;
    let out = student.forward_full(tape, &tokens, &mask)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..g {
        let support = &traj.topk[i][..traj.topk[i].len().min(top_k)];
        if support.is_empty() {
            return Err(Error::Training(format!("empty support at token {i}")));
        }
        let ids: Vec<usize> = support.iter().map(|&(id, _)| id as usize).collect();
        let lps: Vec<f32> = support.iter().map(|&(_, lp)| lp).collect();
        let logits = tape.gather_row_cols(out.logits, layout.prediction_row[i], &ids)?;
        let kl = kl_on_support(tape, &lps, logits)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    let total = acc.expect("g >= 1");
    let mean = tape.scale(total, 1.0 / g as f32);
    Ok((mean, out.param_handles))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DistillStats {
    pub loss: f32,
    pub grad_norm: f32,
    pub n_trajectories: usize,
    pub stored_mass_mean: f32,
}

/// One gradient step of batch-mean distillation loss on the student.
pub fn distill_step(
    student: &mut PolicyModel,
    opt: &mut AdamW,
    trajs: &[&Trajectory],
    cfg: &DistillConfig,
) -> Result<DistillStats> {
    cfg.validate()?;
    let usable: Vec<&&Trajectory> = trajs.iter().filter(|t| !t.gen_ids.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Training("no non-empty trajectories to distill".into()));
    }
    let mut acc = GradAccum::new(&student.param_sizes());
    let mut loss_sum = 0.0f32;
    let mut mass = 0.0f32;
    let inv = 1.0 / usable.len() as f32;
    for traj in &usable {
        let mut tape = Tape::new();
        let (loss, handles) = kl_distill_loss(&mut tape, student, traj, cfg.ratio_c, cfg.top_k)?;
        let v = tape.item(loss)?;
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite distill loss (tag {})",
                traj.checkpoint_tag
            )));
        }
        loss_sum += v * inv;
        mass += traj.stored_mass_mean() * inv;
        let scaled = tape.scale(loss, inv);
        tape.backward(scaled)?;
        acc.add_from_tape(&tape, &handles);
    }
    let grad_norm = global_grad_norm(&acc.bufs);
    {
        let mut params = student.params_mut()?;
        let mut param_slices: Vec<&mut [f32]> =
            params.iter_mut().map(|p| p.as_mut_slice()).collect();
        let grad_slices: Vec<&[f32]> = acc.bufs.iter().map(|b| b.as_slice()).collect();
        opt.step(&mut param_slices, &grad_slices)?;
    }
    Ok(DistillStats {
        loss: loss_sum,
        grad_norm,
        n_trajectories: usable.len(),
        stored_mass_mean: mass,
    })
}

/// Batch-mean distillation loss without any update (held-out tracking).
pub fn eval_distill_loss(
    student: &PolicyModel,
    trajs: &[&Trajectory],
    ratio_c: usize,
    top_k: usize,
) -> Result<f32> {
    let usable: Vec<&&Trajectory> = trajs.iter().filter(|t| !t.gen_ids.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Training("no trajectories to evaluate".into()));
    }
    let mut sum = 0.0f32;
    for traj in &usable {
        let mut tape = Tape::new();
        let (loss, _) = kl_distill_loss(&mut tape, student, traj, ratio_c, top_k)?;
        sum += tape.item(loss)?;
    }
    Ok(sum / usable.len() as f32)
}

/// Token-mean negative log-likelihood of the sampled tokens under the
/// student's compressed view (beacon masked like at sampling time).
pub fn mean_nll_on_trajectories(
    student: &PolicyModel,
    trajs: &[&Trajectory],
    ratio_c: usize,
) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for traj in trajs {
        if traj.gen_ids.is_empty() {
            continue;
        }
        let (layout, mask) =
            build_breadcrumbs_mask(traj.prompt_ids.len(), traj.gen_ids.len(), ratio_c);
        let tokens = layout.tokens(&traj.prompt_ids, &traj.gen_ids, vocab::BEACON)?;
        let mut tape = Tape::new();
        let out = student.forward_full(&mut tape, &tokens, &mask)?;
        let data = tape.data(out.logits);
        let v = student.config.vocab_size;
        for (i, &tok) in traj.gen_ids.iter().enumerate() {
            let row = layout.prediction_row[i];
            let logp = masked_log_softmax(&data[row * v..(row + 1) * v], &[vocab::BEACON]);
            sum -= logp[tok as usize] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Training("no tokens to evaluate".into()));
    }
    Ok((sum / n as f64) as f32)
}

// ---------------------------------------------------------------------------
// joint and two-step drivers

pub struct StudentSlot {
    pub cfg: DistillConfig,
    pub model: PolicyModel,
    opt: AdamW,
    pub last_stats: Option<DistillStats>,
}

impl StudentSlot {
    /// Student initialized from the teacher's current weights (fresh policies
    /// share the base initialization; the beacon embedding row is untrained
    /// either way since the teacher never feeds it).
    pub fn new(teacher: &PolicyModel, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let model = teacher.to_role(Role::Student, 0);
        let opt = AdamW::new(
            AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::with_lr(cfg.student_lr) },
            &model.param_sizes(),
        );
        Ok(Self { cfg, model, opt, last_stats: None })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JointStepStats {
    pub ppo: PpoStepStats,
    pub distill: Vec<DistillStats>,
}

/// Joint RL-distillation: each step runs one PPO teacher step and then one
/// distillation step per student on exactly that step's trajectories.
pub struct JointTrainer {
    pub ppo: PpoTrainer,
    pub students: Vec<StudentSlot>,
    pub store: Option<TrajectoryStore>,
}

impl JointTrainer {
    pub fn new(
        ppo: PpoTrainer,
        student_cfgs: Vec<DistillConfig>,
        store: Option<TrajectoryStore>,
    ) -> Result<Self> {
        let students = student_cfgs
            .into_iter()
            .map(|cfg| StudentSlot::new(&ppo.actor, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { ppo, students, store })
    }

    pub fn step(&mut self) -> Result<JointStepStats> {
        let (ppo_stats, episodes) = self.ppo.step()?;
        if let Some(store) = &mut self.store {
            for ep in &episodes {
                store.append(&ep.traj)?;
            }
        }
        let trajs: Vec<&Trajectory> = episodes.iter().map(|e| &e.traj).collect();
        let mut distill = Vec::with_capacity(self.students.len());
        for slot in &mut self.students {
            let st = distill_step(&mut slot.model, &mut slot.opt, &trajs, &slot.cfg)?;
            slot.last_stats = Some(st);
            distill.push(st);
        }
        Ok(JointStepStats { ppo: ppo_stats, distill })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TwoStepStats {
    pub step: usize,
    pub mean_reward: f32,
    pub distill: Vec<DistillStats>,
}

/// Two-step baseline: the teacher is fixed at its final checkpoint; fresh
/// trajectories are sampled from it with the same per-step budget as joint
/// mode, and only the students learn.
pub struct TwoStepTrainer {
    pub teacher: PolicyModel,
    pub students: Vec<StudentSlot>,
    pub env: TaskEnv,
    pub vocab: Vocabulary,
    pub store: Option<TrajectoryStore>,
    batch: usize,
    max_new_tokens: usize,
    top_k: usize,
    seed: u64,
    pub steps_done: usize,
    pub episodes_sampled: u64,
}

impl TwoStepTrainer {
    pub fn new(
        teacher: PolicyModel,
        student_cfgs: Vec<DistillConfig>,
        env: TaskEnv,
        vocab: Vocabulary,
        batch: usize,
        max_new_tokens: usize,
        top_k: usize,
        seed: u64,
        store: Option<TrajectoryStore>,
    ) -> Result<Self> {
        let students = student_cfgs
            .into_iter()
            .map(|cfg| StudentSlot::new(&teacher, cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            teacher,
            students,
            env,
            vocab,
            store,
            batch,
            max_new_tokens,
            top_k,
            seed,
            steps_done: 0,
            episodes_sampled: 0,
        })
    }

    pub fn step(&mut self) -> Result<TwoStepStats> {
        let tag = "final".to_string();
        let base_index = self.episodes_sampled;
        let instances: Vec<TaskInstance> = (0..self.batch as u64)
            .map(|i| self.env.train_instance(base_index + i))
            .collect::<Result<_>>()?;
        let seed = self.seed;
        let step = self.steps_done as u64;
        let episodes: Vec<Episode> = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x25EF ^ step, i as u64));
                rollout_episode(
                    &self.teacher,
                    inst,
                    &self.vocab,
                    self.max_new_tokens,
                    self.top_k,
                    &tag,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        self.episodes_sampled += self.batch as u64;
        if let Some(store) = &mut self.store {
            for ep in &episodes {
                store.append(&ep.traj)?;
            }
        }
        let trajs: Vec<&Trajectory> = episodes.iter().map(|e| &e.traj).collect();
        let mut distill = Vec::with_capacity(self.students.len());
        for slot in &mut self.students {
            let st = distill_step(&mut slot.model, &mut slot.opt, &trajs, &slot.cfg)?;
            slot.last_stats = Some(st);
            distill.push(st);
        }
        let stats = TwoStepStats {
            step: self.steps_done,
            mean_reward: episodes.iter().map(|e| e.traj.reward).sum::<f32>()
                / episodes.len() as f32,
            distill,
        };
        self.steps_done += 1;
        Ok(stats)
    }
}

// ---------------------------------------------------------------------------
// trajectory store

const STORE_MAGIC: &[u8; 4] = b"BTRJ";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoreSidecar {
    format_version: u32,
    n_records: usize,
}

/// Append-only binary trajectory log with a JSON sidecar manifest.
pub struct TrajectoryStore {
    writer: BufWriter<std::fs::File>,
    path: PathBuf,
    n_records: usize,
}

impl TrajectoryStore {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = BufWriter::new(std::fs::File::create(path)?);
        writer.write_all(STORE_MAGIC)?;
        writer.write_all(&STORE_VERSION.to_le_bytes())?;
        Ok(Self { writer, path: path.to_path_buf(), n_records: 0 })
    }

    pub fn append(&mut self, t: &Trajectory) -> Result<()> {
        if t.topk.len() != t.gen_ids.len() {
            return Err(Error::Training("one top-k list per generated token".into()));
        }
        let w = &mut self.writer;
        w.write_all(&(t.prompt_ids.len() as u32).to_le_bytes())?;
        for &id in &t.prompt_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&(t.gen_ids.len() as u32).to_le_bytes())?;
        for &id in &t.gen_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for list in &t.topk {
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for &(id, lp) in list {
                w.write_all(&id.to_le_bytes())?;
                w.write_all(&lp.to_le_bytes())?;
            }
        }
        w.write_all(&t.reward.to_le_bytes())?;
        let level = match t.reward_level {
            RewardLevel::WrongOrAbsent => 0u8,
            RewardLevel::FormatOkValueWrong => 1,
            RewardLevel::Correct => 2,
        };
        w.write_all(&[level])?;
        let tag = t.checkpoint_tag.as_bytes();
        w.write_all(&(tag.len() as u32).to_le_bytes())?;
        w.write_all(tag)?;
        self.n_records += 1;
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    /// Flush the log and write the sidecar manifest.
    pub fn finalize(mut self) -> Result<()> {
        self.writer.flush()?;
        let sidecar = StoreSidecar { format_version: STORE_VERSION, n_records: self.n_records };
        let spath = sidecar_path(&self.path);
        let f = std::fs::File::create(spath)?;
        serde_json::to_writer_pretty(BufWriter::new(f), &sidecar)?;
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STORE_MAGIC {
        return Err(Error::Training("bad trajectory store magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != STORE_VERSION {
        return Err(Error::Training("unsupported trajectory store version".into()));
    }
    let mut out = Vec::new();
    loop {
        // records until EOF; a clean EOF can only occur at a record boundary
        let mut first = [0u8; 4];
        match r.read_exact(&mut first) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let prompt_len = u32::from_le_bytes(first) as usize;
        let mut prompt_ids = Vec::with_capacity(prompt_len);
        for _ in 0..prompt_len {
            prompt_ids.push(read_u32(&mut r)?);
        }
        let gen_len = read_u32(&mut r)? as usize;
        let mut gen_ids = Vec::with_capacity(gen_len);
        for _ in 0..gen_len {
            gen_ids.push(read_u32(&mut r)?);
        }
        let mut topk = Vec::with_capacity(gen_len);
        for _ in 0..gen_len {
            let k = read_u32(&mut r)? as usize;
            let mut list = Vec::with_capacity(k);
            for _ in 0..k {
                let id = read_u32(&mut r)?;
                let lp = f32::from_le_bytes(read_4(&mut r)?);
                list.push((id, lp));
            }
            topk.push(list);
        }
        let reward = f32::from_le_bytes(read_4(&mut r)?);
        let mut lvl = [0u8; 1];
        r.read_exact(&mut lvl)?;
        let reward_level = match lvl[0] {
            0 => RewardLevel::WrongOrAbsent,
            1 => RewardLevel::FormatOkValueWrong,
            2 => RewardLevel::Correct,
            x => return Err(Error::Training(format!("bad reward level byte {x}"))),
        };
        let tag_len = read_u32(&mut r)? as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag)?;
        let checkpoint_tag = String::from_utf8(tag)
            .map_err(|_| Error::Training("trajectory tag is not UTF-8".into()))?;
        out.push(Trajectory { prompt_ids, gen_ids, topk, reward_level, reward, checkpoint_tag });
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_4(r)?))
}

fn read_4(r: &mut impl Read) -> Result<[u8; 4]> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Read the sidecar record count, if it exists.
pub fn read_store_record_count(path: &Path) -> Result<usize> {
    let f = std::fs::File::open(sidecar_path(path))?;
    let sc: StoreSidecar = serde_json::from_reader(BufReader::new(f))?;
    Ok(sc.n_records)
}

/// Write stats as JSON lines for later inspection.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Read JSON-lines stats back (used by `report`).
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionEncoding};
    use crate::tasks::TaskKind;

    fn tiny_model(vocab_size: usize, seed: u64) -> PolicyModel {
        let cfg = ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_positions: 256,
            position_encoding: PositionEncoding::Rotary,
            rope_base: 10000.0,
            rms_eps: 1e-5,
            init_std: 0.02,
        };
        PolicyModel::new(cfg, Role::Teacher, seed).unwrap()
    }

    fn toy_vocab_model(seed: u64) -> (Vocabulary, PolicyModel) {
        let vocab = Vocabulary::core();
        let model = tiny_model(vocab.len(), seed);
        (vocab, model)
    }

    #[test]
    fn gae_degenerate_case_is_reward_minus_value() {
        let rewards = [0.0, 0.0, 0.0, 1.0];
        let values = [0.3, -0.2, 0.5, 0.1];
        let (adv, ret) = compute_gae(&rewards, &values, 1.0, 1.0);
        for (a, v) in adv.iter().zip(&values) {
            assert!((a - (1.0 - v)).abs() < 1e-6);
        }
        for r in ret {
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gae_general_hand_case() {
        // gamma 0.5, lambda 0.5; rewards [0,1], values [0.2, 0.4]
        // delta1 = 1 + 0 - 0.4 = 0.6;  adv1 = 0.6
        // delta0 = 0 + 0.5*0.4 - 0.2 = 0.0;  adv0 = 0 + 0.25*0.6 = 0.15
        let (adv, ret) = compute_gae(&[0.0, 1.0], &[0.2, 0.4], 0.5, 0.5);
        assert!((adv[1] - 0.6).abs() < 1e-6);
        assert!((adv[0] - 0.15).abs() < 1e-6);
        assert!((ret[0] - 0.35).abs() < 1e-6);
        assert!((ret[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_hand_case_and_identity() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 0.0], &[2], true).unwrap();
        let kl = kl_on_support(&mut tape, &[0.75f32.ln(), 0.25f32.ln()], logits).unwrap();
        let v = tape.item(kl).unwrap();
        let want = 0.75 * 1.5f32.ln() + 0.25 * 0.5f32.ln();
        assert!((v - want).abs() < 1e-6, "got {v}, want {want}");
        assert!((v - 0.130812).abs() < 1e-5);

        // identical distributions -> zero
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.75f32.ln(), 0.25f32.ln()], &[2], true).unwrap();
        let kl = kl_on_support(&mut tape, &[0.75f32.ln(), 0.25f32.ln()], logits).unwrap();
        assert!(tape.item(kl).unwrap().abs() < 1e-6);
    }

    #[test]
    fn kl_gradient_is_q_minus_p() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.2, -0.4, 0.9], &[3], true).unwrap();
        let teacher = [0.5f32.ln(), 0.3f32.ln(), 0.2f32.ln()];
        let kl = kl_on_support(&mut tape, &teacher, logits).unwrap();
        tape.backward(kl).unwrap();
        let g = tape.grad(logits).unwrap().to_vec();
        // q = softmax(logits)
        let mut q = vec![0.2, -0.4, 0.9];
        crate::kernels::softmax_row(&mut q);
        for i in 0..3 {
            let want = q[i] - [0.5, 0.3, 0.2][i];
            assert!((g[i] - want).abs() < 1e-6, "grad[{i}] = {}, want {want}", g[i]);
        }
    }

    #[test]
    fn kl_renormalizes_partial_mass() {
        // stored mass 0.5, renormalized to [0.5, 0.5]; student uniform -> 0
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![1.0, 1.0], &[2], true).unwrap();
        let kl = kl_on_support(&mut tape, &[0.25f32.ln(), 0.25f32.ln()], logits).unwrap();
        assert!(tape.item(kl).unwrap().abs() < 1e-6);
    }

    fn bandit_episode(
        actor: &PolicyModel,
        prompt: &[TokenId],
        good: TokenId,
        rng: &mut ChaCha8Rng,
    ) -> Episode {
        let limits = Limits { max_cache_entries: usize::MAX, max_new_tokens: 1 };
        let rule = CompressionRule::new(Mode::None, 2).unwrap();
        let mut logp_old = Vec::new();
        let mut topk = Vec::new();
        let mut obs = |_i: usize, logits: &[f32], token: TokenId| {
            let lp = masked_log_softmax(logits, &[vocab::BEACON]);
            logp_old.push(lp[token as usize]);
            topk.push(topk_from_logp(&lp, 8));
        };
        let r = compression::generate(actor, prompt, &rule, &limits, 1.0, rng, Some(&mut obs))
            .unwrap();
        let correct = r.tokens[0] == good;
        Episode {
            traj: Trajectory {
                prompt_ids: prompt.to_vec(),
                gen_ids: r.tokens,
                topk,
                reward_level: if correct {
                    RewardLevel::Correct
                } else {
                    RewardLevel::WrongOrAbsent
                },
                reward: if correct { 1.0 } else { 0.0 },
                checkpoint_tag: "bandit".into(),
            },
            logp_old,
        }
    }

    #[test]
    fn bandit_policy_concentrates_on_rewarded_action() {
        let mut actor = tiny_model(8, 3);
        let mut critic = actor.to_role(Role::Critic, 4);
        let cfg = PpoConfig {
            actor_lr: 1e-2,
            critic_lr: 3e-2,
            batch: 8,
            minibatch: 8,
            max_new_tokens: 1,
            top_k: 8,
            weight_decay: 0.0,
            ..PpoConfig::default()
        };
        let mut actor_opt =
            AdamW::new(AdamWConfig::with_lr(cfg.actor_lr), &actor.param_sizes());
        let mut critic_opt =
            AdamW::new(AdamWConfig::with_lr(cfg.critic_lr), &critic.param_sizes());
        let prompt = [5u32];
        let good: TokenId = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..150 {
            let episodes: Vec<Episode> =
                (0..cfg.batch).map(|_| bandit_episode(&actor, &prompt, good, &mut rng)).collect();
            ppo_update(&mut actor, &mut critic, &mut actor_opt, &mut critic_opt, &episodes, &cfg)
                .unwrap();
        }
        let mut cache = actor.begin_cache();
        let out = actor.encode_prompt(&prompt, &mut cache).unwrap();
        let lp = masked_log_softmax(&out.logits, &[vocab::BEACON]);
        let p_good = lp[good as usize].exp();
        assert!(p_good > 0.9, "P(rewarded action) = {p_good}");
    }

    #[test]
    fn zero_advantage_batch_leaves_actor_unchanged() {
        let mut actor = tiny_model(8, 5);
        let mut critic = actor.to_role(Role::Critic, 6);
        // rig the value head so V(s) == 1.0 everywhere: zero weights, bias 1
        {
            let names: Vec<String> =
                critic.params().iter().map(|p| p.name.clone()).collect();
            let mut params = critic.params_mut().unwrap();
            for (name, data) in names.iter().zip(params.iter_mut()) {
                if name == "value_w" {
                    data.iter_mut().for_each(|x| *x = 0.0);
                } else if name == "value_b" {
                    data[0] = 1.0;
                }
            }
        }
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            weight_decay: 0.0,
            batch: 4,
            minibatch: 4,
            max_new_tokens: 3,
            top_k: 8,
            normalize_advantages: false,
            ..PpoConfig::default()
        };
        let mut actor_opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-3) }, &actor.param_sizes());
        let mut critic_opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-3) }, &critic.param_sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // every episode gets reward 1.0 == V, so every advantage is zero
        let episodes: Vec<Episode> = (0..4)
            .map(|_| {
                let mut e = bandit_episode(&actor, &[2], 999, &mut rng);
                e.traj.reward = 1.0;
                e.traj.reward_level = RewardLevel::Correct;
                e
            })
            .collect();
        let before: Vec<Vec<f32>> =
            actor.params().iter().map(|p| p.data.to_vec()).collect();
        ppo_update(&mut actor, &mut critic, &mut actor_opt, &mut critic_opt, &episodes, &cfg)
            .unwrap();
        for (p, b) in actor.params().iter().zip(&before) {
            assert_eq!(p.data.as_slice(), b.as_slice(), "param {} moved", p.name);
        }
    }

    #[test]
    fn saturated_ratio_with_positive_advantage_blocks_actor_gradient() {
        let mut actor = tiny_model(8, 7);
        let mut critic = actor.to_role(Role::Critic, 8);
        // critic value 0 everywhere so advantage = reward = +1
        {
            let names: Vec<String> =
                critic.params().iter().map(|p| p.name.clone()).collect();
            let mut params = critic.params_mut().unwrap();
            for (name, data) in names.iter().zip(params.iter_mut()) {
                if name == "value_w" || name == "value_b" {
                    data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            weight_decay: 0.0,
            batch: 1,
            minibatch: 1,
            max_new_tokens: 1,
            top_k: 8,
            normalize_advantages: false,
            ..PpoConfig::default()
        };
        let mut actor_opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-3) }, &actor.param_sizes());
        let mut critic_opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-3) }, &critic.param_sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ep = bandit_episode(&actor, &[3], 0, &mut rng);
        ep.traj.reward = 1.0;
        // pretend the behaviour policy was much less likely to pick this
        // token: ratio = 2 > 1 + clip, positive advantage -> clipped branch
        for lp in ep.logp_old.iter_mut() {
            *lp -= 2.0f32.ln();
        }
        let before: Vec<Vec<f32>> =
            actor.params().iter().map(|p| p.data.to_vec()).collect();
        let stats = ppo_update(
            &mut actor,
            &mut critic,
            &mut actor_opt,
            &mut critic_opt,
            &[ep],
            &cfg,
        )
        .unwrap();
        assert!((stats.clip_fraction - 1.0).abs() < 1e-6);
        for (p, b) in actor.params().iter().zip(&before) {
            assert_eq!(p.data.as_slice(), b.as_slice(), "param {} moved", p.name);
        }
    }

    #[test]
    fn rollout_trajectory_invariants() {
        let (vocab, model) = toy_vocab_model(21);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let inst = env.train_instance(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = rollout_episode(&model, &inst, &vocab, 12, 10, "t0", &mut rng).unwrap();
        let t = &ep.traj;
        assert_eq!(t.topk.len(), t.gen_ids.len());
        assert_eq!(ep.logp_old.len(), t.gen_ids.len());
        for list in &t.topk {
            assert_eq!(list.len(), 10);
            for w in list.windows(2) {
                assert!(w[0].1 >= w[1].1, "top-k not sorted by descending probability");
            }
            let mass: f32 = list.iter().map(|&(_, lp)| lp.exp()).sum();
            assert!(mass <= 1.0 + 1e-5);
            assert!(!list.iter().any(|&(id, _)| id == vocab::BEACON));
        }
    }

    #[test]
    fn distillation_reduces_loss_on_fixed_trajectories() {
        let (vocab, teacher) = toy_vocab_model(31);
        // independently initialized student, so the starting KL is nonzero
        let mut student = tiny_model(vocab.len(), 32).to_role(Role::Student, 0);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut trajs = Vec::new();
        for i in 0..4 {
            let inst = env.train_instance(i).unwrap();
            let ep = rollout_episode(&teacher, &inst, &vocab, 10, 16, "t", &mut rng).unwrap();
            trajs.push(ep.traj);
        }
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let cfg = DistillConfig { student_lr: 1e-3, ratio_c: 2, top_k: 16, batch: 4, weight_decay: 0.0 };
        let mut opt = AdamW::new(
            AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(cfg.student_lr) },
            &student.param_sizes(),
        );
        let before = eval_distill_loss(&student, &refs, 2, 16).unwrap();
        for _ in 0..40 {
            distill_step(&mut student, &mut opt, &refs, &cfg).unwrap();
        }
        let after = eval_distill_loss(&student, &refs, 2, 16).unwrap();
        assert!(before > 1e-4, "starting KL unexpectedly tiny: {before}");
        assert!(after < before * 0.7, "distill loss {before} -> {after}");
    }

    #[test]
    fn joint_step_leaves_teacher_and_critic_bit_identical_through_distill() {
        let (vocab, base) = toy_vocab_model(41);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let cfg = PpoConfig {
            batch: 3,
            minibatch: 3,
            max_new_tokens: 6,
            top_k: 16,
            ..PpoConfig::toy()
        };
        let ppo = PpoTrainer::new(base, env, vocab, cfg, 77).unwrap();
        let mut joint =
            JointTrainer::new(ppo, vec![DistillConfig::toy(2)], None).unwrap();
        // run one full step, then snapshot and distill again on fresh samples
        joint.step().unwrap();
        let teacher_snap: Vec<Vec<f32>> =
            joint.ppo.actor.params().iter().map(|p| p.data.to_vec()).collect();
        let critic_snap: Vec<Vec<f32>> =
            joint.ppo.critic.params().iter().map(|p| p.data.to_vec()).collect();
        // a pure distill pass must not touch teacher or critic
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = joint.ppo.env.train_instance(999).unwrap();
        let ep = rollout_episode(&joint.ppo.actor, &inst, &joint.ppo.vocab, 6, 16, "x", &mut rng)
            .unwrap();
        let slot = &mut joint.students[0];
        distill_step(&mut slot.model, &mut slot.opt, &[&ep.traj], &slot.cfg).unwrap();
        for (p, snap) in joint.ppo.actor.params().iter().zip(&teacher_snap) {
            assert_eq!(p.data.as_slice(), snap.as_slice());
        }
        for (p, snap) in joint.ppo.critic.params().iter().zip(&critic_snap) {
            assert_eq!(p.data.as_slice(), snap.as_slice());
        }
    }

    #[test]
    fn store_round_trip_is_exact() {
        let (vocab, model) = toy_vocab_model(51);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Countdown));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajs.bin");
        let mut store = TrajectoryStore::create(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut originals = Vec::new();
        for i in 0..3 {
            let inst = env.train_instance(i).unwrap();
            let ep = rollout_episode(&model, &inst, &vocab, 8, 5, "tag-a", &mut rng).unwrap();
            store.append(&ep.traj).unwrap();
            originals.push(ep.traj);
        }
        assert_eq!(store.n_records(), 3);
        store.finalize().unwrap();
        let loaded = read_trajectories(&path).unwrap();
        assert_eq!(loaded, originals);
        assert_eq!(read_store_record_count(&path).unwrap(), 3);
    }

    #[test]
    fn warmup_reduces_format_nll() {
        let (vocab, mut model) = toy_vocab_model(61);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let mut opt = AdamW::new(AdamWConfig::with_lr(3e-3), &model.param_sizes());
        let losses = format_warmup(&mut model, &mut opt, &env, &vocab, 40, 4, 99).unwrap();
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(last < first * 0.8, "warmup loss {first} -> {last}");
    }

    #[test]
    fn two_step_budget_matches_joint_budget() {
        let (vocab, base) = toy_vocab_model(71);
        let env = TaskEnv::new(TaskConfig::toy(TaskKind::Stargraph));
        let cfg = PpoConfig {
            batch: 2,
            minibatch: 2,
            max_new_tokens: 4,
            top_k: 8,
            ..PpoConfig::toy()
        };
        let ppo = PpoTrainer::new(base.deep_clone(), env.clone(), vocab.clone(), cfg, 7).unwrap();
        let mut joint = JointTrainer::new(ppo, vec![DistillConfig::toy(2)], None).unwrap();
        let mut two = TwoStepTrainer::new(
            base,
            vec![DistillConfig::toy(2)],
            env,
            vocab,
            2,
            4,
            8,
            7,
            None,
        )
        .unwrap();
        for _ in 0..3 {
            joint.step().unwrap();
            two.step().unwrap();
        }
        assert_eq!(joint.ppo.episodes_sampled, two.episodes_sampled);
    }
}

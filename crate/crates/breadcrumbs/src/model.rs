//! Decoder-only transformer: pre-norm RMSNorm blocks, multi-head attention,
//! SiLU feed-forward, tied input/output embedding, optional value head.
//!
//! Two forward paths exist and must agree bit-for-bit on the same visible
//! entries:
//!   * `forward_full` — whole sequence on the autodiff tape under an
//!     arbitrary sub-causal mask (training).
//!   * `forward_step` — one token against a KV cache, no gradients
//!     (generation).
//! Both are built from the kernels in `crate::kernels`; accumulation order
//! per output element is identical by construction, which the equivalence
//! tests rely on.
//!
//! Positions are *original* sequence indices.  With rotary encoding the keys
//! are rotated at cache-write time, so evicting neighbors later never
//! invalidates a stored entry.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::kernels;
use crate::kv::{EntryTag, KvCache, StagedEntry};
use crate::mask::AttentionMask;
use crate::tensor::{Tape, Tensor};
use crate::vocab::TokenId;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Rotary on q/k; works for unbounded positions.
    Rotary,
    /// Learned absolute table; positions must stay below `max_positions`.
    LearnedAbsolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    /// Carries a scalar value head on top of the final hidden state.
    Critic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Upper bound for learned-absolute positions (table size).  Rotary
    /// ignores it at forward time.
    pub max_positions: usize,
    pub position_encoding: PositionEncoding,
    pub rope_base: f64,
    pub rms_eps: f32,
    pub init_std: f32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 6 {
            return Err(Error::Config("vocab_size must cover the 5 control ids".into()));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.position_encoding == PositionEncoding::Rotary && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("rotary needs even head_dim, got {}", self.head_dim())));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Total learnable parameters for this config and role.
    pub fn param_count(&self, role: Role) -> usize {
        let d = self.d_model;
        let per_layer = d /*attn_norm*/ + 4 * d * d /*wq wk wv wo*/ + d /*ffn_norm*/ + 2 * d * self.d_ff;
        let mut n = self.vocab_size * d + self.n_layers * per_layer + d /*final_norm*/;
        if self.position_encoding == PositionEncoding::LearnedAbsolute {
            n += self.max_positions * d;
        }
        if role == Role::Critic {
            n += d + 1; // value head
        }
        n
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f32>>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Output of one incremental decode step.  The new entry has already been
/// appended to the cache when this is returned.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Raw next-token logits (no sampling-time masks applied).
    pub logits: Vec<f32>,
    /// Post-softmax attention per cache slot, mean-pooled over layers and
    /// heads.  Length equals the cache length after the append; slot order
    /// matches the cache.
    pub attn_mean: Vec<f32>,
}

/// Handles returned by the tape forward, for loss building and grad reads.
pub struct FullForward {
    /// `[L, vocab]` raw logits; row i predicts the token after input i.
    pub logits: Tensor,
    /// `[L, 1]` value estimates (critic role only).
    pub values: Option<Tensor>,
    /// One handle per `params()` entry, same order.
    pub param_handles: Vec<Tensor>,
}

pub struct PolicyModel {
    pub config: ModelConfig,
    pub role: Role,
    params: Vec<Param>,
    inv_freq: Arc<Vec<f32>>,
}

// fixed parameter layout; checkpoint and optimizer state follow this order
fn param_specs(config: &ModelConfig, role: Role) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut specs = vec![("embed".to_string(), vec![config.vocab_size, d])];
    if config.position_encoding == PositionEncoding::LearnedAbsolute {
        specs.push(("pos_embed".to_string(), vec![config.max_positions, d]));
    }
    for l in 0..config.n_layers {
        specs.push((format!("l{l}.attn_norm"), vec![d]));
        specs.push((format!("l{l}.wq"), vec![d, d]));
        specs.push((format!("l{l}.wk"), vec![d, d]));
        specs.push((format!("l{l}.wv"), vec![d, d]));
        specs.push((format!("l{l}.wo"), vec![d, d]));
        specs.push((format!("l{l}.ffn_norm"), vec![d]));
        specs.push((format!("l{l}.w1"), vec![d, config.d_ff]));
        specs.push((format!("l{l}.w2"), vec![config.d_ff, d]));
    }
    specs.push(("final_norm".to_string(), vec![d]));
    if role == Role::Critic {
        specs.push(("value_w".to_string(), vec![d, 1]));
        specs.push(("value_b".to_string(), vec![1]));
    }
    specs
}

fn init_param(name: &str, shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n: usize = shape.iter().product();
    if name.ends_with("norm") {
        return vec![1.0; n];
    }
    if name == "value_b" {
        return vec![0.0; n];
    }
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z as f32) * std
        })
        .collect()
}

impl PolicyModel {
    pub fn new(config: ModelConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&config, role)
            .into_iter()
            .map(|(name, shape)| {
                let data = init_param(&name, &shape, config.init_std, &mut rng);
                Param { name, shape, data: Arc::new(data) }
            })
            .collect();
        let inv_freq = Arc::new(kernels::rope_inv_freqs(config.head_dim(), config.rope_base));
        Ok(PolicyModel { config, role, params, inv_freq })
    }

    /// Same weights under a different role.  Shared parameters are copied;
    /// parameters the new role adds (e.g. the critic's value head) are
    /// freshly initialized from `seed`.
    pub fn to_role(&self, role: Role, seed: u64) -> PolicyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(&self.config, role)
            .into_iter()
            .map(|(name, shape)| {
                if let Some(existing) = self.params.iter().find(|p| p.name == name) {
                    Param { name, shape, data: Arc::new(existing.data.as_ref().clone()) }
                } else {
                    let data = init_param(&name, &shape, self.config.init_std, &mut rng);
                    Param { name, shape, data: Arc::new(data) }
                }
            })
            .collect();
        PolicyModel { config: self.config.clone(), role, params, inv_freq: self.inv_freq.clone() }
    }

    pub fn deep_clone(&self) -> PolicyModel {
        self.to_role(self.role, 0)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.numel()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Mutable views for the optimizer.  Fails if any tape still shares the
    /// storage (drop tapes before stepping).
    pub fn params_mut(&mut self) -> Result<Vec<&mut Vec<f32>>> {
        let mut out = Vec::with_capacity(self.params.len());
        for p in self.params.iter_mut() {
            match Arc::get_mut(&mut p.data) {
                Some(v) => out.push(v),
                None => {
                    return Err(Error::Training(format!(
                        "parameter {} still shared with a live tape",
                        p.name
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Overwrite all parameters (checkpoint load).
    pub fn set_params(&mut self, values: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, shape, data)) in self.params.iter_mut().zip(values.into_iter()) {
            if p.name != name || p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {} {:?}, checkpoint has {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
            if data.len() != p.numel() {
                return Err(Error::Checkpoint(format!("parameter {} data length {}", name, data.len())));
            }
            p.data = Arc::new(data);
        }
        Ok(())
    }

    pub fn begin_cache(&self) -> KvCache<f32> {
        KvCache::new(self.config.n_layers, self.config.n_heads, self.config.head_dim())
    }

    fn param_named(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    // ---- tape forward ----

    /// Whole-sequence forward on the tape under `mask`.  Row r of the result
    /// predicts the token following input r; positions are 0..L-1.
    pub fn forward_full(&self, tape: &mut Tape<f32>, ids: &[TokenId], mask: &AttentionMask) -> Result<FullForward> {
        let cfg = &self.config;
        let len = ids.len();
        if len == 0 {
            return Err(Error::Generation("forward_full on empty sequence".into()));
        }
        if mask.len() != len {
            return Err(Error::shape("forward_full", format!("mask {} vs sequence {len}", mask.len())));
        }
        for &id in ids {
            if id as usize >= cfg.vocab_size {
                return Err(Error::UnknownTokenId(id));
            }
        }
        if cfg.position_encoding == PositionEncoding::LearnedAbsolute && len > cfg.max_positions {
            return Err(Error::Generation(format!(
                "sequence length {len} exceeds max_positions {}",
                cfg.max_positions
            )));
        }

        let mut handles = Vec::with_capacity(self.params.len());
        for p in &self.params {
            handles.push(tape.shared_leaf(p.data.clone(), &p.shape, true)?);
        }
        let handle = |name: &str| -> Tensor {
            let idx = self.params.iter().position(|p| p.name == name).expect("param exists");
            handles[idx]
        };

        let id_rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let embed = handle("embed");
        let mut x = tape.index_rows(embed, &id_rows)?;
        let positions: Vec<usize> = (0..len).collect();
        if cfg.position_encoding == PositionEncoding::LearnedAbsolute {
            let pos_rows = tape.index_rows(handle("pos_embed"), &positions)?;
            x = tape.add(x, pos_rows)?;
        }

        let additive = Arc::new(mask.to_additive::<f32>());
        let scale = 1.0 / (cfg.head_dim() as f32).sqrt();
        let hd = cfg.head_dim();
        let eps = cfg.rms_eps;

        for l in 0..cfg.n_layers {
            let h = tape.rms_norm(x, handle(&format!("l{l}.attn_norm")), eps)?;
            let mut q = tape.matmul(h, handle(&format!("l{l}.wq")))?;
            let mut k = tape.matmul(h, handle(&format!("l{l}.wk")))?;
            let v = tape.matmul(h, handle(&format!("l{l}.wv")))?;
            if cfg.position_encoding == PositionEncoding::Rotary {
                q = tape.rope(q, &positions, cfg.n_heads, self.inv_freq.clone())?;
                k = tape.rope(k, &positions, cfg.n_heads, self.inv_freq.clone())?;
            }
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for hh in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hh * hd, hd)?;
                let kh = tape.slice_cols(k, hh * hd, hd)?;
                let vh = tape.slice_cols(v, hh * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale);
                let masked = tape.add_const_mat(scaled, additive.clone())?;
                let probs = tape.softmax_rows(masked);
                head_outs.push(tape.matmul(probs, vh)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let attn = tape.matmul(concat, handle(&format!("l{l}.wo")))?;
            x = tape.add(x, attn)?;

            let h2 = tape.rms_norm(x, handle(&format!("l{l}.ffn_norm")), eps)?;
            let f1 = tape.matmul(h2, handle(&format!("l{l}.w1")))?;
            let act = tape.silu(f1);
            let f2 = tape.matmul(act, handle(&format!("l{l}.w2")))?;
            x = tape.add(x, f2)?;
        }

        let x_final = tape.rms_norm(x, handle("final_norm"), eps)?;
        let logits = tape.matmul_nt(x_final, embed)?;
        let values = if self.role == Role::Critic {
            let v_lin = tape.matmul(x_final, handle("value_w"))?;
            Some(tape.add_row_broadcast(v_lin, handle("value_b"))?)
        } else {
            None
        };
        Ok(FullForward { logits, values, param_handles: handles })
    }

    // ---- incremental forward ----

    /// One decode step: run `token` at `position` against the cache, append
    /// its entry with `tag`, and return raw logits plus pooled attention.
    pub fn forward_step(
        &self,
        token: TokenId,
        position: usize,
        tag: EntryTag,
        cache: &mut KvCache<f32>,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::UnknownTokenId(token));
        }
        if cfg.position_encoding == PositionEncoding::LearnedAbsolute && position >= cfg.max_positions {
            return Err(Error::Generation(format!(
                "position {position} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if let Some(last) = cache.max_position() {
            if position <= last {
                return Err(Error::Cache(format!(
                    "step position {position} not greater than cached {last}"
                )));
            }
        }

        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let heads = cfg.n_heads;
        let w = heads * hd;
        let scale = 1.0 / (hd as f32).sqrt();
        let eps = cfg.rms_eps;
        let rotary = cfg.position_encoding == PositionEncoding::Rotary;

        let embed = self.param_named("embed");
        let mut x: Vec<f32> = embed.data[token as usize * d..(token as usize + 1) * d].to_vec();
        if cfg.position_encoding == PositionEncoding::LearnedAbsolute {
            let pos_embed = self.param_named("pos_embed");
            for (xi, pe) in x.iter_mut().zip(&pos_embed.data[position * d..(position + 1) * d]) {
                *xi += pe;
            }
        }

        let n_after = cache.len() + 1;
        let mut attn_accum = vec![0.0f32; n_after];
        let mut staged: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(cfg.n_layers);

        for l in 0..cfg.n_layers {
            let mut h = vec![0.0f32; d];
            kernels::rms_norm_row(&x, &self.param_named(&format!("l{l}.attn_norm")).data, eps, &mut h);
            let mut q = kernels::matmul_nn(&h, &self.param_named(&format!("l{l}.wq")).data, 1, d, d);
            let mut k = kernels::matmul_nn(&h, &self.param_named(&format!("l{l}.wk")).data, 1, d, d);
            let v = kernels::matmul_nn(&h, &self.param_named(&format!("l{l}.wv")).data, 1, d, d);
            if rotary {
                kernels::rope_rotate_row(&mut q, position, heads, &self.inv_freq, true);
                kernels::rope_rotate_row(&mut k, position, heads, &self.inv_freq, true);
            }

            let cached_k = cache.keys(l);
            let cached_v = cache.values(l);
            let n_cached = cache.len();
            let mut attn_out = vec![0.0f32; d];
            for hh in 0..heads {
                let qh = &q[hh * hd..(hh + 1) * hd];
                // scores over cache slots (ascending positions), then self —
                // same visible-column order as the masked full forward
                let mut scores = Vec::with_capacity(n_after);
                for e in 0..n_cached {
                    let kh = &cached_k[e * w + hh * hd..e * w + (hh + 1) * hd];
                    scores.push(kernels::dot(qh, kh) * scale);
                }
                scores.push(kernels::dot(qh, &k[hh * hd..(hh + 1) * hd]) * scale);
                kernels::softmax_row(&mut scores);
                for (a, &p) in attn_accum.iter_mut().zip(scores.iter()) {
                    *a += p;
                }
                // gather this head's value rows contiguously, then one
                // [1,n] @ [n,hd] matmul — identical accumulation to the
                // tape path's probs @ V
                let mut vals = Vec::with_capacity(n_after * hd);
                for e in 0..n_cached {
                    vals.extend_from_slice(&cached_v[e * w + hh * hd..e * w + (hh + 1) * hd]);
                }
                vals.extend_from_slice(&v[hh * hd..(hh + 1) * hd]);
                let oh = kernels::matmul_nn(&scores, &vals, 1, n_after, hd);
                attn_out[hh * hd..(hh + 1) * hd].copy_from_slice(&oh);
            }
            let proj = kernels::matmul_nn(&attn_out, &self.param_named(&format!("l{l}.wo")).data, 1, d, d);
            for (xi, &p) in x.iter_mut().zip(proj.iter()) {
                *xi = *xi + p;
            }

            let mut h2 = vec![0.0f32; d];
            kernels::rms_norm_row(&x, &self.param_named(&format!("l{l}.ffn_norm")).data, eps, &mut h2);
            let f1 = kernels::matmul_nn(&h2, &self.param_named(&format!("l{l}.w1")).data, 1, d, cfg.d_ff);
            let act: Vec<f32> = f1.iter().map(|&z| kernels::silu(z)).collect();
            let f2 = kernels::matmul_nn(&act, &self.param_named(&format!("l{l}.w2")).data, 1, cfg.d_ff, d);
            for (xi, &p) in x.iter_mut().zip(f2.iter()) {
                *xi = *xi + p;
            }

            staged.push((k, v));
        }

        let mut x_final = vec![0.0f32; d];
        kernels::rms_norm_row(&x, &self.param_named("final_norm").data, eps, &mut x_final);
        let logits = kernels::matmul_nt(&x_final, &embed.data, 1, d, cfg.vocab_size);

        cache.append(StagedEntry { layers: staged }, position, tag)?;
        let denom = (cfg.n_layers * heads) as f32;
        for a in attn_accum.iter_mut() {
            *a /= denom;
        }
        Ok(StepOutput { logits, attn_mean: attn_accum })
    }

    /// Feed a whole prompt through `forward_step`; returns the last step's
    /// output (the distribution for the first generated token).
    pub fn encode_prompt(&self, ids: &[TokenId], cache: &mut KvCache<f32>) -> Result<StepOutput> {
        if ids.is_empty() {
            return Err(Error::Generation("prompt must be non-empty".into()));
        }
        let start = cache.max_position().map(|p| p + 1).unwrap_or(0);
        let mut last = None;
        for (i, &id) in ids.iter().enumerate() {
            last = Some(self.forward_step(id, start + i, EntryTag::Question, cache)?);
        }
        Ok(last.expect("non-empty prompt"))
    }
}

/// Sample from raw logits.  `forbidden` ids (the beacon, always) are masked
/// to -inf first.  Temperature 0 is argmax with lowest-id tie-break; the
/// result depends only on logit differences, not absolute offsets.
pub fn sample_token(
    logits: &[f32],
    temperature: f32,
    forbidden: &[TokenId],
    rng: &mut impl Rng,
) -> Result<TokenId> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::BadTemperature(temperature));
    }
    let mut masked = logits.to_vec();
    for &f in forbidden {
        if (f as usize) < masked.len() {
            masked[f as usize] = f32::NEG_INFINITY;
        }
    }
    for &x in &masked {
        if x.is_nan() {
            return Err(Error::NonFinite { context: "sampling logits".into() });
        }
    }
    if masked.iter().all(|&x| x == f32::NEG_INFINITY) {
        return Err(Error::AllMasked);
    }
    if temperature == 0.0 {
        let mut best = 0usize;
        for (i, &x) in masked.iter().enumerate() {
            if x > masked[best] {
                best = i;
            }
        }
        return Ok(best as TokenId);
    }
    for x in masked.iter_mut() {
        *x /= temperature;
    }
    kernels::softmax_row(&mut masked);
    let u: f32 = rng.gen();
    let mut cum = 0.0f32;
    let mut last_admissible = None;
    for (i, &p) in masked.iter().enumerate() {
        if p > 0.0 {
            last_admissible = Some(i);
            cum += p;
            if u < cum {
                return Ok(i as TokenId);
            }
        }
    }
    Ok(last_admissible.expect("at least one admissible token") as TokenId)
}

/// Log-softmax of raw logits with `forbidden` ids masked out; used to score
/// sampled tokens under the same distribution `sample_token` draws from
/// (at temperature 1).
pub fn masked_log_softmax(logits: &[f32], forbidden: &[TokenId]) -> Vec<f32> {
    let mut out = logits.to_vec();
    for &f in forbidden {
        if (f as usize) < out.len() {
            out[f as usize] = f32::NEG_INFINITY;
        }
    }
    kernels::log_softmax_row(&mut out);
    out
}

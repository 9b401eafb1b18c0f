//! Masked-language-model pretraining: dynamic masking, cross-entropy over
//! selected positions, Adam with warmup and linear decay, sequence packing,
//! checkpoints and bit-exact resume.
//!
//! Every random draw is derived from `(seed, domain, step)`, so a run
//! restarted from a checkpoint replays exactly what an uninterrupted run
//! would have done, whatever the number of worker threads.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{is_special, TokenId, TokenSequence, BOS, EOS, MASK, NUM_SPECIALS};
use crate::checkpoint;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Scalar, Tensor};

const MASK_DOMAIN: u64 = 0x6d61_736b_0000_0001;
const DROPOUT_DOMAIN: u64 = 0x6472_6f70_0000_0002;
const SHUFFLE_DOMAIN: u64 = 0x7368_7566_0000_0003;
const EVAL_DOMAIN: u64 = 0x6576_616c_0000_0004;

/// Items whose gradients are computed concurrently before being summed in
/// index order.
const GRAD_GROUP: usize = 8;

static EMPTY_MASK_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// How many times a loss was requested over an empty mask.
pub fn empty_mask_warnings() -> u64 {
    EMPTY_MASK_WARNINGS.load(Ordering::Relaxed)
}

/// Generator for one `(seed, domain, step)` triple.
pub fn step_rng(seed: u64, domain: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub keep_frac: f64,
    pub random_frac: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            keep_frac: 0.1,
            random_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.select_prob, self.mask_frac, self.keep_frac, self.random_frac];
        if fracs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        let sum = self.mask_frac + self.keep_frac + self.random_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask, keep and random fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Kept,
    Randomized,
}

/// One corrupted sequence. `targets` holds the original ids everywhere;
/// only positions with `loss_mask` set contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub corruption: Vec<Option<Corruption>>,
}

impl MaskedSequence {
    pub fn num_selected(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Dynamic masking: selects non-special positions with `select_prob`, then
/// masks, keeps or replaces each with a uniformly drawn non-special token.
pub fn mask_batch<R: Rng + ?Sized>(
    batch: &[TokenSequence],
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Vec<MaskedSequence> {
    batch
        .iter()
        .map(|seq| {
            let n = seq.ids.len();
            let mut out = MaskedSequence {
                input: seq.ids.clone(),
                targets: seq.ids.clone(),
                loss_mask: vec![false; n],
                corruption: vec![None; n],
            };
            for (i, &id) in seq.ids.iter().enumerate() {
                if is_special(id) || rng.random::<f64>() >= policy.select_prob {
                    continue;
                }
                out.loss_mask[i] = true;
                let r = rng.random::<f64>();
                let kind = if r < policy.mask_frac {
                    out.input[i] = MASK;
                    Corruption::Masked
                } else if r < policy.mask_frac + policy.keep_frac {
                    Corruption::Kept
                } else {
                    out.input[i] = rng.random_range(NUM_SPECIALS as TokenId..vocab_size as TokenId);
                    Corruption::Randomized
                };
                out.corruption[i] = Some(kind);
            }
            out
        })
        .collect()
}

/// Summed cross-entropy over masked positions, the number of them, and how
/// many are predicted correctly by argmax. When `grad` is given,
/// `scale · (softmax − onehot)` is written at masked rows and zero
/// elsewhere.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
    scale: T,
    mut grad: Option<&mut [T]>,
) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let (mut count, mut correct) = (0, 0);
    if let Some(g) = grad.as_deref_mut() {
        g.fill(T::zero());
    }
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let lse = log_sum_exp(row);
        sum += (lse - row[t as usize]).as_f64();
        count += 1;
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
        if best == t as usize {
            correct += 1;
        }
        if let Some(g) = grad.as_deref_mut() {
            let gr = &mut g[i * vocab..(i + 1) * vocab];
            for (gv, &v) in gr.iter_mut().zip(row) {
                *gv = (v - lse).exp() * scale;
            }
            gr[t as usize] = gr[t as usize] - scale;
        }
    }
    (sum, count, correct)
}

/// Mean cross-entropy over masked positions; 0 for an empty mask, which
/// is counted in [`empty_mask_warnings`].
pub fn mlm_loss<T: Scalar>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> f64 {
    let (sum, count, _) = masked_cross_entropy(logits, vocab, targets, mask, T::zero(), None);
    if count == 0 {
        EMPTY_MASK_WARNINGS.fetch_add(1, Ordering::Relaxed);
        log::warn!("MLM loss requested over an empty mask");
        return 0.0;
    }
    sum / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_sequences: usize,
    pub max_seq_len: usize,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    /// Desk scale: batch 32, 2,000 steps, warmup 10% of the run.
    fn default() -> Self {
        Self {
            total_steps: 2_000,
            warmup_steps: 200,
            batch_sequences: 32,
            ..Self::full_scale()
        }
    }
}

impl OptimizerConfig {
    /// Full-size run: 10k warmup steps to 3e-4, 100k steps,
    /// 8,192 sequences of at most 512 tokens.
    pub fn full_scale() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            peak_lr: 3e-4,
            warmup_steps: 10_000,
            total_steps: 100_000,
            batch_sequences: 8_192,
            max_seq_len: 512,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.peak_lr >= 0.0
            && self.weight_decay >= 0.0
            && self.batch_sequences > 0
            && self.max_seq_len >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Linear ramp from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &OptimizerConfig) -> f64 {
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * (step as f64 / cfg.warmup_steps as f64);
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.peak_lr * ((cfg.total_steps - step) as f64 / span)
}

/// Bias-corrected Adam with decoupled weight decay on matrices and
/// embeddings. `t` is the 1-based update count. Nothing is modified when
/// any gradient is non-finite.
pub fn adam_update<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    m: &mut [Tensor<T>],
    v: &mut [Tensor<T>],
    t: u64,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            tensor: bad.name.clone(),
        });
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let (lr_t, eps) = (T::of(lr), T::of(cfg.epsilon));
    let one = T::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        let decay = if p.shape.len() >= 2 { T::of(cfg.weight_decay) } else { T::zero() };
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr_t * (m_hat / (v_hat.sqrt() + eps) + decay * *pv);
        }
    }
    Ok(())
}

/// Concatenates documents with `</s>` separators and cuts the stream into
/// blocks of `max_seq_len`, each starting with `<s>`.
pub fn pack_sequences(docs: &[Vec<TokenId>], max_seq_len: usize) -> Result<Vec<TokenSequence>> {
    if max_seq_len < 2 {
        return Err(Error::Config("max_seq_len must be at least 2".into()));
    }
    let body = max_seq_len - 1;
    let mut stream = Vec::new();
    for d in docs {
        stream.extend_from_slice(d);
        stream.push(EOS);
    }
    Ok(stream
        .chunks(body)
        .map(|c| {
            let mut ids = Vec::with_capacity(c.len() + 1);
            ids.push(BOS);
            ids.extend_from_slice(c);
            TokenSequence::new(ids)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Updates between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub model: EncoderConfig,
    pub optimizer: OptimizerConfig,
    pub masking: MaskingPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 500,
            model: EncoderConfig::toy(crate::bpe::BASE_VOCAB),
            optimizer: OptimizerConfig::default(),
            masking: MaskingPolicy::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.masking.validate()?;
        if self.optimizer.max_seq_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds max_positions {}",
                self.optimizer.max_seq_len, self.model.max_positions
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = checkpoint::read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Exponential moving average of the step loss.
    pub running_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    running_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.lr, self.loss)
    }
}

pub const LOSS_LOG_HEADER: &str = "step\tlr\tloss";

pub struct Trainer<T> {
    pub model: EncoderModel<T>,
    pub state: TrainState<T>,
    config: PretrainConfig,
    data: Vec<TokenSequence>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: PretrainConfig, data: Vec<TokenSequence>) -> Result<Self> {
        config.validate()?;
        let model = EncoderModel::init(config.model.clone(), config.seed)?;
        Self::with_model(config, model, data)
    }

    pub fn with_model(config: PretrainConfig, model: EncoderModel<T>, data: Vec<TokenSequence>) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model does not match the training configuration".into()));
        }
        check_data(&data, &config)?;
        let state = TrainState {
            step: 0,
            m: model.zero_grads(),
            v: model.zero_grads(),
            running_loss: 0.0,
        };
        Ok(Self {
            model,
            state,
            config,
            data,
        })
    }

    /// Restores model, optimizer moments and step from a checkpoint.
    pub fn resume(dir: &Path, data: Vec<TokenSequence>) -> Result<Self> {
        let config: PretrainConfig = checkpoint::read_toml(&dir.join("pretrain.toml"))?;
        let model = EncoderModel::load(dir)?;
        let mut trainer = Self::with_model(config, model, data)?;
        let moments: Vec<Tensor<T>> = checkpoint::load_tensors(dir, "optimizer")?;
        let n = trainer.model.params().len();
        if moments.len() != 2 * n {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let (m, v) = moments.split_at(n);
        for ((a, b), p) in m.iter().zip(v).zip(trainer.model.params()) {
            if a.shape != p.shape || b.shape != p.shape {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {}", p.name)));
            }
        }
        let strip = |t: &Tensor<T>, p: &Tensor<T>| Tensor {
            name: p.name.clone(),
            shape: t.shape.clone(),
            data: t.data.clone(),
        };
        trainer.state.m = m.iter().zip(trainer.model.params()).map(|(t, p)| strip(t, p)).collect();
        trainer.state.v = v.iter().zip(trainer.model.params()).map(|(t, p)| strip(t, p)).collect();
        let s: StateFile = checkpoint::read_json(&dir.join("state.json"))?;
        trainer.state.step = s.step;
        trainer.state.running_loss = s.running_loss;
        Ok(trainer)
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.config
    }

    pub fn data(&self) -> &[TokenSequence] {
        &self.data
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        checkpoint::write_toml(&dir.join("pretrain.toml"), &self.config)?;
        let rename = |prefix: &str, ts: &[Tensor<T>]| -> Vec<Tensor<T>> {
            ts.iter()
                .map(|t| Tensor {
                    name: format!("{prefix}.{}", t.name),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect()
        };
        let mut moments = rename("m", &self.state.m);
        moments.extend(rename("v", &self.state.v));
        checkpoint::save_tensors(dir, "optimizer", &moments)?;
        checkpoint::write_json(
            &dir.join("state.json"),
            &StateFile {
                step: self.state.step,
                running_loss: self.state.running_loss,
            },
        )
    }

    /// Sequence indices of the batch used by update `step` (0-based): each
    /// epoch visits a fresh permutation and drops the remainder.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let b = self.config.optimizer.batch_sequences;
        let per_epoch = (self.data.len() / b) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut step_rng(self.config.seed, SHUFFLE_DOMAIN, epoch));
        order[k * b..(k + 1) * b].to_vec()
    }

    /// One Adam update on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let batch: Vec<TokenSequence> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| self.data[i].clone())
            .collect();
        let vocab = self.config.model.vocab_size;
        let mut mask_rng = step_rng(self.config.masking.seed, MASK_DOMAIN, step);
        let masked = mask_batch(&batch, &self.config.masking, vocab, &mut mask_rng);
        let total: usize = masked.iter().map(MaskedSequence::num_selected).sum();
        if total == 0 {
            EMPTY_MASK_WARNINGS.fetch_add(1, Ordering::Relaxed);
            log::warn!("step {}: no position selected for masking", step + 1);
        }
        let scale = T::one() / T::of(total.max(1) as f64);

        let model = &self.model;
        let seed = self.config.seed;
        let mut grads = model.zero_grads();
        let mut loss_sum = 0.0;
        for (g_idx, group) in masked.chunks(GRAD_GROUP).enumerate() {
            let parts: Vec<Result<(f64, Vec<Tensor<T>>)>> = group
                .par_iter()
                .enumerate()
                .map(|(j, item)| {
                    let item_idx = (g_idx * GRAD_GROUP + j) as u64;
                    let mut drop = step_rng(
                        seed ^ item_idx.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                        DROPOUT_DOMAIN,
                        step,
                    );
                    let pass = model.forward(&item.input, Some(&mut drop as &mut dyn RngCore))?;
                    let mut d_logits = vec![T::zero(); item.input.len() * vocab];
                    let (sum, _, _) = masked_cross_entropy(
                        pass.logits().expect("head output"),
                        vocab,
                        &item.targets,
                        &item.loss_mask,
                        scale,
                        Some(&mut d_logits),
                    );
                    let g = model.backward(&pass, Some(&d_logits), None)?;
                    Ok((sum, g))
                })
                .collect();
            for part in parts {
                let (sum, g) = part?;
                loss_sum += sum;
                for (acc, x) in grads.iter_mut().zip(&g) {
                    acc.add_assign(x);
                }
            }
        }
        let loss = if total == 0 { 0.0 } else { loss_sum / total as f64 };
        let t = step + 1;
        let lr = lr_schedule(t, &self.config.optimizer);
        adam_update(
            self.model.params_mut(),
            &grads,
            &mut self.state.m,
            &mut self.state.v,
            t,
            lr,
            &self.config.optimizer,
        )?;
        self.state.step = t;
        self.state.running_loss = if step == 0 {
            loss
        } else {
            0.98 * self.state.running_loss + 0.02 * loss
        };
        Ok(StepRecord { step: t, lr, loss })
    }

    /// Mean masked loss and argmax accuracy over the whole training set,
    /// without dropout, under a corruption drawn from `seed`.
    pub fn evaluate(&self, seed: u64) -> (f64, f64) {
        let vocab = self.config.model.vocab_size;
        let mut rng = step_rng(seed, EVAL_DOMAIN, 0);
        let masked = mask_batch(&self.data, &self.config.masking, vocab, &mut rng);
        let scores: Vec<(f64, usize, usize)> = masked
            .par_iter()
            .map(|item| {
                let pass = self.model.forward(&item.input, None).expect("validated sequence");
                masked_cross_entropy(
                    pass.logits().expect("head output"),
                    vocab,
                    &item.targets,
                    &item.loss_mask,
                    T::zero(),
                    None,
                )
            })
            .collect();
        let (sum, count, correct) = scores
            .iter()
            .fold((0.0, 0, 0), |(s, n, c), &(a, b, d)| (s + a, n + b, c + d));
        if count == 0 {
            return (0.0, 0.0);
        }
        (sum / count as f64, correct as f64 / count as f64)
    }
}

fn check_data(data: &[TokenSequence], config: &PretrainConfig) -> Result<()> {
    let b = config.optimizer.batch_sequences;
    if data.len() < b {
        return Err(Error::InvalidInput(format!(
            "corpus has {} sequences, fewer than one batch of {b}",
            data.len()
        )));
    }
    for seq in data {
        if seq.ids.len() > config.optimizer.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.ids.len(),
                max: config.optimizer.max_seq_len,
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= config.model.vocab_size) {
            return Err(Error::InvalidTokenId {
                id,
                vocab_size: config.model.vocab_size,
            });
        }
    }
    Ok(())
}

/// Files produced by [`pretrain`] inside its output directory.
pub const LOSS_LOG_FILE: &str = "loss.tsv";
pub const FINAL_DIR: &str = "final";

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:07}"))
}

/// Trains to `total_steps`, appending to `out/loss.tsv`, writing a
/// checkpoint every `checkpoint_every` updates and the last one to
/// `out/final`. With `resume`, training restarts from that checkpoint and
/// log lines after its step are discarded first.
pub fn pretrain<T: Scalar>(
    config: PretrainConfig,
    data: Vec<TokenSequence>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Trainer<T>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dir, data)?,
        None => Trainer::new(config, data)?,
    };
    let log_path = out.join(LOSS_LOG_FILE);
    let mut kept = String::from(LOSS_LOG_HEADER);
    kept.push('\n');
    if resume.is_some() && log_path.exists() {
        let old = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for line in old.lines().skip(1) {
            let step: u64 = line
                .split('\t')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(log_path.display().to_string(), "bad log line"))?;
            if step <= trainer.state.step {
                let _ = writeln!(kept, "{line}");
            }
        }
    }
    fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let total = trainer.config.optimizer.total_steps;
    let every = trainer.config.checkpoint_every;
    while trainer.state.step < total {
        let rec = trainer.step()?;
        writeln!(log, "{}", rec.tsv_line()).map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} lr {:.3e} loss {:.4}", rec.step, rec.lr, trainer.state.running_loss);
        }
        if every > 0 && rec.step % every == 0 && rec.step < total {
            trainer.save_checkpoint(&checkpoint_dir(out, rec.step))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save_checkpoint(&out.join(FINAL_DIR))?;
    Ok(trainer)
}

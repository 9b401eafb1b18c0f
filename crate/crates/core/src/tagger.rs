//! POS tagging on top of the encoder, and century/genre-stratified
//! evaluation.
//!
//! Each word is represented by the final hidden state of `<s>` together with
//! the mean of the final hidden states of the word's subwords. Concatenation
//! is the default reading of "together"; summation is available. The feature
//! goes through a 256-unit affine layer, a tanh (or nothing) and an affine
//! projection onto the tag set.
//!
//! Words are BPE-encoded one at a time, every word after the first with a
//! leading space, so each word owns a contiguous block of subwords.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bpe::{BpeModel, TokenId, BOS, EOS};
use crate::checkpoint;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::mlm::{adam_update, step_rng, OptimizerConfig};
use crate::tensor::{linear_backward, linear_forward, log_sum_exp, Scalar, Tensor};

const SHUFFLE_DOMAIN: u64 = 0x7461_6773_0000_0001;
const DROPOUT_DOMAIN: u64 = 0x7461_6773_0000_0002;
const GRAD_GROUP: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub gold_tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, gold_tags: Vec<String>) -> Result<Self> {
        if tokens.len() != gold_tags.len() {
            return Err(Error::InvalidInput(format!(
                "{} tokens but {} tags",
                tokens.len(),
                gold_tags.len()
            )));
        }
        Ok(Self { tokens, gold_tags })
    }
}

/// Subword ids of a sentence framed by `<s>` and `</s>`, and for each word
/// the range of its subwords within `ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ids: Vec<TokenId>,
    pub ranges: Vec<Range<usize>>,
}

pub fn align(bpe: &BpeModel, tokens: &[String]) -> Result<Alignment> {
    let mut ids = vec![BOS];
    let mut ranges = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!("bad token {tok:?}")));
        }
        let start = ids.len();
        if i == 0 {
            ids.extend(bpe.encode_bytes(tok.as_bytes()));
        } else {
            ids.extend(bpe.encode_bytes(format!(" {tok}").as_bytes()));
        }
        ranges.push(start..ids.len());
    }
    ids.push(EOS);
    Ok(Alignment { ids, ranges })
}

/// Ordered, duplicate-free tag inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet {
    pub tags: Vec<String>,
}

impl TagSet {
    /// Sorted tags seen in `sentences`.
    pub fn from_sentences(sentences: &[TaggedSentence]) -> Self {
        let set: BTreeSet<&String> = sentences.iter().flat_map(|s| &s.gold_tags).collect();
        Self {
            tags: set.into_iter().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.binary_search_by(|t| t.as_str().cmp(tag)).ok()
    }

    /// Fails on the first tag outside the inventory.
    pub fn check(&self, sentences: &[TaggedSentence]) -> Result<()> {
        for s in sentences {
            if let Some(t) = s.gold_tags.iter().find(|t| self.index(t).is_none()) {
                return Err(Error::InvalidInput(format!("tag {t:?} is not in the tag set")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub combine: Combine,
    pub activation: Activation,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            combine: Combine::Concat,
            activation: Activation::Tanh,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    /// Constant learning rate for encoder and head.
    pub lr: f64,
    pub epochs: usize,
    pub batch_sentences: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub head: HeadConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 5e-6,
            epochs: 10,
            batch_sentences: 16,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.0,
            head: HeadConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_sentences == 0 || self.head.hidden == 0 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid fine-tuning settings: {self:?}")));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaggerFile {
    head: HeadConfig,
    tags: TagSet,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

#[derive(Debug, Clone)]
pub struct Tagger<T> {
    pub encoder: EncoderModel<T>,
    pub head: Vec<Tensor<T>>,
    pub tagset: TagSet,
    pub head_config: HeadConfig,
    pub bpe: BpeModel,
}

/// Loss, encoder gradients and head gradients of one sentence.
type SentenceGrads<T> = (f64, Vec<Tensor<T>>, Vec<Tensor<T>>);

/// Per-word features and head activations for one sentence.
struct SentencePass<T> {
    features: Vec<T>,
    act: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Tagger<T> {
    /// Fresh head on top of `encoder`, weights ~ N(0, 0.02²), biases 0.
    pub fn new(
        encoder: EncoderModel<T>,
        bpe: BpeModel,
        tagset: TagSet,
        head_config: HeadConfig,
        seed: u64,
    ) -> Result<Self> {
        if tagset.is_empty() {
            return Err(Error::InvalidInput("empty tag set".into()));
        }
        if bpe.vocab_size() != encoder.config().vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries but the encoder expects {}",
                bpe.vocab_size(),
                encoder.config().vocab_size
            )));
        }
        let d_in = head_input_dim(encoder.config().hidden_dim, head_config.combine);
        let (hid, nt) = (head_config.hidden, tagset.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |name: &str, shape: Vec<usize>| Tensor {
            name: name.into(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| T::of(normal.sample(&mut rng)))
                .collect(),
            shape,
        };
        let head = vec![
            draw("tagger.dense.weight", vec![d_in, hid]),
            Tensor::zeros("tagger.dense.bias", &[hid]),
            draw("tagger.output.weight", vec![hid, nt]),
            Tensor::zeros("tagger.output.bias", &[nt]),
        ];
        Ok(Self {
            encoder,
            head,
            tagset,
            head_config,
            bpe,
        })
    }

    pub fn head_input_dim(&self) -> usize {
        self.head[W1].shape[0]
    }

    pub fn head_output_dim(&self) -> usize {
        self.head[W2].shape[1]
    }

    /// Per-word pooled features `[words, head_input_dim]` from final hidden
    /// states `[N, hidden]`.
    pub fn pool(&self, hidden: &[T], ranges: &[Range<usize>]) -> Vec<T> {
        pool(hidden, self.encoder.config().hidden_dim, ranges, self.head_config.combine)
    }

    fn sentence_pass(&self, hidden: &[T], ranges: &[Range<usize>]) -> SentencePass<T> {
        let words = ranges.len();
        let d_in = self.head_input_dim();
        let (hid, nt) = (self.head_config.hidden, self.tagset.len());
        let features = self.pool(hidden, ranges);
        let mut act = linear_forward(&features, words, d_in, &self.head[W1].data, &self.head[B1].data, hid);
        if self.head_config.activation == Activation::Tanh {
            act.iter_mut().for_each(|x| *x = x.tanh());
        }
        let logits = linear_forward(&act, words, hid, &self.head[W2].data, &self.head[B2].data, nt);
        SentencePass {
            features,
            act,
            logits,
        }
    }

    /// Tag logits `[words, tags]` for one sentence, without dropout.
    pub fn logits(&self, tokens: &[String]) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let al = align(&self.bpe, tokens)?;
        let pass = self.encoder.forward_hidden(&al.ids, None)?;
        Ok(self.sentence_pass(pass.hidden(), &al.ranges).logits)
    }

    /// Argmax tag per word; output lengths match the input.
    pub fn tag(&self, sentences: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
        sentences
            .par_iter()
            .map(|tokens| {
                let logits = self.logits(tokens)?;
                Ok(argmax_rows(&logits, self.tagset.len())
                    .into_iter()
                    .map(|k| self.tagset.tags[k].clone())
                    .collect())
            })
            .collect()
    }

    /// Token accuracy against gold tags; unknown gold tags count as errors.
    pub fn accuracy(&self, sentences: &[TaggedSentence]) -> Result<f64> {
        let tokens: Vec<Vec<String>> = sentences.iter().map(|s| s.tokens.clone()).collect();
        let pred = self.tag(&tokens)?;
        let (mut ok, mut n) = (0usize, 0usize);
        for (s, p) in sentences.iter().zip(&pred) {
            for (g, t) in s.gold_tags.iter().zip(p) {
                n += 1;
                ok += usize::from(g == t);
            }
        }
        Ok(if n == 0 { 0.0 } else { ok as f64 / n as f64 })
    }

    /// Summed cross-entropy, and gradients of `scale ·` that sum.
    fn sentence_grads(
        &self,
        s: &TaggedSentence,
        scale: T,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<SentenceGrads<T>> {
        let h = self.encoder.config().hidden_dim;
        let al = align(&self.bpe, &s.tokens)?;
        let enc = self.encoder.forward_hidden(&al.ids, dropout)?;
        let sp = self.sentence_pass(enc.hidden(), &al.ranges);
        let (words, nt, hid, d_in) = (s.tokens.len(), self.tagset.len(), self.head_config.hidden, self.head_input_dim());

        let mut loss = 0.0;
        let mut d_logits = vec![T::zero(); words * nt];
        for (w, tag) in s.gold_tags.iter().enumerate() {
            let gold = self
                .tagset
                .index(tag)
                .ok_or_else(|| Error::InvalidInput(format!("tag {tag:?} is not in the tag set")))?;
            let row = &sp.logits[w * nt..(w + 1) * nt];
            let lse = log_sum_exp(row);
            loss += (lse - row[gold]).as_f64();
            for (k, d) in d_logits[w * nt..(w + 1) * nt].iter_mut().enumerate() {
                *d = (row[k] - lse).exp() * scale;
            }
            d_logits[w * nt + gold] = d_logits[w * nt + gold] - scale;
        }

        let mut head_grads = crate::tensor::zeros_like_all(&self.head);
        let (w2g, b2g) = head_grads[W2..].split_at_mut(1);
        let mut d_act = linear_backward(&sp.act, &d_logits, words, hid, nt, &self.head[W2].data, &mut w2g[0].data, &mut b2g[0].data);
        if self.head_config.activation == Activation::Tanh {
            for (d, &a) in d_act.iter_mut().zip(&sp.act) {
                *d = *d * (T::one() - a * a);
            }
        }
        let (w1g, b1g) = head_grads.split_at_mut(B1);
        let d_feat = linear_backward(&sp.features, &d_act, words, d_in, hid, &self.head[W1].data, &mut w1g[0].data, &mut b1g[0].data);

        let mut d_hidden = vec![T::zero(); al.ids.len() * h];
        for (w, r) in al.ranges.iter().enumerate() {
            let df = &d_feat[w * d_in..(w + 1) * d_in];
            let (d_cls, d_mean) = match self.head_config.combine {
                Combine::Concat => (&df[..h], &df[h..]),
                Combine::Sum => (df, df),
            };
            for (a, &b) in d_hidden[..h].iter_mut().zip(d_cls) {
                *a = *a + b;
            }
            let inv = T::one() / T::of(r.len() as f64);
            for i in r.clone() {
                for (a, &b) in d_hidden[i * h..(i + 1) * h].iter_mut().zip(d_mean) {
                    *a = *a + b * inv;
                }
            }
        }
        let enc_grads = self.encoder.backward(&enc, None, Some(&d_hidden))?;
        Ok((loss, enc_grads, head_grads))
    }

    /// Writes the encoder, the head, the tag set and the tokenizer.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.encoder.save(&dir.join("encoder"))?;
        self.bpe.save(&dir.join("tokenizer"))?;
        checkpoint::save_tensors(dir, "head", &self.head)?;
        checkpoint::write_toml(
            &dir.join("tagger.toml"),
            &TaggerFile {
                head: self.head_config.clone(),
                tags: self.tagset.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = EncoderModel::load(&dir.join("encoder"))?;
        let bpe = BpeModel::load(&dir.join("tokenizer"))?;
        let file: TaggerFile = checkpoint::read_toml(&dir.join("tagger.toml"))?;
        let head: Vec<Tensor<T>> = checkpoint::load_tensors(dir, "head")?;
        let d_in = head_input_dim(encoder.config().hidden_dim, file.head.combine);
        let shapes = [
            vec![d_in, file.head.hidden],
            vec![file.head.hidden],
            vec![file.head.hidden, file.tags.len()],
            vec![file.tags.len()],
        ];
        if head.len() != 4 || head.iter().zip(&shapes).any(|(t, s)| &t.shape != s) {
            return Err(Error::Checkpoint("tagging head does not match its configuration".into()));
        }
        Ok(Self {
            encoder,
            head,
            tagset: file.tags,
            head_config: file.head,
            bpe,
        })
    }
}

pub fn head_input_dim(hidden: usize, combine: Combine) -> usize {
    match combine {
        Combine::Concat => 2 * hidden,
        Combine::Sum => hidden,
    }
}

/// `[h(<s>) ; mean(h[r])]` (or their sum) for each range `r`.
pub fn pool<T: Scalar>(hidden: &[T], h: usize, ranges: &[Range<usize>], combine: Combine) -> Vec<T> {
    let d_in = head_input_dim(h, combine);
    let mut out = vec![T::zero(); ranges.len() * d_in];
    let cls = &hidden[..h];
    for (w, r) in ranges.iter().enumerate() {
        let row = &mut out[w * d_in..(w + 1) * d_in];
        let inv = T::one() / T::of(r.len() as f64);
        let mean = &mut row[d_in - h..];
        for i in r.clone() {
            for (m, &x) in mean.iter_mut().zip(&hidden[i * h..(i + 1) * h]) {
                *m = *m + x * inv;
            }
        }
        for (t, &c) in row[..h].iter_mut().zip(cls) {
            *t = *t + c;
        }
    }
    out
}

pub fn argmax_rows<T: Scalar>(logits: &[T], width: usize) -> Vec<usize> {
    logits
        .chunks(width)
        .map(|row| row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    /// Tagger from the epoch with the best dev accuracy.
    pub tagger: Tagger<T>,
    pub dev_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Fine-tunes encoder and head jointly with Adam at a constant rate,
/// keeping the parameters of the best dev epoch (earliest on ties).
pub fn finetune<T: Scalar>(
    mut tagger: Tagger<T>,
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    if tagger.head_config != cfg.head {
        return Err(Error::Config("tagger head differs from the fine-tuning configuration".into()));
    }
    tagger.tagset.check(train)?;
    tagger.tagset.check(dev)?;
    let train: Vec<&TaggedSentence> = train.iter().filter(|s| !s.tokens.is_empty()).collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("no training sentences".into()));
    }
    let opt = cfg.optimizer();
    let mut em = tagger.encoder.zero_grads();
    let mut ev = tagger.encoder.zero_grads();
    let mut hm = crate::tensor::zeros_like_all(&tagger.head);
    let mut hv = crate::tensor::zeros_like_all(&tagger.head);
    let mut t = 0u64;
    let mut best: Option<(f64, usize, Tagger<T>)> = None;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut step_rng(cfg.seed, SHUFFLE_DOMAIN, epoch as u64));
        for batch in order.chunks(cfg.batch_sentences) {
            let words: usize = batch.iter().map(|&i| train[i].tokens.len()).sum();
            let scale = T::one() / T::of(words as f64);
            let mut eg = tagger.encoder.zero_grads();
            let mut hg = crate::tensor::zeros_like_all(&tagger.head);
            for group in batch.chunks(GRAD_GROUP) {
                let parts: Vec<Result<SentenceGrads<T>>> = group
                    .par_iter()
                    .map(|&i| {
                        let mut drop = step_rng(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), DROPOUT_DOMAIN, t);
                        tagger.sentence_grads(train[i], scale, Some(&mut drop as &mut dyn RngCore))
                    })
                    .collect();
                for part in parts {
                    let (_, e, h) = part?;
                    eg.iter_mut().zip(&e).for_each(|(a, b)| a.add_assign(b));
                    hg.iter_mut().zip(&h).for_each(|(a, b)| a.add_assign(b));
                }
            }
            t += 1;
            adam_update(tagger.encoder.params_mut(), &eg, &mut em, &mut ev, t, cfg.lr, &opt)?;
            adam_update(&mut tagger.head, &hg, &mut hm, &mut hv, t, cfg.lr, &opt)?;
        }
        let acc = tagger.accuracy(dev)?;
        log::info!("epoch {} dev accuracy {:.4}", epoch + 1, acc);
        trace.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch + 1, tagger.clone()));
        }
    }
    let (_, best_epoch, tagger) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        tagger,
        dev_trace: trace,
        best_epoch,
    })
}

/// A block of sentences sharing `# key = value` metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedDocument {
    pub meta: BTreeMap<String, String>,
    pub sentences: Vec<TaggedSentence>,
}

/// Parses `token<TAB>tag` lines, blank-line separated sentences and `#`
/// metadata headers. A header after sentences starts a new document.
pub fn parse_tagged(text: &str) -> Result<Vec<TaggedDocument>> {
    let mut docs = Vec::new();
    let mut doc = TaggedDocument::default();
    let mut sent = TaggedSentence::default();
    let ctx = |n: usize| format!("tagged corpus line {n}");
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix('#') {
            if !sent.tokens.is_empty() {
                doc.sentences.push(std::mem::take(&mut sent));
            }
            if !doc.sentences.is_empty() {
                docs.push(std::mem::take(&mut doc));
            }
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(ctx(n), "metadata lines look like `# key = value`"))?;
            doc.meta.insert(k.trim().to_string(), v.trim().to_string());
        } else if line.trim().is_empty() {
            if !sent.tokens.is_empty() {
                doc.sentences.push(std::mem::take(&mut sent));
            }
        } else {
            let (tok, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(ctx(n), "expected `token<TAB>tag`"))?;
            if tok.is_empty() || tag.is_empty() || tag.contains('\t') || tok.chars().any(char::is_whitespace) {
                return Err(Error::parse(ctx(n), "expected `token<TAB>tag`"));
            }
            sent.tokens.push(tok.to_string());
            sent.gold_tags.push(tag.to_string());
        }
    }
    if !sent.tokens.is_empty() {
        doc.sentences.push(sent);
    }
    if !doc.sentences.is_empty() || !doc.meta.is_empty() {
        docs.push(doc);
    }
    Ok(docs)
}

pub fn render_tagged(docs: &[TaggedDocument]) -> String {
    let mut out = String::new();
    for d in docs {
        for (k, v) in &d.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for s in &d.sentences {
            for (tok, tag) in s.tokens.iter().zip(&s.gold_tags) {
                let _ = writeln!(out, "{tok}\t{tag}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn sentences_of(docs: &[TaggedDocument]) -> Vec<TaggedSentence> {
    docs.iter().flat_map(|d| d.sentences.iter().cloned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum State {
    Original,
    Normalised,
}

impl State {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "original" | "orig" => Ok(Self::Original),
            "normalised" | "normalized" | "contemporary" => Ok(Self::Normalised),
            other => Err(Error::InvalidInput(format!("unknown state {other:?}"))),
        }
    }

    fn title(self) -> &'static str {
        match self {
            Self::Original => "ORIGINAL",
            Self::Normalised => "NORMALISED OR CONTEMPORARY",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Normalised => "normalised",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GenreClass {
    Drama,
    Varia,
}

impl GenreClass {
    /// Theatre is drama; every other genre is varia.
    pub fn classify(genre: &str) -> Self {
        match genre.trim().to_lowercase().as_str() {
            "drama" | "theatre" | "théâtre" | "theater" | "comedie" | "comédie" | "tragedie" | "tragédie" => Self::Drama,
            _ => Self::Varia,
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::Drama => "drama",
            Self::Varia => "varia",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Period {
    Preclassical,
    Classical,
    Other,
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Preclassical => "preclassical",
            Self::Classical => "classical",
            Self::Other => "other",
        })
    }
}

pub fn century_label(century: u32) -> String {
    let suffix = match (century % 10, century % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{century}{suffix} c.")
}

/// `⌈year / 100⌉` and the period: preclassical [1500, 1630), classical
/// [1630, 1689), other otherwise.
pub fn century_and_period(year: i32) -> Result<(u32, Period)> {
    if !(crate::corpus::MIN_YEAR..=crate::corpus::MAX_YEAR).contains(&year) {
        return Err(Error::YearOutOfRange(year));
    }
    let century = (year as u32).div_ceil(100);
    let period = match year {
        1500..=1629 => Period::Preclassical,
        1630..=1688 => Period::Classical,
        _ => Period::Other,
    };
    Ok((century, period))
}

pub const REPORT_CENTURIES: [u32; 5] = [16, 17, 18, 19, 20];
const STATES: [State; 2] = [State::Original, State::Normalised];
const GENRES: [GenreClass; 2] = [GenreClass::Drama, GenreClass::Varia];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CellCount {
    pub correct: u64,
    pub total: u64,
}

/// Token accuracy per (state, genre, century) cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalReport {
    cells: BTreeMap<(State, GenreClass, u32), CellCount>,
    /// Tokens from centuries outside the grid.
    pub outside_grid: u64,
}

impl EvalReport {
    pub fn add(&mut self, state: State, genre: GenreClass, century: u32, correct: u64, total: u64) {
        if !REPORT_CENTURIES.contains(&century) {
            self.outside_grid += total;
            return;
        }
        let c = self.cells.entry((state, genre, century)).or_default();
        c.correct += correct;
        c.total += total;
    }

    /// `genre = None` is the token-weighted union of both genres.
    pub fn count(&self, state: State, genre: Option<GenreClass>, century: u32) -> CellCount {
        let genres: &[GenreClass] = match genre {
            Some(ref g) => std::slice::from_ref(g),
            None => &GENRES,
        };
        genres.iter().fold(CellCount::default(), |acc, g| {
            let c = self.cells.get(&(state, *g, century)).copied().unwrap_or_default();
            CellCount {
                correct: acc.correct + c.correct,
                total: acc.total + c.total,
            }
        })
    }

    /// Percentage, or `None` for an empty cell.
    pub fn accuracy(&self, state: State, genre: Option<GenreClass>, century: u32) -> Option<f64> {
        let c = self.count(state, genre, century);
        (c.total > 0).then(|| 100.0 * c.correct as f64 / c.total as f64)
    }

    /// Unweighted mean of the non-empty century cells of a row.
    pub fn row_average(&self, state: State, genre: Option<GenreClass>) -> Option<f64> {
        let vals: Vec<f64> = REPORT_CENTURIES
            .iter()
            .filter_map(|&c| self.accuracy(state, genre, c))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn rows() -> [(&'static str, Option<GenreClass>); 3] {
        [("Drama", Some(GenreClass::Drama)), ("Varia", Some(GenreClass::Varia)), ("Both", None)]
    }

    /// Two blocks (original, normalised), rows drama/varia/both, columns
    /// centuries 16 to 20 and their average; empty cells print `-`.
    pub fn render_grid(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        for (i, state) in STATES.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "{}", state.title());
            let _ = write!(out, "{:<8}", "Genre");
            for c in REPORT_CENTURIES {
                let _ = write!(out, "{c:>8}");
            }
            let _ = writeln!(out, "{:>8}", "Avg");
            for (label, genre) in Self::rows() {
                let _ = write!(out, "{label:<8}");
                for c in REPORT_CENTURIES {
                    let _ = write!(out, "{:>8}", fmt(self.accuracy(*state, genre, c)));
                }
                let _ = writeln!(out, "{:>8}", fmt(self.row_average(*state, genre)));
            }
        }
        out
    }

    /// Long format: `state genre century correct total accuracy`, with
    /// `avg` rows and `-` for empty cells.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("state\tgenre\tcentury\tcorrect\ttotal\taccuracy\n");
        for state in STATES {
            for (_, genre) in Self::rows() {
                let g = genre.map_or("both", GenreClass::key);
                for c in REPORT_CENTURIES {
                    let n = self.count(state, genre, c);
                    let acc = self
                        .accuracy(state, genre, c)
                        .map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
                    let _ = writeln!(out, "{}\t{g}\t{c}\t{}\t{}\t{acc}", state.key(), n.correct, n.total);
                }
                let avg = self
                    .row_average(state, genre)
                    .map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
                let _ = writeln!(out, "{}\t{g}\tavg\t-\t-\t{avg}", state.key());
            }
        }
        out
    }
}

fn doc_labels(doc: &TaggedDocument) -> Result<(State, GenreClass, u32)> {
    let get = |k: &str| {
        doc.meta
            .get(k)
            .ok_or_else(|| Error::InvalidInput(format!("evaluation document lacks `# {k} = ...`")))
    };
    let state = State::parse(get("state")?)?;
    let genre = GenreClass::classify(get("genre")?);
    let century = match doc.meta.get("century") {
        Some(c) => c
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad century {c:?}")))?,
        None => {
            let y = get("year")?;
            let year: i32 = y
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad year {y:?}")))?;
            century_and_period(year)?.0
        }
    };
    Ok((state, genre, century))
}

/// Tags every document and tallies token accuracy into its cell.
pub fn evaluate<T: Scalar>(docs: &[TaggedDocument], tagger: &Tagger<T>) -> Result<EvalReport> {
    let labels: Vec<(State, GenreClass, u32)> = docs.iter().map(doc_labels).collect::<Result<_>>()?;
    let counts: Vec<(u64, u64)> = docs
        .par_iter()
        .map(|d| {
            let tokens: Vec<Vec<String>> = d.sentences.iter().map(|s| s.tokens.clone()).collect();
            let pred = tagger.tag(&tokens)?;
            let mut ok = 0u64;
            let mut n = 0u64;
            for (s, p) in d.sentences.iter().zip(&pred) {
                for (g, t) in s.gold_tags.iter().zip(p) {
                    n += 1;
                    ok += u64::from(g == t);
                }
            }
            Ok((ok, n))
        })
        .collect::<Result<_>>()?;
    let mut report = EvalReport::default();
    for ((state, genre, century), (ok, n)) in labels.into_iter().zip(counts) {
        report.add(state, genre, century, ok, n);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn alignment_is_sound() {
        let bpe = crate::bpe::train_bpe(["le roy voit la ville", "la ville voit le roy"], 300).unwrap();
        let toks = words("Surquoy , SIRE le roy dõt");
        let al = align(&bpe, &toks).unwrap();
        assert_eq!(al.ids[0], BOS);
        assert_eq!(*al.ids.last().unwrap(), EOS);
        let mut prev = 1;
        for (i, (r, w)) in al.ranges.iter().zip(&toks).enumerate() {
            assert!(!r.is_empty() && r.start == prev);
            prev = r.end;
            let text = bpe.decode(&al.ids[r.clone()]).unwrap();
            let expected = if i == 0 { w.clone() } else { format!(" {w}") };
            assert_eq!(text, expected);
        }
        assert_eq!(prev, al.ids.len() - 1);
    }

    #[test]
    fn pooling_concat_and_mean() {
        let h = 2;
        let hidden = [1.0, 2.0, 10.0, 20.0, 3.0, 5.0, 6.0, -1.0, 0.0, 0.0];
        let f = pool(&hidden, h, &[1..2, 2..5], Combine::Concat);
        assert_eq!(&f[..4], &[1.0, 2.0, 10.0, 20.0]);
        assert_eq!(&f[4..], &[1.0, 2.0, 3.0, 4.0 / 3.0]);
        let s = pool(&hidden, h, &[Range { start: 1, end: 2 }], Combine::Sum);
        assert_eq!(s, vec![11.0, 22.0]);
    }

    #[test]
    fn head_dimensions() {
        let enc = EncoderModel::<f32>::init(EncoderConfig::toy(261), 0).unwrap();
        let tags = TagSet {
            tags: (0..10).map(|i| format!("T{i}")).collect(),
        };
        let t = Tagger::new(enc, BpeModel::byte_level(), tags, HeadConfig::default(), 0).unwrap();
        assert_eq!(t.head_input_dim(), 128);
        assert_eq!(t.head_output_dim(), 10);
        assert!(t.tag(&[]).unwrap().is_empty());
    }

    #[test]
    fn head_gradients_match_differences() {
        for (combine, activation) in [(Combine::Concat, Activation::Tanh), (Combine::Sum, Activation::Identity)] {
            let cfg = EncoderConfig {
                n_layers: 1,
                hidden_dim: 8,
                n_heads: 2,
                ffn_dim: 16,
                max_positions: 32,
                init_std: 0.3,
                ..EncoderConfig::toy(261)
            };
            let enc = EncoderModel::<f64>::init(cfg, 3).unwrap();
            let s = TaggedSentence::new(words("ab cde f"), words("X Y X")).unwrap();
            let head = HeadConfig {
                combine,
                activation,
                hidden: 6,
            };
            let mut t = Tagger::new(enc, BpeModel::byte_level(), TagSet::from_sentences(std::slice::from_ref(&s)), head, 1).unwrap();
            for p in &mut t.head {
                for (i, x) in p.data.iter_mut().enumerate() {
                    *x += 0.1 * ((i * 7 % 5) as f64 - 2.0);
                }
            }
            let (_, eg, hg) = t.sentence_grads(&s, 1.0, None).unwrap();
            let loss = |t: &Tagger<f64>| t.sentence_grads(&s, 1.0, None).unwrap().0;
            let h = 1e-5;
            for k in [0, 5, 11] {
                let mut up = t.clone();
                up.head[W1].data[k] += h;
                let mut dn = t.clone();
                dn.head[W1].data[k] -= h;
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                assert!((num - hg[W1].data[k]).abs() < 1e-7, "{num} {}", hg[W1].data[k]);
            }
            let tok = 5 + b'c' as usize;
            for d in 0..8 {
                let k = tok * 8 + d;
                let mut up = t.clone();
                up.encoder.params_mut()[0].data[k] += h;
                let mut dn = t.clone();
                dn.encoder.params_mut()[0].data[k] -= h;
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                assert!((num - eg[0].data[k]).abs() < 1e-7, "{num} {}", eg[0].data[k]);
            }
        }
    }

    #[test]
    fn unknown_dev_tag_is_rejected() {
        let train = vec![TaggedSentence::new(words("a b"), words("N V")).unwrap()];
        let dev = vec![TaggedSentence::new(words("a"), words("ADJ")).unwrap()];
        let ts = TagSet::from_sentences(&train);
        assert_eq!(ts.tags, vec!["N", "V"]);
        assert!(ts.check(&dev).is_err());
    }

    #[test]
    fn century_and_period_examples() {
        assert_eq!(century_and_period(1624).unwrap(), (17, Period::Preclassical));
        assert_eq!(century_and_period(1650).unwrap(), (17, Period::Classical));
        assert_eq!(century_and_period(1700).unwrap().0, 17);
        assert_eq!(century_and_period(1630).unwrap().1, Period::Classical);
        assert_eq!(century_and_period(1689).unwrap().1, Period::Other);
        assert_eq!(century_and_period(1500).unwrap(), (15, Period::Preclassical));
        assert!(century_and_period(999).is_err());
        assert_eq!(century_label(17), "17th c.");
        assert_eq!(century_label(21), "21st c.");
        assert_eq!(century_label(11), "11th c.");
    }

    #[test]
    fn report_cells() {
        let mut r = EvalReport::default();
        r.add(State::Normalised, GenreClass::Drama, 17, 9, 10);
        assert_eq!(r.accuracy(State::Normalised, Some(GenreClass::Drama), 17), Some(90.0));

        let mut r = EvalReport::default();
        r.add(State::Original, GenreClass::Drama, 16, 90, 100);
        r.add(State::Original, GenreClass::Varia, 16, 300, 300);
        let both = r.accuracy(State::Original, None, 16).unwrap();
        assert_eq!(format!("{both:.2}"), "97.50");
        assert!((90.0..=100.0).contains(&both));
        assert_eq!(r.accuracy(State::Original, None, 19), None);

        let grid = r.render_grid();
        let both_line = grid.lines().find(|l| l.starts_with("Both")).unwrap();
        let cols: Vec<&str> = both_line.split_whitespace().collect();
        assert_eq!(cols, vec!["Both", "97.50", "-", "-", "-", "-", "97.50"]);
        assert!(r.render_tsv().contains("original\tboth\t16\t390\t400\t97.50"));
        assert!(r.render_tsv().contains("normalised\tdrama\t19\t0\t0\t-"));
    }

    #[test]
    fn tagged_format_round_trip() {
        let text = "# id = d1\n# year = 1624\nIe\tPRO\nvoy\tVER\n\nfin\tNOM\n\n# id = d2\nla\tDET\n";
        let docs = parse_tagged(text).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].sentences.len(), 2);
        assert_eq!(docs[0].meta["year"], "1624");
        assert_eq!(docs[1].sentences[0].gold_tags, vec!["DET"]);
        assert_eq!(parse_tagged(&render_tagged(&docs)).unwrap(), docs);
        let err = parse_tagged("a b\tX\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    fn small_tagger(train: &[TaggedSentence], seed: u64) -> Tagger<f32> {
        let enc = EncoderModel::<f32>::init(EncoderConfig::toy(261), seed).unwrap();
        Tagger::new(enc, BpeModel::byte_level(), TagSet::from_sentences(train), HeadConfig::default(), seed).unwrap()
    }

    fn quick_config() -> FinetuneConfig {
        FinetuneConfig {
            lr: 1e-3,
            epochs: 3,
            batch_sentences: 8,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn single_tag_corpus_predicts_that_tag() {
        let mut train = crate::synthetic::suffix_tagged(12, 4);
        for s in &mut train {
            s.gold_tags.iter_mut().for_each(|t| *t = "NOUN".into());
        }
        let cfg = FinetuneConfig {
            epochs: 1,
            ..quick_config()
        };
        let out = finetune(small_tagger(&train, 1), &train, &train, &cfg).unwrap();
        assert_eq!(out.dev_trace, vec![1.0]);
        let probe = vec![words("quelque mot inconnu")];
        assert_eq!(out.tagger.tag(&probe).unwrap(), vec![words("NOUN NOUN NOUN")]);
    }

    #[test]
    fn finetuning_is_deterministic_and_round_trips() {
        let train = crate::synthetic::suffix_tagged(24, 5);
        let dev = crate::synthetic::suffix_tagged(8, 6);
        let cfg = FinetuneConfig {
            epochs: 2,
            ..quick_config()
        };
        let a = finetune(small_tagger(&train, 2), &train, &dev, &cfg).unwrap();
        let b = finetune(small_tagger(&train, 2), &train, &dev, &cfg).unwrap();
        assert_eq!(a.dev_trace, b.dev_trace);
        assert_eq!(a.tagger.head, b.tagger.head);
        assert_eq!(a.tagger.encoder.params(), b.tagger.encoder.params());
        assert_eq!(a.dev_trace.len(), 2);
        assert_eq!(a.dev_trace[a.best_epoch - 1], a.dev_trace.iter().cloned().fold(0.0, f64::max));

        let dir = tempfile::tempdir().unwrap();
        a.tagger.save(dir.path()).unwrap();
        let back = Tagger::<f32>::load(dir.path()).unwrap();
        let toks: Vec<Vec<String>> = dev.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(back.tag(&toks).unwrap(), a.tagger.tag(&toks).unwrap());
    }

    #[test]
    fn golden_prediction() {
        let train = crate::synthetic::suffix_tagged(120, 8);
        let out = finetune(small_tagger(&train, 3), &train, &train[..20], &quick_config()).unwrap();
        let probe = words("boument chaoit rieux toulion mapier .");
        let got = out.tagger.tag(&[probe]).unwrap().remove(0);
        // Pinned output of a short, deliberately under-trained run.
        assert_eq!(got, words("ADV VER ADJ VER NOM PONCT"));
    }

    proptest::proptest! {
        #[test]
        fn argmax_ignores_positive_scaling(
            logits in proptest::collection::vec(-50.0f64..50.0, 12),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = logits.iter().map(|x| x * c).collect();
            proptest::prop_assert_eq!(argmax_rows(&scaled, 4), argmax_rows(&logits, 4));
        }
    }
}

//! Bidirectional transformer encoder with a masked-LM head and hand-written
//! backward pass.
//!
//! Layout follows RoBERTa: token plus learned absolute position embeddings,
//! embedding LayerNorm, `n_layers` blocks of multi-head self-attention and a
//! GELU feed-forward, then a head `dense -> GELU -> LayerNorm -> vocab`
//! whose projection is tied to the token embeddings by default. Blocks are
//! post-norm unless configured otherwise; the pre-norm variant adds a final
//! LayerNorm after the stack.
//!
//! Weight matrices are stored `[d_in, d_out]`, row-major.

use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bpe::TokenId;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{
    dot, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, softmax_in_place, LnCache, Scalar, Tensor, TensorSpec,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    #[default]
    Post,
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
    /// Standard deviation of the zero-mean normal used for weight matrices
    /// and embeddings.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::base(32_768)
    }
}

impl EncoderConfig {
    /// 12 layers, 768 hidden, 12 heads, 3072 feed-forward.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ffn_dim: 3072,
            max_positions: 512,
            vocab_size,
            dropout: 0.1,
            norm: NormPlacement::Post,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// 2 layers, 64 hidden, 2 heads, 128 feed-forward.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 2,
            ffn_dim: 128,
            max_positions: 128,
            ..Self::base(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("layer, hidden, head and feed-forward sizes must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if self.vocab_size <= crate::bpe::MASK as usize {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is not in [0, 1)", self.dropout));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 || self.init_std.is_nan() || self.init_std < 0.0 {
            return bad("layer_norm_eps must be positive and init_std nonnegative".into());
        }
        Ok(())
    }

    /// Number of scalar parameters, from shapes alone.
    pub fn param_count(&self) -> usize {
        Layout::new(self).specs.iter().map(TensorSpec::numel).sum()
    }

    pub fn param_specs(&self) -> Vec<TensorSpec> {
        Layout::new(self).specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<TensorSpec>,
    init: Vec<InitKind>,
    tok: usize,
    pos: usize,
    emb_ln: (usize, usize),
    layers: Vec<LayerIds>,
    final_ln: Option<(usize, usize)>,
    head_w: usize,
    head_b: usize,
    head_ln: (usize, usize),
    out_w: Option<usize>,
    out_b: usize,
}

impl Layout {
    fn new(c: &EncoderConfig) -> Self {
        let mut specs = Vec::new();
        let mut init = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: InitKind| {
            specs.push(TensorSpec { name, shape });
            init.push(kind);
            specs.len() - 1
        };
        let (h, f, v) = (c.hidden_dim, c.ffn_dim, c.vocab_size);
        use InitKind::*;
        let tok = add("embeddings.token".into(), vec![v, h], Normal);
        let pos = add("embeddings.position".into(), vec![c.max_positions, h], Normal);
        let emb_ln = (
            add("embeddings.norm.gain".into(), vec![h], One),
            add("embeddings.norm.bias".into(), vec![h], Zero),
        );
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                wq: add(p("attention.query.weight"), vec![h, h], Normal),
                bq: add(p("attention.query.bias"), vec![h], Zero),
                wk: add(p("attention.key.weight"), vec![h, h], Normal),
                bk: add(p("attention.key.bias"), vec![h], Zero),
                wv: add(p("attention.value.weight"), vec![h, h], Normal),
                bv: add(p("attention.value.bias"), vec![h], Zero),
                wo: add(p("attention.output.weight"), vec![h, h], Normal),
                bo: add(p("attention.output.bias"), vec![h], Zero),
                ln1_g: add(p("attention.norm.gain"), vec![h], One),
                ln1_b: add(p("attention.norm.bias"), vec![h], Zero),
                w1: add(p("ffn.inner.weight"), vec![h, f], Normal),
                b1: add(p("ffn.inner.bias"), vec![f], Zero),
                w2: add(p("ffn.outer.weight"), vec![f, h], Normal),
                b2: add(p("ffn.outer.bias"), vec![h], Zero),
                ln2_g: add(p("ffn.norm.gain"), vec![h], One),
                ln2_b: add(p("ffn.norm.bias"), vec![h], Zero),
            });
        }
        let final_ln = (c.norm == NormPlacement::Pre).then(|| {
            (
                add("final_norm.gain".into(), vec![h], One),
                add("final_norm.bias".into(), vec![h], Zero),
            )
        });
        let head_w = add("head.dense.weight".into(), vec![h, h], Normal);
        let head_b = add("head.dense.bias".into(), vec![h], Zero);
        let head_ln = (
            add("head.norm.gain".into(), vec![h], One),
            add("head.norm.bias".into(), vec![h], Zero),
        );
        let out_w = (!c.tie_embeddings).then(|| add("head.output.weight".into(), vec![v, h], Normal));
        let out_b = add("head.output.bias".into(), vec![v], Zero);
        Self {
            specs,
            init,
            tok,
            pos,
            emb_ln,
            layers,
            final_ln,
            head_w,
            head_b,
            head_ln,
            out_w,
            out_b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    probs_mask: Option<Vec<T>>,
    ctx: Vec<T>,
    out_mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct FfnCache<T> {
    input: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    out_mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    attn: AttnCache<T>,
    ffn: FfnCache<T>,
    ln1: LnCache<T>,
    ln2: LnCache<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    pre_act: Vec<T>,
    act: Vec<T>,
    ln: LnCache<T>,
    z: Vec<T>,
}

/// Activations of one forward pass, kept for [`EncoderModel::backward`].
///
/// Dropout masks drawn during the pass are recorded here, so backward is
/// exact in train mode too.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    ids: Vec<TokenId>,
    hidden_dim: usize,
    vocab_size: usize,
    n_heads: usize,
    emb_ln: LnCache<T>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    layer_outputs: Vec<Vec<T>>,
    final_ln: Option<LnCache<T>>,
    hidden: Vec<T>,
    head: Option<HeadCache<T>>,
    logits: Option<Vec<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Final hidden states, `[N, hidden_dim]`.
    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }

    pub fn hidden_row(&self, i: usize) -> &[T] {
        &self.hidden[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    /// Output of block `layer` before any final norm, `[N, hidden_dim]`.
    pub fn layer_output(&self, layer: usize) -> &[T] {
        &self.layer_outputs[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_outputs.len()
    }

    /// MLM scores `[N, vocab_size]`, when the head was run.
    pub fn logits(&self) -> Option<&[T]> {
        self.logits.as_deref()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Softmax attention weights of block `layer`, `[n_heads, N, N]`, before
    /// dropout.
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].attn.probs
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
}

fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: Option<&mut (dyn RngCore + '_)>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let scale = T::of(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                if u < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

/// Disjoint mutable views of two gradient tensors.
fn pair_mut<T>(grads: &mut [Tensor<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = grads.split_at_mut(b);
        (&mut lo[a].data, &mut hi[0].data)
    } else {
        let (lo, hi) = grads.split_at_mut(a);
        (&mut hi[0].data, &mut lo[b].data)
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Weights and embeddings ~ N(0, init_std²), biases 0, gains 1.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let params = layout
            .specs
            .iter()
            .zip(&layout.init)
            .map(|(spec, kind)| {
                let n = spec.numel();
                let data = match kind {
                    InitKind::Normal => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
                    InitKind::Zero => vec![T::zero(); n],
                    InitKind::One => vec![T::one(); n],
                };
                Tensor {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Wraps existing tensors, checking names and shapes against `config`.
    pub fn from_params(config: EncoderConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&layout.specs) {
            if p.name != s.name || p.shape != s.shape || p.data.len() != s.numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, s.name, s.shape
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        crate::tensor::zeros_like_all(&self.params)
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    fn output_matrix(&self) -> &[T] {
        self.p(self.layout.out_w.unwrap_or(self.layout.tok))
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidTokenId {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states and MLM logits. Dropout is active only when `dropout`
    /// supplies a generator.
    pub fn forward(&self, ids: &[TokenId], dropout: Option<&mut dyn RngCore>) -> Result<ForwardPass<T>> {
        self.forward_with(ids, dropout, true)
    }

    /// Like [`forward`](Self::forward) but skips the vocabulary projection.
    pub fn forward_hidden(
        &self,
        ids: &[TokenId],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass<T>> {
        self.forward_with(ids, dropout, false)
    }

    fn forward_with(
        &self,
        ids: &[TokenId],
        mut dropout: Option<&mut (dyn RngCore + '_)>,
        with_head: bool,
    ) -> Result<ForwardPass<T>> {
        self.check_ids(ids)?;
        let c = &self.config;
        let (n, h) = (ids.len(), c.hidden_dim);
        let eps = T::of(c.layer_norm_eps);
        let lay = &self.layout;

        let mut x0 = vec![T::zero(); n * h];
        let (tok, pos) = (self.p(lay.tok), self.p(lay.pos));
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut x0[i * h..(i + 1) * h];
            row.copy_from_slice(&tok[id as usize * h..(id as usize + 1) * h]);
            add_into(row, &pos[i * h..(i + 1) * h]);
        }
        let (mut x, emb_ln) =
            layer_norm_forward(&x0, n, h, self.p(lay.emb_ln.0), self.p(lay.emb_ln.1), eps);
        let emb_mask = dropout_mask(n * h, c.dropout, dropout.as_deref_mut());
        apply_mask(&mut x, &emb_mask);

        let mut layers = Vec::with_capacity(c.n_layers);
        let mut layer_outputs = Vec::with_capacity(c.n_layers);
        for ids in &lay.layers {
            let (out, cache) = self.layer_forward(ids, &x, n, dropout.as_deref_mut());
            layers.push(cache);
            layer_outputs.push(out.clone());
            x = out;
        }

        let (hidden, final_ln) = match lay.final_ln {
            Some((g, b)) => {
                let (y, cache) = layer_norm_forward(&x, n, h, self.p(g), self.p(b), eps);
                (y, Some(cache))
            }
            None => (x, None),
        };

        let (head, logits) = if with_head {
            let (logits, cache) = self.head_forward(&hidden, n);
            (Some(cache), Some(logits))
        } else {
            (None, None)
        };

        Ok(ForwardPass {
            ids: ids.to_vec(),
            hidden_dim: h,
            vocab_size: c.vocab_size,
            n_heads: c.n_heads,
            emb_ln,
            emb_mask,
            layers,
            layer_outputs,
            final_ln,
            hidden,
            head,
            logits,
        })
    }

    fn layer_forward(
        &self,
        l: &LayerIds,
        x: &[T],
        n: usize,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Vec<T>, LayerCache<T>) {
        let h = self.config.hidden_dim;
        let eps = T::of(self.config.layer_norm_eps);
        match self.config.norm {
            NormPlacement::Post => {
                let (a, attn) = self.attention_forward(l, x.to_vec(), n, rng.as_deref_mut());
                let mut r1 = x.to_vec();
                add_into(&mut r1, &a);
                let (h1, ln1) = layer_norm_forward(&r1, n, h, self.p(l.ln1_g), self.p(l.ln1_b), eps);
                let (f, ffn) = self.ffn_forward(l, h1.clone(), n, rng);
                let mut r2 = h1;
                add_into(&mut r2, &f);
                let (out, ln2) = layer_norm_forward(&r2, n, h, self.p(l.ln2_g), self.p(l.ln2_b), eps);
                (out, LayerCache { attn, ffn, ln1, ln2 })
            }
            NormPlacement::Pre => {
                let (u1, ln1) = layer_norm_forward(x, n, h, self.p(l.ln1_g), self.p(l.ln1_b), eps);
                let (a, attn) = self.attention_forward(l, u1, n, rng.as_deref_mut());
                let mut h1 = x.to_vec();
                add_into(&mut h1, &a);
                let (u2, ln2) = layer_norm_forward(&h1, n, h, self.p(l.ln2_g), self.p(l.ln2_b), eps);
                let (f, ffn) = self.ffn_forward(l, u2, n, rng);
                let mut out = h1;
                add_into(&mut out, &f);
                (out, LayerCache { attn, ffn, ln1, ln2 })
            }
        }
    }

    fn attention_forward(
        &self,
        l: &LayerIds,
        input: Vec<T>,
        n: usize,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Vec<T>, AttnCache<T>) {
        let c = &self.config;
        let (h, heads, dh) = (c.hidden_dim, c.n_heads, c.head_dim());
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let q = linear_forward(&input, n, h, self.p(l.wq), self.p(l.bq), h);
        let k = linear_forward(&input, n, h, self.p(l.wk), self.p(l.bk), h);
        let v = linear_forward(&input, n, h, self.p(l.wv), self.p(l.bv), h);

        let mut probs = vec![T::zero(); heads * n * n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let qi = &q[i * h + off..i * h + off + dh];
                let row = &mut probs[(hd * n + i) * n..(hd * n + i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = scale * dot(qi, &k[j * h + off..j * h + off + dh]);
                }
                softmax_in_place(row);
            }
        }
        let probs_mask = dropout_mask(heads * n * n, c.dropout, rng.as_deref_mut());

        let mut ctx = vec![T::zero(); n * h];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let base = (hd * n + i) * n;
                let ci = &mut ctx[i * h + off..i * h + off + dh];
                for j in 0..n {
                    let mut w = probs[base + j];
                    if let Some(m) = &probs_mask {
                        w = w * m[base + j];
                    }
                    if w == T::zero() {
                        continue;
                    }
                    for (cv, &vv) in ci.iter_mut().zip(&v[j * h + off..j * h + off + dh]) {
                        *cv = *cv + w * vv;
                    }
                }
            }
        }
        let mut out = linear_forward(&ctx, n, h, self.p(l.wo), self.p(l.bo), h);
        let out_mask = dropout_mask(n * h, c.dropout, rng);
        apply_mask(&mut out, &out_mask);
        (
            out,
            AttnCache {
                input,
                q,
                k,
                v,
                probs,
                probs_mask,
                ctx,
                out_mask,
            },
        )
    }

    fn ffn_forward(
        &self,
        l: &LayerIds,
        input: Vec<T>,
        n: usize,
        rng: Option<&mut (dyn RngCore + '_)>,
    ) -> (Vec<T>, FfnCache<T>) {
        let (h, f) = (self.config.hidden_dim, self.config.ffn_dim);
        let pre_act = linear_forward(&input, n, h, self.p(l.w1), self.p(l.b1), f);
        let act: Vec<T> = pre_act.iter().map(|&x| gelu(x)).collect();
        let mut out = linear_forward(&act, n, f, self.p(l.w2), self.p(l.b2), h);
        let out_mask = dropout_mask(n * h, self.config.dropout, rng);
        apply_mask(&mut out, &out_mask);
        (
            out,
            FfnCache {
                input,
                pre_act,
                act,
                out_mask,
            },
        )
    }

    fn head_forward(&self, hidden: &[T], n: usize) -> (Vec<T>, HeadCache<T>) {
        let (h, vsz) = (self.config.hidden_dim, self.config.vocab_size);
        let lay = &self.layout;
        let pre_act = linear_forward(hidden, n, h, self.p(lay.head_w), self.p(lay.head_b), h);
        let act: Vec<T> = pre_act.iter().map(|&x| gelu(x)).collect();
        let (z, ln) = layer_norm_forward(
            &act,
            n,
            h,
            self.p(lay.head_ln.0),
            self.p(lay.head_ln.1),
            T::of(self.config.layer_norm_eps),
        );
        let e = self.output_matrix();
        let ob = self.p(lay.out_b);
        let mut logits = vec![T::zero(); n * vsz];
        for i in 0..n {
            let zi = &z[i * h..(i + 1) * h];
            for (vi, out) in logits[i * vsz..(i + 1) * vsz].iter_mut().enumerate() {
                *out = dot(zi, &e[vi * h..(vi + 1) * h]) + ob[vi];
            }
        }
        (
            logits,
            HeadCache {
                pre_act,
                act,
                ln,
                z,
            },
        )
    }

    /// Gradients of a scalar loss given its cotangents with respect to the
    /// logits and/or the final hidden states.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        d_logits: Option<&[T]>,
        d_hidden: Option<&[T]>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.zero_grads();
        self.backward_into(pass, d_logits, d_hidden, &mut grads)?;
        Ok(grads)
    }

    /// Adds this pass's gradients to `grads`.
    pub fn backward_into(
        &self,
        pass: &ForwardPass<T>,
        d_logits: Option<&[T]>,
        d_hidden: Option<&[T]>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let c = &self.config;
        let (n, h) = (pass.len(), c.hidden_dim);
        let lay = &self.layout;
        if grads.len() != self.params.len() {
            return Err(Error::InvalidInput("gradient buffer does not match the model".into()));
        }
        let mut dx = match d_hidden {
            Some(d) if d.len() != n * h => {
                return Err(Error::InvalidInput(format!(
                    "hidden cotangent has {} values, expected {}",
                    d.len(),
                    n * h
                )))
            }
            Some(d) => d.to_vec(),
            None => vec![T::zero(); n * h],
        };
        if let Some(dl) = d_logits {
            let head = pass.head.as_ref().ok_or_else(|| {
                Error::InvalidInput("logit cotangent given for a pass without the MLM head".into())
            })?;
            if dl.len() != n * c.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "logit cotangent has {} values, expected {}",
                    dl.len(),
                    n * c.vocab_size
                )));
            }
            let d_head = self.head_backward(pass, head, dl, grads);
            add_into(&mut dx, &d_head);
        }

        if let (Some((g, b)), Some(cache)) = (lay.final_ln, &pass.final_ln) {
            let (dg, db) = pair_mut(grads, g, b);
            dx = layer_norm_backward(&dx, cache, h, self.p(g), dg, db);
        }

        for (l, cache) in lay.layers.iter().zip(&pass.layers).rev() {
            dx = self.layer_backward(l, cache, dx, n, grads);
        }

        apply_mask(&mut dx, &pass.emb_mask);
        let d_x0 = {
            let (dg, db) = pair_mut(grads, lay.emb_ln.0, lay.emb_ln.1);
            layer_norm_backward(&dx, &pass.emb_ln, h, self.p(lay.emb_ln.0), dg, db)
        };
        for (i, &id) in pass.ids.iter().enumerate() {
            let row = &d_x0[i * h..(i + 1) * h];
            let id = id as usize;
            add_into(&mut grads[lay.tok].data[id * h..(id + 1) * h], row);
            add_into(&mut grads[lay.pos].data[i * h..(i + 1) * h], row);
        }
        Ok(())
    }

    fn head_backward(
        &self,
        pass: &ForwardPass<T>,
        cache: &HeadCache<T>,
        dl: &[T],
        grads: &mut [Tensor<T>],
    ) -> Vec<T> {
        let (n, h, vsz) = (pass.len(), self.config.hidden_dim, self.config.vocab_size);
        let lay = &self.layout;
        let e_idx = lay.out_w.unwrap_or(lay.tok);
        let e = self.p(e_idx);
        let mut dz = vec![T::zero(); n * h];
        {
            let (de, dob) = pair_mut(grads, e_idx, lay.out_b);
            for i in 0..n {
                let zi = &cache.z[i * h..(i + 1) * h];
                let dzi = &mut dz[i * h..(i + 1) * h];
                for vi in 0..vsz {
                    let g = dl[i * vsz + vi];
                    if g == T::zero() {
                        continue;
                    }
                    dob[vi] = dob[vi] + g;
                    let ev = &e[vi * h..(vi + 1) * h];
                    let dev = &mut de[vi * h..(vi + 1) * h];
                    for d in 0..h {
                        dev[d] = dev[d] + g * zi[d];
                        dzi[d] = dzi[d] + g * ev[d];
                    }
                }
            }
        }
        let mut d_act = {
            let (dg, db) = pair_mut(grads, lay.head_ln.0, lay.head_ln.1);
            layer_norm_backward(&dz, &cache.ln, h, self.p(lay.head_ln.0), dg, db)
        };
        for (d, &x) in d_act.iter_mut().zip(&cache.pre_act) {
            *d = *d * gelu_grad(x);
        }
        let _ = &cache.act;
        let (dw, db) = pair_mut(grads, lay.head_w, lay.head_b);
        linear_backward(&pass.hidden, &d_act, n, h, h, self.p(lay.head_w), dw, db)
    }

    fn layer_backward(
        &self,
        l: &LayerIds,
        cache: &LayerCache<T>,
        d_out: Vec<T>,
        n: usize,
        grads: &mut [Tensor<T>],
    ) -> Vec<T> {
        let h = self.config.hidden_dim;
        match self.config.norm {
            NormPlacement::Post => {
                let d_r2 = {
                    let (dg, db) = pair_mut(grads, l.ln2_g, l.ln2_b);
                    layer_norm_backward(&d_out, &cache.ln2, h, self.p(l.ln2_g), dg, db)
                };
                let mut d_h1 = self.ffn_backward(l, &cache.ffn, &d_r2, n, grads);
                add_into(&mut d_h1, &d_r2);
                let d_r1 = {
                    let (dg, db) = pair_mut(grads, l.ln1_g, l.ln1_b);
                    layer_norm_backward(&d_h1, &cache.ln1, h, self.p(l.ln1_g), dg, db)
                };
                let mut dx = self.attention_backward(l, &cache.attn, &d_r1, n, grads);
                add_into(&mut dx, &d_r1);
                dx
            }
            NormPlacement::Pre => {
                let d_u2 = self.ffn_backward(l, &cache.ffn, &d_out, n, grads);
                let mut d_h1 = {
                    let (dg, db) = pair_mut(grads, l.ln2_g, l.ln2_b);
                    layer_norm_backward(&d_u2, &cache.ln2, h, self.p(l.ln2_g), dg, db)
                };
                add_into(&mut d_h1, &d_out);
                let d_u1 = self.attention_backward(l, &cache.attn, &d_h1, n, grads);
                let mut dx = {
                    let (dg, db) = pair_mut(grads, l.ln1_g, l.ln1_b);
                    layer_norm_backward(&d_u1, &cache.ln1, h, self.p(l.ln1_g), dg, db)
                };
                add_into(&mut dx, &d_h1);
                dx
            }
        }
    }

    fn ffn_backward(
        &self,
        l: &LayerIds,
        cache: &FfnCache<T>,
        d_out: &[T],
        n: usize,
        grads: &mut [Tensor<T>],
    ) -> Vec<T> {
        let (h, f) = (self.config.hidden_dim, self.config.ffn_dim);
        let mut d = d_out.to_vec();
        apply_mask(&mut d, &cache.out_mask);
        let mut d_act = {
            let (dw, db) = pair_mut(grads, l.w2, l.b2);
            linear_backward(&cache.act, &d, n, f, h, self.p(l.w2), dw, db)
        };
        for (g, &x) in d_act.iter_mut().zip(&cache.pre_act) {
            *g = *g * gelu_grad(x);
        }
        let (dw, db) = pair_mut(grads, l.w1, l.b1);
        linear_backward(&cache.input, &d_act, n, h, f, self.p(l.w1), dw, db)
    }

    fn attention_backward(
        &self,
        l: &LayerIds,
        cache: &AttnCache<T>,
        d_out: &[T],
        n: usize,
        grads: &mut [Tensor<T>],
    ) -> Vec<T> {
        let c = &self.config;
        let (h, heads, dh) = (c.hidden_dim, c.n_heads, c.head_dim());
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut d = d_out.to_vec();
        apply_mask(&mut d, &cache.out_mask);
        let d_ctx = {
            let (dw, db) = pair_mut(grads, l.wo, l.bo);
            linear_backward(&cache.ctx, &d, n, h, h, self.p(l.wo), dw, db)
        };

        let mut dq = vec![T::zero(); n * h];
        let mut dk = vec![T::zero(); n * h];
        let mut dv = vec![T::zero(); n * h];
        let mut dp = vec![T::zero(); n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..n {
                let base = (hd * n + i) * n;
                let p = &cache.probs[base..base + n];
                let mask = cache.probs_mask.as_ref().map(|m| &m[base..base + n]);
                let dci = &d_ctx[i * h + off..i * h + off + dh];
                for j in 0..n {
                    let vj = &cache.v[j * h + off..j * h + off + dh];
                    let m = mask.map_or(T::one(), |m| m[j]);
                    dp[j] = dot(dci, vj) * m;
                    let w = p[j] * m;
                    if w != T::zero() {
                        for (g, &x) in dv[j * h + off..j * h + off + dh].iter_mut().zip(dci) {
                            *g = *g + w * x;
                        }
                    }
                }
                let inner = dot(&dp, p);
                let qi = &cache.q[i * h + off..i * h + off + dh];
                for j in 0..n {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &cache.k[j * h + off..j * h + off + dh];
                    for t in 0..dh {
                        dq[i * h + off + t] = dq[i * h + off + t] + ds * kj[t];
                        dk[j * h + off + t] = dk[j * h + off + t] + ds * qi[t];
                    }
                }
            }
        }

        let mut dx = {
            let (dw, db) = pair_mut(grads, l.wq, l.bq);
            linear_backward(&cache.input, &dq, n, h, h, self.p(l.wq), dw, db)
        };
        for (g, w, b) in [(&dk, l.wk, l.bk), (&dv, l.wv, l.bv)] {
            let (dw, db) = pair_mut(grads, w, b);
            let part = linear_backward(&cache.input, g, n, h, h, self.p(w), dw, db);
            add_into(&mut dx, &part);
        }
        dx
    }

    /// Writes `config.toml`, `params.bin` and `params.manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::write_toml(&dir.join("config.toml"), &self.config)?;
        checkpoint::save_tensors(dir, "params", &self.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: EncoderConfig = checkpoint::read_toml(&dir.join("config.toml"))?;
        let params = checkpoint::load_tensors(dir, "params")?;
        Self::from_params(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            max_positions: 16,
            ..EncoderConfig::toy(vocab)
        }
    }

    /// Hand-summed parameter count of the default (post-norm, tied) layout.
    fn closed_form(l: usize, h: usize, f: usize, v: usize, p: usize) -> usize {
        let embeddings = v * h + p * h + 2 * h;
        let attention = 4 * (h * h + h) + 2 * h;
        let ffn = h * f + f + f * h + h + 2 * h;
        let head = h * h + h + 2 * h + v;
        embeddings + l * (attention + ffn) + head
    }

    #[test]
    fn toy_param_count_matches_closed_form() {
        let c = EncoderConfig::toy(300);
        let m = EncoderModel::<f32>::init(c.clone(), 0).unwrap();
        assert_eq!(m.param_count(), closed_form(2, 64, 128, 300, 128));
        assert_eq!(c.param_count(), m.param_count());
        let untied = EncoderConfig {
            tie_embeddings: false,
            ..c.clone()
        };
        assert_eq!(untied.param_count(), c.param_count() + 300 * 64);
    }

    #[test]
    fn base_param_count_is_near_110m() {
        let n = EncoderConfig::base(32_768).param_count();
        assert_eq!(n, closed_form(12, 768, 3072, 32_768, 512));
        assert!((105_000_000..=115_000_000).contains(&n), "{n}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::toy(300)
        };
        assert!(EncoderModel::<f32>::init(bad_heads, 0).is_err());
        let bad_pos = EncoderConfig {
            max_positions: 1,
            ..EncoderConfig::toy(300)
        };
        assert!(bad_pos.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_documented() {
        let a = EncoderModel::<f32>::init(toy(300), 9).unwrap();
        let b = EncoderModel::<f32>::init(toy(300), 9).unwrap();
        let c = EncoderModel::<f32>::init(toy(300), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.param("layers.0.ffn.norm.gain").unwrap().data.iter().all(|&g| g == 1.0));
        assert!(a.param("layers.1.attention.query.bias").unwrap().data.iter().all(|&g| g == 0.0));
        let w = &a.param("embeddings.token").unwrap().data;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3 && (sd - 0.02).abs() < 1e-3, "{mean} {sd}");
    }

    #[test]
    fn shapes_and_attention_rows() {
        let m = EncoderModel::<f32>::init(toy(300), 1).unwrap();
        let ids = [0, 17, 99, 250, 4, 2];
        let pass = m.forward(&ids, None).unwrap();
        assert_eq!(pass.logits().unwrap().len(), ids.len() * 300);
        assert_eq!(pass.hidden().len(), ids.len() * 64);
        assert_eq!(pass.num_layers(), 2);
        for l in 0..2 {
            let a = pass.attention(l);
            for row in a.chunks(ids.len()) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        let too_long = vec![5; 17];
        assert!(matches!(
            m.forward(&too_long, None),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(m.forward(&[300], None).is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = EncoderModel::<f32>::init(toy(300), 1).unwrap();
        let ids = [0, 17, 99, 2];
        let a = m.forward(&ids, None).unwrap();
        let b = m.forward(&ids, None).unwrap();
        assert_eq!(a.logits(), b.logits());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = m.forward(&ids, Some(&mut rng)).unwrap();
        assert_ne!(a.logits(), t.logits());
    }

    /// First verified run of the toy model, pinned.
    #[test]
    fn golden_logits() {
        let m = EncoderModel::<f64>::init(toy(300), 42).unwrap();
        let pass = m.forward(&[0, 72, 105, 33, 2], None).unwrap();
        let logits = pass.logits().unwrap();
        let probe: Vec<f64> = [0usize, 1, 299, 372, 901, 1499]
            .iter()
            .map(|&i| logits[i])
            .collect();
        let golden = GOLDEN;
        for (a, g) in probe.iter().zip(golden) {
            assert!((a - g).abs() < 1e-9, "{probe:?}");
        }
    }

    const GOLDEN: [f64; 6] = [
        0.09372742389740969,
        0.20360753318257552,
        -0.07530827311802324,
        0.3853246608310057,
        -0.15829079428947462,
        -0.17625507298144974,
    ];

    #[test]
    fn permutation_equivariance_without_positions() {
        let mut m = EncoderModel::<f64>::init(toy(300), 5).unwrap();
        m.param_mut("embeddings.position").unwrap().data.fill(0.0);
        let ids = [10u32, 20, 30, 40, 50, 60];
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
        let a = m.forward(&ids, None).unwrap();
        let b = m.forward(&permuted, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.hidden_row(i).iter().zip(b.hidden_row(k)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let m = EncoderModel::<f64>::init(toy(300), 5).unwrap();
        let pass = m.forward(&[0, 9, 8, 2], None).unwrap();
        let zeros = vec![0.0; pass.logits().unwrap().len()];
        let g = m.backward(&pass, Some(&zeros), None).unwrap();
        assert!(g.iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn dead_paths_get_exactly_zero_gradient() {
        let c = EncoderConfig {
            tie_embeddings: false,
            ..toy(300)
        };
        let m = EncoderModel::<f64>::init(c, 5).unwrap();
        let ids = [0u32, 9, 8, 2];
        let pass = m.forward(&ids, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dl: Vec<f64> = (0..ids.len() * 300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let untouched = 123;
        for i in 0..ids.len() {
            dl[i * 300 + untouched] = 0.0;
        }
        let g = m.backward(&pass, Some(&dl), None).unwrap();
        let find = |name: &str| g.iter().find(|t| t.name == name).unwrap();
        let out_w = find("head.output.weight");
        assert!(out_w.data[untouched * 64..(untouched + 1) * 64].iter().all(|&x| x == 0.0));
        assert!(out_w.data[124 * 64..125 * 64].iter().any(|&x| x != 0.0));
        assert_eq!(find("head.output.bias").data[untouched], 0.0);
        let pos = find("embeddings.position");
        assert!(pos.data[ids.len() * 64..].iter().all(|&x| x == 0.0));
        let tok = find("embeddings.token");
        assert!(tok.data[50 * 64..51 * 64].iter().all(|&x| x == 0.0));
    }

    /// Central differences at h = 1e-4 in f64 on a random linear functional
    /// of logits and hidden states. Weights are drawn wider than the default
    /// so attention is far from uniform and every path carries signal.
    fn gradient_check(config: EncoderConfig, train: bool) {
        let config = EncoderConfig {
            init_std: 0.2,
            ..config
        };
        let model = EncoderModel::<f64>::init(config.clone(), 11).unwrap();
        let ids = [0u32, 40, 41, 7, 99, 2];
        let n = ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cl: Vec<f64> = (0..n * config.vocab_size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ch: Vec<f64> = (0..n * config.hidden_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |m: &EncoderModel<f64>| {
            let mut drop = ChaCha8Rng::seed_from_u64(77);
            m.forward(&ids, train.then_some(&mut drop as &mut dyn RngCore)).unwrap()
        };
        let loss = |m: &EncoderModel<f64>| {
            let p = run(m);
            dot(p.logits().unwrap(), &cl) + dot(p.hidden(), &ch)
        };
        let grads = model.backward(&run(&model), Some(&cl), Some(&ch)).unwrap();

        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut probe = model.clone();
        for (t, g) in grads.iter().enumerate() {
            let len = g.len();
            let picks: Vec<usize> = if g.name == "embeddings.token" || g.name == "embeddings.position" {
                let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                let rows = if g.name == "embeddings.token" { rows } else { (0..n).collect() };
                rows.iter().map(|&r| r * config.hidden_dim + rng.random_range(0..config.hidden_dim)).collect()
            } else {
                (0..10).map(|_| rng.random_range(0..len)).collect()
            };
            for k in picks {
                let orig = probe.params[t].data[k];
                probe.params[t].data[k] = orig + h;
                let up = loss(&probe);
                probe.params[t].data[k] = orig - h;
                let down = loss(&probe);
                probe.params[t].data[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.data[k];
                if g.name.ends_with("attention.key.bias") {
                    // Shifts every score in a softmax row by the same amount.
                    assert!(analytic.abs() < 1e-12 && numeric.abs() < 1e-8, "{}", g.name);
                    continue;
                }
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(rel);
                assert!(rel < 1e-5, "{}[{k}]: analytic {analytic} numeric {numeric} rel {rel}", g.name);
            }
        }
        assert!(worst < 1e-5);
    }

    /// Denominator floor so rounding noise on near-zero gradients is not
    /// read as a relative error.
    const REL_FLOOR: f64 = 1e-5;

    #[test]
    fn gradient_check_post_norm_tied() {
        gradient_check(toy(120), false);
    }

    #[test]
    fn gradient_check_pre_norm_untied() {
        let c = EncoderConfig {
            norm: NormPlacement::Pre,
            tie_embeddings: false,
            ..toy(120)
        };
        gradient_check(c, false);
    }

    #[test]
    fn gradient_check_with_recorded_dropout() {
        gradient_check(toy(120), true);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EncoderModel::<f32>::init(toy(300), 4).unwrap();
        m.save(dir.path()).unwrap();
        let back = EncoderModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
    }
}

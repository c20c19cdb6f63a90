//! A small pre-norm causal transformer with exact reverse-mode gradients.
//!
//! Parameters live in one flat vector; [`Layout`] records where each tensor starts.
//! Layer `l` hidden state is the residual stream after block `l`, with layer 0 being the
//! token-plus-position embedding.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Decoder, ForwardTape, PolicyModel};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{affine, affine_backward, dot, Matrix};
use crate::toyenv::{decode_prompt_target, is_response_token, TokenId, PROMPT_LEN};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub init_std: f64,
    /// On task prompts, mask every response logit except content tokens and EOS.
    #[serde(default = "default_true")]
    pub response_alphabet: bool,
}

fn default_true() -> bool {
    true
}

/// Logit assigned to masked tokens; its probability underflows to exactly zero.
const MASKED_LOGIT: f64 = -1e9;

impl Default for TinyConfig {
    fn default() -> Self {
        Self { vocab_size: 32, d_model: 32, n_heads: 2, n_layers: 1, d_ff: 64, max_context: 80, init_std: 0.1, response_alphabet: true }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_context == 0 {
            return invalid("tiny model dimensions must be positive");
        }
        if !(1..=2).contains(&self.n_layers) {
            return invalid("tiny model supports one or two blocks");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return invalid("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(c: &TinyConfig) -> Self {
        let d = c.d_model;
        let mut off = 0;
        let mut take = |n: usize| {
            let s = off;
            off += n;
            s
        };
        let tok = take(c.vocab_size * d);
        let pos = take(c.max_context * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * c.d_ff),
                b1: take(c.d_ff),
                w2: take(c.d_ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * c.vocab_size);
        let b_out = take(c.vocab_size);
        Self { tok, pos, layers, lnf_g, lnf_b, w_out, b_out, total: off }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinySequenceModel<F> {
    cfg: TinyConfig,
    layout: Layout,
    params: Vec<F>,
}

struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1: NormCache<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    /// `[head][t][s]`, zero for `s > t`.
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: NormCache<F>,
    a2: Vec<F>,
    h_pre: Vec<F>,
    h_act: Vec<F>,
}

pub struct TinyTape<F> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    /// Residual stream after the embedding and after each block.
    hidden: Vec<Vec<F>>,
    lnf: NormCache<F>,
    af: Vec<F>,
    logits: Matrix<F>,
    /// First row whose logits were masked to the response alphabet.
    masked_from: Option<usize>,
}

impl<F> ForwardTape<F> for TinyTape<F> {
    fn logits(&self) -> &Matrix<F> {
        &self.logits
    }
}

impl<F: Scalar> TinyTape<F> {
    /// One `len × d_model` matrix per layer, embedding first.
    pub fn hidden_states(&self, d_model: usize) -> Vec<Matrix<F>> {
        let n = self.tokens.len();
        self.hidden
            .iter()
            .map(|h| Matrix::from_vec(n, d_model, h.clone()))
            .collect()
    }
}

fn layer_norm<F: Scalar>(x: &[F], n: usize, d: usize, g: &[F], b: &[F], out: &mut [F]) -> NormCache<F> {
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    let df = F::from_usize_lossy(d);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let r = F::one() / (var + F::lit(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * g[j] + b[j];
        }
    }
    NormCache { xhat, rstd }
}

/// Accumulates `dg`, `db` and writes `dx` (overwriting).
fn layer_norm_backward<F: Scalar>(cache: &NormCache<F>, n: usize, d: usize, g: &[F], dy: &[F], dg: &mut [F], db: &mut [F], dx: &mut [F]) {
    let df = F::from_usize_lossy(d);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        if dyi.iter().all(|&v| v == F::zero()) {
            dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = F::zero());
            continue;
        }
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
        }
        let mean_d = dxhat.iter().copied().sum::<F>() / df;
        let mean_dx = dot(&dxhat, xh) / df;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::lit(0.044715) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

impl<F: Scalar> TinySequenceModel<F> {
    pub fn new<R: Rng + ?Sized>(cfg: TinyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![F::zero(); layout.total];
        let mut normal = |slice: &mut [F], std: f64| {
            for x in slice {
                let z: f64 = StandardNormal.sample(rng);
                *x = F::lit(std * z);
            }
        };
        let d = cfg.d_model;
        let std = cfg.init_std;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        normal(&mut params[layout.tok..layout.tok + cfg.vocab_size * d], std);
        normal(&mut params[layout.pos..layout.pos + cfg.max_context * d], std);
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].iter_mut().for_each(|x| *x = F::one());
            params[l.ln2_g..l.ln2_g + d].iter_mut().for_each(|x| *x = F::one());
            normal(&mut params[l.w_qkv..l.w_qkv + 3 * d * d], std);
            normal(&mut params[l.w_o..l.w_o + d * d], resid_std);
            normal(&mut params[l.w1..l.w1 + d * cfg.d_ff], std);
            normal(&mut params[l.w2..l.w2 + cfg.d_ff * d], resid_std);
        }
        params[layout.lnf_g..layout.lnf_g + d].iter_mut().for_each(|x| *x = F::one());
        normal(&mut params[layout.w_out..layout.w_out + d * cfg.vocab_size], std);
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: TinyConfig, params: Vec<F>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Shape(format!("tiny model expects {} parameters, got {}", layout.total, params.len())));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> TinyConfig {
        self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return invalid("empty context");
        }
        if tokens.len() > self.cfg.max_context {
            return invalid(format!("context of {} tokens exceeds max_context {}", tokens.len(), self.cfg.max_context));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(())
    }

    fn slice(&self, start: usize, len: usize) -> &[F] {
        &self.params[start..start + len]
    }

    /// Full forward pass. Logits are produced for rows `logit_from..n`, other rows stay zero.
    fn run(&self, tokens: &[TokenId], logit_from: usize) -> Result<TinyTape<F>> {
        self.check_tokens(tokens)?;
        let c = &self.cfg;
        let (n, d, f, v) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();

        let mut x = vec![F::zero(); n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.slice(self.layout.tok + tok as usize * d, d);
            let pe = self.slice(self.layout.pos + t * d, d);
            for j in 0..d {
                x[t * d + j] = te[j] + pe[j];
            }
        }
        let mut hidden = vec![x.clone()];
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in &self.layout.layers {
            let mut a1 = vec![F::zero(); n * d];
            let ln1 = layer_norm(&x, n, d, self.slice(l.ln1_g, d), self.slice(l.ln1_b, d), &mut a1);
            let mut qkv = vec![F::zero(); n * 3 * d];
            affine(&a1, n, d, self.slice(l.w_qkv, 3 * d * d), self.slice(l.b_qkv, 3 * d), 3 * d, &mut qkv);
            let mut probs = vec![F::zero(); nh * n * n];
            let mut ctx = vec![F::zero(); n * d];
            for h in 0..nh {
                for t in 0..n {
                    let q = &qkv[t * 3 * d + h * dh..t * 3 * d + (h + 1) * dh];
                    let pr = &mut probs[(h * n + t) * n..(h * n + t) * n + n];
                    let mut max = F::neg_infinity();
                    for s in 0..=t {
                        let k = &qkv[s * 3 * d + d + h * dh..s * 3 * d + d + (h + 1) * dh];
                        let sc = dot(q, k) * scale;
                        pr[s] = sc;
                        max = max.max(sc);
                    }
                    let mut z = F::zero();
                    for p in pr.iter_mut().take(t + 1) {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let out = &mut ctx[t * d + h * dh..t * d + (h + 1) * dh];
                    for s in 0..=t {
                        pr[s] /= z;
                        let vv = &qkv[s * 3 * d + 2 * d + h * dh..s * 3 * d + 2 * d + (h + 1) * dh];
                        for (o, &vj) in out.iter_mut().zip(vv) {
                            *o += pr[s] * vj;
                        }
                    }
                }
            }
            let mut attn_out = vec![F::zero(); n * d];
            affine(&ctx, n, d, self.slice(l.w_o, d * d), self.slice(l.b_o, d), d, &mut attn_out);
            for (xi, &o) in x.iter_mut().zip(&attn_out) {
                *xi += o;
            }
            let mut a2 = vec![F::zero(); n * d];
            let ln2 = layer_norm(&x, n, d, self.slice(l.ln2_g, d), self.slice(l.ln2_b, d), &mut a2);
            let mut h_pre = vec![F::zero(); n * f];
            affine(&a2, n, d, self.slice(l.w1, d * f), self.slice(l.b1, f), f, &mut h_pre);
            let h_act: Vec<F> = h_pre.iter().map(|&u| gelu(u)).collect();
            let mut ff = vec![F::zero(); n * d];
            affine(&h_act, n, f, self.slice(l.w2, f * d), self.slice(l.b2, d), d, &mut ff);
            for (xi, &o) in x.iter_mut().zip(&ff) {
                *xi += o;
            }
            hidden.push(x.clone());
            layers.push(LayerCache { ln1, a1, qkv, probs, ctx, ln2, a2, h_pre, h_act });
        }
        let mut af = vec![F::zero(); n * d];
        let lnf = layer_norm(&x, n, d, self.slice(self.layout.lnf_g, d), self.slice(self.layout.lnf_b, d), &mut af);
        let mut logits = Matrix::zeros(n, v);
        let rows = n - logit_from.min(n);
        if rows > 0 {
            affine(
                &af[logit_from * d..],
                rows,
                d,
                self.slice(self.layout.w_out, d * v),
                self.slice(self.layout.b_out, v),
                v,
                &mut logits.as_mut_slice()[logit_from * v..],
            );
        }
        let masked_from = (c.response_alphabet && decode_prompt_target(tokens).is_some()).then_some(PROMPT_LEN - 1);
        if let Some(m) = masked_from {
            for t in m.max(logit_from)..n {
                for (k, l) in logits.row_mut(t).iter_mut().enumerate() {
                    if !is_response_token(k as TokenId) {
                        *l = F::lit(MASKED_LOGIT);
                    }
                }
            }
        }
        Ok(TinyTape { tokens: tokens.to_vec(), layers, hidden, lnf, af, logits, masked_from })
    }

    /// Per-layer residual-stream states for every position of `tokens`.
    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<Vec<Matrix<F>>> {
        Ok(self.run(tokens, tokens.len())?.hidden_states(self.cfg.d_model))
    }
}

/// Key/value cache for one-token-at-a-time decoding. Each new row goes through exactly the
/// arithmetic of [`TinySequenceModel::run`], so logits agree bit for bit.
struct CachedDecoder<'a, F> {
    model: &'a TinySequenceModel<F>,
    tokens: Vec<TokenId>,
    /// Per layer, `[t][k | v]` rows of width `2 * d_model`.
    kv: Vec<Vec<F>>,
}

impl<F: Scalar> CachedDecoder<'_, F> {
    fn push(&mut self, tok: TokenId, want_logits: bool) -> Result<Option<Vec<F>>> {
        let m = self.model;
        let c = &m.cfg;
        let t = self.tokens.len();
        if t >= c.max_context {
            return invalid(format!("context of {} tokens exceeds max_context {}", t + 1, c.max_context));
        }
        if tok as usize >= c.vocab_size {
            return Err(Error::UnknownToken(tok));
        }
        self.tokens.push(tok);
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let n = t + 1;

        let te = m.slice(m.layout.tok + tok as usize * d, d);
        let pe = m.slice(m.layout.pos + t * d, d);
        let mut x: Vec<F> = (0..d).map(|j| te[j] + pe[j]).collect();
        for (l, kv) in m.layout.layers.iter().zip(self.kv.iter_mut()) {
            let mut a1 = vec![F::zero(); d];
            layer_norm(&x, 1, d, m.slice(l.ln1_g, d), m.slice(l.ln1_b, d), &mut a1);
            let mut qkv = vec![F::zero(); 3 * d];
            affine(&a1, 1, d, m.slice(l.w_qkv, 3 * d * d), m.slice(l.b_qkv, 3 * d), 3 * d, &mut qkv);
            kv.extend_from_slice(&qkv[d..]);
            let mut ctx = vec![F::zero(); d];
            let mut pr = vec![F::zero(); n];
            for h in 0..nh {
                let q = &qkv[h * dh..(h + 1) * dh];
                let mut max = F::neg_infinity();
                for (s, p) in pr.iter_mut().enumerate() {
                    let k = &kv[s * 2 * d + h * dh..s * 2 * d + (h + 1) * dh];
                    let sc = dot(q, k) * scale;
                    *p = sc;
                    max = max.max(sc);
                }
                let mut z = F::zero();
                for p in pr.iter_mut() {
                    *p = (*p - max).exp();
                    z += *p;
                }
                let out = &mut ctx[h * dh..(h + 1) * dh];
                for (s, p) in pr.iter_mut().enumerate() {
                    *p /= z;
                    let vv = &kv[s * 2 * d + d + h * dh..s * 2 * d + d + (h + 1) * dh];
                    for (o, &vj) in out.iter_mut().zip(vv) {
                        *o += *p * vj;
                    }
                }
            }
            let mut attn_out = vec![F::zero(); d];
            affine(&ctx, 1, d, m.slice(l.w_o, d * d), m.slice(l.b_o, d), d, &mut attn_out);
            for (xi, &o) in x.iter_mut().zip(&attn_out) {
                *xi += o;
            }
            let mut a2 = vec![F::zero(); d];
            layer_norm(&x, 1, d, m.slice(l.ln2_g, d), m.slice(l.ln2_b, d), &mut a2);
            let mut h_pre = vec![F::zero(); f];
            affine(&a2, 1, d, m.slice(l.w1, d * f), m.slice(l.b1, f), f, &mut h_pre);
            let h_act: Vec<F> = h_pre.iter().map(|&u| gelu(u)).collect();
            let mut ff = vec![F::zero(); d];
            affine(&h_act, 1, f, m.slice(l.w2, f * d), m.slice(l.b2, d), d, &mut ff);
            for (xi, &o) in x.iter_mut().zip(&ff) {
                *xi += o;
            }
        }
        if !want_logits {
            return Ok(None);
        }
        let mut af = vec![F::zero(); d];
        layer_norm(&x, 1, d, m.slice(m.layout.lnf_g, d), m.slice(m.layout.lnf_b, d), &mut af);
        let mut logits = vec![F::zero(); v];
        affine(&af, 1, d, m.slice(m.layout.w_out, d * v), m.slice(m.layout.b_out, v), v, &mut logits);
        if c.response_alphabet && t + 1 >= PROMPT_LEN && decode_prompt_target(&self.tokens).is_some() {
            for (k, l) in logits.iter_mut().enumerate() {
                if !is_response_token(k as TokenId) {
                    *l = F::lit(MASKED_LOGIT);
                }
            }
        }
        Ok(Some(logits))
    }
}

impl<F: Scalar> Decoder<F> for CachedDecoder<'_, F> {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<F>> {
        let Some((&last, init)) = tokens.split_last() else {
            return invalid("decoder needs at least one token");
        };
        for &tok in init {
            self.push(tok, false)?;
        }
        Ok(self.push(last, true)?.expect("logits requested"))
    }
}

impl<F: Scalar> PolicyModel<F> for TinySequenceModel<F> {
    type Tape = TinyTape<F>;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn supports_arbitrary_context(&self) -> bool {
        true
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }

    fn forward(&self, tokens: &[TokenId]) -> Result<Self::Tape> {
        self.run(tokens, 0)
    }

    fn forward_from(&self, tokens: &[TokenId], logit_from: usize) -> Result<Self::Tape> {
        self.run(tokens, logit_from)
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<F>> {
        let tape = self.run(context, context.len() - 1)?;
        Ok(tape.logits.row(context.len() - 1).to_vec())
    }

    fn decoder(&self) -> Box<dyn Decoder<F> + '_> {
        Box::new(CachedDecoder { model: self, tokens: Vec::new(), kv: vec![Vec::new(); self.cfg.n_layers] })
    }

    fn backward(&self, tape: &Self::Tape, dlogits: &Matrix<F>, grad: &mut [F]) -> Result<()> {
        let c = &self.cfg;
        let (n, d, f, v) = (tape.tokens.len(), c.d_model, c.d_ff, c.vocab_size);
        let (nh, dh) = (c.n_heads, c.head_dim());
        if grad.len() != self.layout.total || dlogits.rows() != n || dlogits.cols() != v {
            return Err(Error::Shape("tiny model backward".into()));
        }
        let scale = F::one() / F::from_usize_lossy(dh).sqrt();
        let lay = &self.layout;
        let masked;
        let dlogits = match tape.masked_from {
            Some(m) => {
                let mut dm = dlogits.clone();
                for t in m..n {
                    for (k, g) in dm.row_mut(t).iter_mut().enumerate() {
                        if !is_response_token(k as TokenId) {
                            *g = F::zero();
                        }
                    }
                }
                masked = dm;
                &masked
            }
            None => dlogits,
        };

        let (head, rest) = grad.split_at_mut(lay.w_out);
        let (dw_out, db_out) = rest.split_at_mut(d * v);
        let mut daf = vec![F::zero(); n * d];
        affine_backward(&tape.af, n, d, self.slice(lay.w_out, d * v), v, dlogits.as_slice(), dw_out, &mut db_out[..v], Some(&mut daf));

        let mut dx = vec![F::zero(); n * d];
        {
            let (dg, db) = head[lay.lnf_g..lay.lnf_b + d].split_at_mut(d);
            layer_norm_backward(&tape.lnf, n, d, self.slice(lay.lnf_g, d), &daf, dg, db, &mut dx);
        }

        let mut tmp = vec![F::zero(); n * d];
        for (li, l) in lay.layers.iter().enumerate().rev() {
            let cache = &tape.layers[li];
            // Feed-forward sublayer.
            let mut dh_act = vec![F::zero(); n * f];
            {
                let (dw2, db2) = grad[l.w2..l.b2 + d].split_at_mut(f * d);
                affine_backward(&cache.h_act, n, f, self.slice(l.w2, f * d), d, &dx, dw2, db2, Some(&mut dh_act));
            }
            for (g, &u) in dh_act.iter_mut().zip(&cache.h_pre) {
                *g *= gelu_grad(u);
            }
            let mut da2 = vec![F::zero(); n * d];
            {
                let (dw1, db1) = grad[l.w1..l.b1 + f].split_at_mut(d * f);
                affine_backward(&cache.a2, n, d, self.slice(l.w1, d * f), f, &dh_act, dw1, db1, Some(&mut da2));
            }
            {
                let (dg, db) = grad[l.ln2_g..l.ln2_b + d].split_at_mut(d);
                layer_norm_backward(&cache.ln2, n, d, self.slice(l.ln2_g, d), &da2, dg, db, &mut tmp);
            }
            for (a, &b) in dx.iter_mut().zip(&tmp) {
                *a += b;
            }
            // Attention sublayer.
            let mut dctx = vec![F::zero(); n * d];
            {
                let (dwo, dbo) = grad[l.w_o..l.b_o + d].split_at_mut(d * d);
                affine_backward(&cache.ctx, n, d, self.slice(l.w_o, d * d), d, &dx, dwo, dbo, Some(&mut dctx));
            }
            let mut dqkv = vec![F::zero(); n * 3 * d];
            let qkv = &cache.qkv;
            let mut dp = vec![F::zero(); n];
            for h in 0..nh {
                for t in 0..n {
                    let dc = &dctx[t * d + h * dh..t * d + (h + 1) * dh];
                    if dc.iter().all(|&g| g == F::zero()) {
                        continue;
                    }
                    let pr = &cache.probs[(h * n + t) * n..(h * n + t) * n + n];
                    let mut weighted = F::zero();
                    for s in 0..=t {
                        let vs = &qkv[s * 3 * d + 2 * d + h * dh..s * 3 * d + 2 * d + (h + 1) * dh];
                        dp[s] = dot(dc, vs);
                        weighted += pr[s] * dp[s];
                        let dv = &mut dqkv[s * 3 * d + 2 * d + h * dh..s * 3 * d + 2 * d + (h + 1) * dh];
                        for (g, &cj) in dv.iter_mut().zip(dc) {
                            *g += pr[s] * cj;
                        }
                    }
                    for s in 0..=t {
                        let ds = pr[s] * (dp[s] - weighted) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        for j in 0..dh {
                            let qj = qkv[t * 3 * d + h * dh + j];
                            let kj = qkv[s * 3 * d + d + h * dh + j];
                            dqkv[t * 3 * d + h * dh + j] += ds * kj;
                            dqkv[s * 3 * d + d + h * dh + j] += ds * qj;
                        }
                    }
                }
            }
            let mut da1 = vec![F::zero(); n * d];
            {
                let (dw, db) = grad[l.w_qkv..l.b_qkv + 3 * d].split_at_mut(3 * d * d);
                affine_backward(&cache.a1, n, d, self.slice(l.w_qkv, 3 * d * d), 3 * d, &dqkv, dw, db, Some(&mut da1));
            }
            {
                let (dg, db) = grad[l.ln1_g..l.ln1_b + d].split_at_mut(d);
                layer_norm_backward(&cache.ln1, n, d, self.slice(l.ln1_g, d), &da1, dg, db, &mut tmp);
            }
            for (a, &b) in dx.iter_mut().zip(&tmp) {
                *a += b;
            }
        }
        for (t, &tok) in tape.tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            for j in 0..d {
                grad[lay.tok + tok as usize * d + j] += g[j];
                grad[lay.pos + t * d + j] += g[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: usize) -> TinySequenceModel<f64> {
        let cfg = TinyConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: layers, d_ff: 16, max_context: 16, init_std: 0.3, response_alphabet: true };
        TinySequenceModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn loss(m: &TinySequenceModel<f64>, toks: &[TokenId], w: &Matrix<f64>) -> f64 {
        let tape = m.forward(toks).unwrap();
        tape.logits().as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn layout_covers_every_parameter() {
        let m = model(2);
        let c = m.config();
        let d = c.d_model;
        let per_layer = 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + d * c.d_ff + c.d_ff + c.d_ff * d + d;
        let expected = c.vocab_size * d + c.max_context * d + 2 * per_layer + 2 * d + d * c.vocab_size + c.vocab_size;
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn linear_functional_of_logits_matches_finite_differences() {
        for layers in [1, 2] {
            let m = model(layers);
            let toks = [1, 5, 7, 2, 11, 0];
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let w = Matrix::from_vec(6, 12, (0..72).map(|_| rng.random::<f64>() - 0.5).collect());
            let tape = m.forward(&toks).unwrap();
            let mut grad = vec![0.0; m.num_params()];
            m.backward(&tape, &w, &mut grad).unwrap();
            for _ in 0..10 {
                let dir: Vec<f64> = (0..m.num_params()).map(|_| rng.random::<f64>() - 0.5).collect();
                let h = 1e-5;
                let mut plus = m.clone();
                let mut minus = m.clone();
                for ((p, q), &u) in plus.params_mut().iter_mut().zip(minus.params_mut()).zip(&dir) {
                    *p += h * u;
                    *q -= h * u;
                }
                let fd = (loss(&plus, &toks, &w) - loss(&minus, &toks, &w)) / (2.0 * h);
                let an: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "layers={layers}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = model(2);
        let a = m.forward(&[1, 2, 3, 4]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 9]).unwrap();
        for t in 0..3 {
            assert_eq!(a.logits().row(t), b.logits().row(t));
        }
        assert_eq!(m.next_token_logits(&[1, 2, 3]).unwrap(), a.logits().row(2));
    }

    #[test]
    fn hidden_states_have_one_matrix_per_layer_plus_embedding() {
        let m = model(2);
        let hs = m.hidden_states(&[1, 2, 3]).unwrap();
        assert_eq!(hs.len(), 3);
        assert!(hs.iter().all(|h| h.rows() == 3 && h.cols() == 8 && h.is_finite()));
    }

    #[test]
    fn rejects_bad_contexts() {
        let m = model(1);
        assert!(m.forward(&[]).is_err());
        assert!(matches!(m.forward(&[12]), Err(Error::UnknownToken(12))));
        assert!(m.forward(&[0; 17]).is_err());
        let bad = TinyConfig { n_heads: 3, ..m.config() };
        assert!(TinySequenceModel::<f64>::new(bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn f32_model_runs() {
        let cfg = TinyConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_context: 16, init_std: 0.3, response_alphabet: true };
        let m = TinySequenceModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let logits = m.next_token_logits(&[1, 2]).unwrap();
        let s: f32 = crate::scalar::softmax(&logits, 1.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cached_decoder_matches_full_recompute_exactly() {
        for layers in [1, 2] {
            let cfg = TinyConfig { n_layers: layers, d_model: 8, d_ff: 16, max_context: 24, init_std: 0.5, ..TinyConfig::default() };
            let m: TinySequenceModel<f64> = TinySequenceModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let task = crate::toyenv::LengthTask::new("t", 12).unwrap();
            let mut seq = task.prompt_tokens.clone();
            seq.extend([16, 20, 31, 3, 17, 16]);
            for ctx in [seq.clone(), vec![5, 9, 30, 2, 2, 16, 7, 1, 4]] {
                let mut dec = m.decoder();
                let mut got = dec.extend(&ctx[..3]).unwrap();
                assert_eq!(got, m.next_token_logits(&ctx[..3]).unwrap());
                for i in 3..ctx.len() {
                    got = dec.extend(&ctx[i..=i]).unwrap();
                    assert_eq!(got, m.next_token_logits(&ctx[..=i]).unwrap(), "layers {layers} prefix {i}");
                }
            }
        }
    }

    #[test]
    fn cached_decoder_respects_context_limit() {
        let m = model(1);
        let mut dec = m.decoder();
        dec.extend(&[0; 16]).unwrap();
        assert!(dec.extend(&[0]).is_err());
        assert!(matches!(m.decoder().extend(&[12]), Err(Error::UnknownToken(12))));
    }

    #[test]
    fn partial_logits_match_full_forward() {
        let m = model(2);
        let toks = [3, 7, 1, 0, 11, 4];
        let full = m.forward(&toks).unwrap();
        let part = m.forward_from(&toks, 3).unwrap();
        for t in 3..toks.len() {
            assert_eq!(full.logits().row(t), part.logits().row(t));
        }
        let w = Matrix::from_vec(6, 12, (0..72).map(|i| if i >= 36 { (i as f64).sin() } else { 0.0 }).collect());
        let (mut g1, mut g2) = (vec![0.0; m.num_params()], vec![0.0; m.num_params()]);
        m.backward(&full, &w, &mut g1).unwrap();
        m.backward(&part, &w, &mut g2).unwrap();
        assert_eq!(g1, g2);
    }
}

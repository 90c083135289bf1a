use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::{affine, affine_backward, layer_norm, layer_norm_backward, Tensor};
use super::{Example, ScorerConfig, PAD};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `inputs × outputs`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(inputs, outputs, bound, rng),
            bias: Tensor::zeros(1, outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(dim: usize, gain: T) -> Self {
        LayerNorm {
            gain: Tensor::filled(1, dim, gain),
            bias: Tensor::zeros(1, dim),
        }
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

/// Wide-and-deep ranker: a transformer cross-encoder read out at `[CLS]`,
/// concatenated with a ReLU projection of dense matching features, mapped
/// to a score by an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideDeepScorer<T> {
    pub config: ScorerConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_norm: LayerNorm<T>,
    pub feature_proj: Linear<T>,
    pub mlp: Vec<Linear<T>>,
}

struct LayerCache<T> {
    n: usize,
    m: usize,
    h1_hat: Vec<T>,
    h1_rstd: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    h2_hat: Vec<T>,
    h2_rstd: Vec<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    r: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    tokens: Vec<(usize, usize)>,
    layers: Vec<LayerCache<T>>,
    fin_hat: Vec<T>,
    fin_rstd: Vec<T>,
    feat_in: Vec<T>,
    feat_pre: Vec<T>,
    dropout_scale: Option<Vec<T>>,
    mlp_in: Vec<Vec<T>>,
    mlp_pre: Vec<Vec<T>>,
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

impl<T: Scalar> WideDeepScorer<T> {
    /// Every parameter zero, layer-norm gains included. Doubles as a
    /// gradient accumulator of matching shape.
    pub fn zeros(config: &ScorerConfig) -> Self {
        let d = config.embed_dim;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                attn_norm: LayerNorm::new(d, T::zero()),
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
                ff_norm: LayerNorm::new(d, T::zero()),
                ff_in: Linear::zeros(d, config.ff_dim),
                ff_out: Linear::zeros(config.ff_dim, d),
            })
            .collect();
        WideDeepScorer {
            config: config.clone(),
            token_embedding: Tensor::zeros(config.vocab_size, d),
            position_embedding: Tensor::zeros(config.max_seq_len, d),
            layers,
            final_norm: LayerNorm::new(d, T::zero()),
            feature_proj: Linear::zeros(config.num_features, config.feature_proj_dim),
            mlp: config
                .mlp_shapes()
                .into_iter()
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
        }
    }

    /// Random initialisation: uniform embeddings, Xavier-uniform weights,
    /// zero biases (0.01 for the feature projection), unit layer-norm gains.
    pub fn new(config: &ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "scorer-init", 0);
        let d = config.embed_dim;
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                attn_norm: LayerNorm::new(d, T::one()),
                query: Linear::xavier(d, d, &mut rng),
                key: Linear::xavier(d, d, &mut rng),
                value: Linear::xavier(d, d, &mut rng),
                output: Linear::xavier(d, d, &mut rng),
                ff_norm: LayerNorm::new(d, T::one()),
                ff_in: Linear::xavier(d, config.ff_dim, &mut rng),
                ff_out: Linear::xavier(config.ff_dim, d, &mut rng),
            })
            .collect::<Vec<_>>();
        Ok(WideDeepScorer {
            config: config.clone(),
            token_embedding: Tensor::uniform(config.vocab_size, d, 0.1, &mut rng),
            position_embedding: Tensor::uniform(config.max_seq_len, d, 0.1, &mut rng),
            layers,
            final_norm: LayerNorm::new(d, T::one()),
            feature_proj: {
                // Slightly positive bias keeps all-zero feature rows off the ReLU kink.
                let mut lin = Linear::xavier(config.num_features, config.feature_proj_dim, &mut rng);
                lin.bias = Tensor::filled(1, config.feature_proj_dim, T::of(0.01));
                lin
            },
            mlp: config
                .mlp_shapes()
                .into_iter()
                .map(|(i, o)| Linear::xavier(i, o, &mut rng))
                .collect(),
        })
    }

    /// Named parameter blocks in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn_norm.gain"), &l.attn_norm.gain));
            out.push((format!("{p}.attn_norm.bias"), &l.attn_norm.bias));
            for (name, lin) in [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
            ] {
                out.push((format!("{p}.{name}.weight"), &lin.weight));
                out.push((format!("{p}.{name}.bias"), &lin.bias));
            }
            out.push((format!("{p}.ff_norm.gain"), &l.ff_norm.gain));
            out.push((format!("{p}.ff_norm.bias"), &l.ff_norm.bias));
            out.push((format!("{p}.ff_in.weight"), &l.ff_in.weight));
            out.push((format!("{p}.ff_in.bias"), &l.ff_in.bias));
            out.push((format!("{p}.ff_out.weight"), &l.ff_out.weight));
            out.push((format!("{p}.ff_out.bias"), &l.ff_out.bias));
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out.push(("feature_proj.weight".into(), &self.feature_proj.weight));
        out.push(("feature_proj.bias".into(), &self.feature_proj.bias));
        for (i, lin) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), &lin.weight));
            out.push((format!("mlp.{i}.bias"), &lin.bias));
        }
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm.gain);
            out.push(&mut l.attn_norm.bias);
            for lin in [&mut l.query, &mut l.key, &mut l.value, &mut l.output] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut l.ff_norm.gain);
            out.push(&mut l.ff_norm.bias);
            out.push(&mut l.ff_in.weight);
            out.push(&mut l.ff_in.bias);
            out.push(&mut l.ff_out.weight);
            out.push(&mut l.ff_out.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.feature_proj.weight);
        out.push(&mut self.feature_proj.bias);
        for lin in &mut self.mlp {
            out.push(&mut lin.weight);
            out.push(&mut lin.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("parameters".into()))
        }
    }

    pub fn add_assign(&mut self, other: &WideDeepScorer<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b.1);
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill_zero();
        }
    }

    /// Score one encoded pair. `ids` holds at most `max_seq_len` entries;
    /// `PAD` positions are excluded from attention.
    pub fn score(&self, ids: &[u32], features: &[T]) -> Result<T> {
        self.check_finite()?;
        Ok(self.forward(ids, features, None)?.0)
    }

    pub fn score_example(&self, example: &Example<T>) -> Result<T> {
        self.score(&example.ids, &example.features)
    }

    /// Scores only the positions flagged in `valid`; the token ids at
    /// other positions are never read.
    pub fn score_masked(&self, ids: &[u32], valid: &[bool], features: &[T]) -> Result<T> {
        self.check_finite()?;
        let tokens = self.collect_tokens(ids, Some(valid))?;
        Ok(self.forward_tokens(tokens, features, None)?.0)
    }

    fn collect_tokens(&self, ids: &[u32], valid: Option<&[bool]>) -> Result<Vec<(usize, usize)>> {
        let cfg = &self.config;
        if ids.len() > cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} ids exceeds max_seq_len {}",
                ids.len(),
                cfg.max_seq_len
            )));
        }
        let mut tokens = Vec::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            let keep = match valid {
                Some(v) => v.get(pos).copied().unwrap_or(false),
                None => id != PAD,
            };
            if !keep {
                continue;
            }
            if id as usize >= cfg.vocab_size {
                return Err(Error::invalid(format!("token id {id} outside vocabulary")));
            }
            tokens.push((id as usize, pos));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("sequence has no non-padding positions"));
        }
        Ok(tokens)
    }

    pub(crate) fn forward(
        &self,
        ids: &[u32],
        features: &[T],
        dropout: Option<&mut Rng>,
    ) -> Result<(T, ForwardCache<T>)> {
        let tokens = self.collect_tokens(ids, None)?;
        self.forward_tokens(tokens, features, dropout)
    }

    fn forward_tokens(
        &self,
        tokens: Vec<(usize, usize)>,
        features: &[T],
        dropout: Option<&mut Rng>,
    ) -> Result<(T, ForwardCache<T>)> {
        let cfg = &self.config;
        if features.len() != cfg.num_features {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                left: features.len(),
                right: cfg.num_features,
            });
        }
        let d = cfg.embed_dim;
        let n = tokens.len();
        let mut x = vec![T::zero(); n * d];
        for (r, &(id, pos)) in tokens.iter().enumerate() {
            let (e, p) = (self.token_embedding.row(id), self.position_embedding.row(pos));
            for j in 0..d {
                x[r * d + j] = e[j] + p[j];
            }
        }

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut rows = n;
        for (li, layer) in self.layers.iter().enumerate() {
            let m = if li + 1 == self.layers.len() { 1 } else { rows };
            let (cache, out) = self.layer_forward(layer, x, rows, m);
            x = out;
            layer_caches.push(cache);
            rows = m;
        }

        // [CLS] is always the first kept position.
        let cls_in = &x[..d];
        let mut fin_hat = vec![T::zero(); d];
        let mut fin_rstd = vec![T::zero(); 1];
        let mut cls = vec![T::zero(); d];
        layer_norm(
            cls_in,
            1,
            &self.final_norm.gain,
            &self.final_norm.bias,
            &mut fin_hat,
            &mut fin_rstd,
            &mut cls,
        );

        let p = cfg.feature_proj_dim;
        let mut feat_pre = vec![T::zero(); p];
        affine(features, 1, &self.feature_proj.weight, &self.feature_proj.bias, &mut feat_pre);

        let mut u: Vec<T> = cls;
        u.extend(feat_pre.iter().map(|&v| relu(v)));
        let dropout_scale = match dropout {
            Some(rng) if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                let scale: Vec<T> = (0..u.len())
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            T::of(1.0 / keep)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                for (a, &s) in u.iter_mut().zip(&scale) {
                    *a *= s;
                }
                Some(scale)
            }
            _ => None,
        };

        let mut mlp_in = Vec::with_capacity(self.mlp.len());
        let mut mlp_pre = Vec::with_capacity(self.mlp.len());
        let mut h = u;
        for (i, lin) in self.mlp.iter().enumerate() {
            let mut pre = vec![T::zero(); lin.weight.cols];
            affine(&h, 1, &lin.weight, &lin.bias, &mut pre);
            let next = if i + 1 == self.mlp.len() {
                pre.clone()
            } else {
                pre.iter().map(|&v| relu(v)).collect()
            };
            mlp_in.push(h);
            mlp_pre.push(pre);
            h = next;
        }
        let score = h[0];
        Ok((
            score,
            ForwardCache {
                tokens,
                layers: layer_caches,
                fin_hat,
                fin_rstd,
                feat_in: features.to_vec(),
                feat_pre,
                dropout_scale,
                mlp_in,
                mlp_pre,
            },
        ))
    }

    /// Runs a block on `n` input rows and produces its first `m` output rows.
    fn layer_forward(
        &self,
        layer: &EncoderLayer<T>,
        x: Vec<T>,
        n: usize,
        m: usize,
    ) -> (LayerCache<T>, Vec<T>) {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();

        let mut h1_hat = vec![T::zero(); n * d];
        let mut h1_rstd = vec![T::zero(); n];
        let mut h1 = vec![T::zero(); n * d];
        layer_norm(&x, n, &layer.attn_norm.gain, &layer.attn_norm.bias, &mut h1_hat, &mut h1_rstd, &mut h1);

        let mut q = vec![T::zero(); m * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        affine(&h1[..m * d], m, &layer.query.weight, &layer.query.bias, &mut q);
        affine(&h1, n, &layer.key.weight, &layer.key.bias, &mut k);
        affine(&h1, n, &layer.value.weight, &layer.value.bias, &mut v);

        let mut probs = vec![T::zero(); heads * m * n];
        let mut ctx = vec![T::zero(); m * d];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..m {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut probs[(hd * m + i) * n..(hd * m + i + 1) * n];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let a = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += a * vv;
                    }
                }
            }
        }

        let mut x1 = vec![T::zero(); m * d];
        affine(&ctx, m, &layer.output.weight, &layer.output.bias, &mut x1);
        for (a, &b) in x1.iter_mut().zip(&x[..m * d]) {
            *a += b;
        }

        let mut h2_hat = vec![T::zero(); m * d];
        let mut h2_rstd = vec![T::zero(); m];
        let mut h2 = vec![T::zero(); m * d];
        layer_norm(&x1, m, &layer.ff_norm.gain, &layer.ff_norm.bias, &mut h2_hat, &mut h2_rstd, &mut h2);
        let f = cfg.ff_dim;
        let mut f1 = vec![T::zero(); m * f];
        affine(&h2, m, &layer.ff_in.weight, &layer.ff_in.bias, &mut f1);
        let r: Vec<T> = f1.iter().map(|&v| relu(v)).collect();
        let mut out = vec![T::zero(); m * d];
        affine(&r, m, &layer.ff_out.weight, &layer.ff_out.bias, &mut out);
        for (a, &b) in out.iter_mut().zip(&x1) {
            *a += b;
        }

        let cache = LayerCache {
            n,
            m,
            h1_hat,
            h1_rstd,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            h2_hat,
            h2_rstd,
            h2,
            f1,
            r,
        };
        (cache, out)
    }

    /// Accumulates `dscore · ∂score/∂θ` into `grads`.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, dscore: T, grads: &mut WideDeepScorer<T>) {
        let cfg = &self.config;
        let d = cfg.embed_dim;

        let mut dh = vec![dscore];
        for (i, lin) in self.mlp.iter().enumerate().rev() {
            let g = &mut grads.mlp[i];
            let dpre: Vec<T> = if i + 1 == self.mlp.len() {
                dh.clone()
            } else {
                dh.iter()
                    .zip(&cache.mlp_pre[i])
                    .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                    .collect()
            };
            let mut dx = vec![T::zero(); lin.weight.rows];
            affine_backward(&cache.mlp_in[i], 1, &lin.weight, &dpre, &mut g.weight, &mut g.bias, Some(&mut dx));
            dh = dx;
        }
        let mut du = dh;
        if let Some(scale) = &cache.dropout_scale {
            for (g, &s) in du.iter_mut().zip(scale) {
                *g *= s;
            }
        }

        let dfeat: Vec<T> = du[d..]
            .iter()
            .zip(&cache.feat_pre)
            .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect();
        affine_backward(
            &cache.feat_in,
            1,
            &self.feature_proj.weight,
            &dfeat,
            &mut grads.feature_proj.weight,
            &mut grads.feature_proj.bias,
            None,
        );

        let mut dx = vec![T::zero(); d];
        layer_norm_backward(
            &du[..d],
            1,
            &self.final_norm.gain,
            &cache.fin_hat,
            &cache.fin_rstd,
            &mut grads.final_norm.gain,
            &mut grads.final_norm.bias,
            &mut dx,
        );

        for (li, layer) in self.layers.iter().enumerate().rev() {
            dx = self.layer_backward(layer, &cache.layers[li], &dx, &mut grads.layers[li]);
        }

        for (r, &(id, pos)) in cache.tokens.iter().enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            for (a, &b) in grads.token_embedding.row_mut(id).iter_mut().zip(g) {
                *a += b;
            }
            for (a, &b) in grads.position_embedding.row_mut(pos).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Given the gradient of the block's `m` output rows, returns the
    /// gradient of its `n` input rows.
    fn layer_backward(
        &self,
        layer: &EncoderLayer<T>,
        c: &LayerCache<T>,
        dout: &[T],
        g: &mut EncoderLayer<T>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let (d, f, heads) = (cfg.embed_dim, cfg.ff_dim, cfg.num_heads);
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let (n, m) = (c.n, c.m);

        // x2 = x1 + ff_out(relu(ff_in(ln(x1))))
        let mut dx1 = dout.to_vec();
        let mut dr = vec![T::zero(); m * f];
        affine_backward(&c.r, m, &layer.ff_out.weight, dout, &mut g.ff_out.weight, &mut g.ff_out.bias, Some(&mut dr));
        for (v, &pre) in dr.iter_mut().zip(&c.f1) {
            if pre <= T::zero() {
                *v = T::zero();
            }
        }
        let mut dh2 = vec![T::zero(); m * d];
        affine_backward(&c.h2, m, &layer.ff_in.weight, &dr, &mut g.ff_in.weight, &mut g.ff_in.bias, Some(&mut dh2));
        layer_norm_backward(
            &dh2,
            m,
            &layer.ff_norm.gain,
            &c.h2_hat,
            &c.h2_rstd,
            &mut g.ff_norm.gain,
            &mut g.ff_norm.bias,
            &mut dx1,
        );

        // x1 = x[..m] + output(attention(ln(x)))
        let mut dx = vec![T::zero(); n * d];
        dx[..m * d].copy_from_slice(&dx1);
        let mut dctx = vec![T::zero(); m * d];
        affine_backward(&c.ctx, m, &layer.output.weight, &dx1, &mut g.output.weight, &mut g.output.bias, Some(&mut dctx));

        let mut dq = vec![T::zero(); m * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut da = vec![T::zero(); n];
        for hd in 0..heads {
            let off = hd * dh;
            for i in 0..m {
                let row = &c.probs[(hd * m + i) * n..(hd * m + i + 1) * n];
                let dci = &dctx[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..n {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    da[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += row[j] * da[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (t, &gc) in dvj.iter_mut().zip(dci) {
                        *t += row[j] * gc;
                    }
                }
                let qi = &c.q[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let ds = row[j] * (da[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &c.k[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (t, &kv) in dqi.iter_mut().zip(kj) {
                        *t += ds * kv;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (t, &qv) in dkj.iter_mut().zip(qi) {
                        *t += ds * qv;
                    }
                }
            }
        }

        let mut dh1 = vec![T::zero(); n * d];
        let mut tmp = vec![T::zero(); n * d];
        affine_backward(&c.h1[..m * d], m, &layer.query.weight, &dq, &mut g.query.weight, &mut g.query.bias, Some(&mut tmp[..m * d]));
        for (a, &b) in dh1[..m * d].iter_mut().zip(&tmp[..m * d]) {
            *a += b;
        }
        affine_backward(&c.h1, n, &layer.key.weight, &dk, &mut g.key.weight, &mut g.key.bias, Some(&mut tmp));
        for (a, &b) in dh1.iter_mut().zip(&tmp) {
            *a += b;
        }
        affine_backward(&c.h1, n, &layer.value.weight, &dv, &mut g.value.weight, &mut g.value.bias, Some(&mut tmp));
        for (a, &b) in dh1.iter_mut().zip(&tmp) {
            *a += b;
        }
        layer_norm_backward(
            &dh1,
            n,
            &layer.attn_norm.gain,
            &c.h1_hat,
            &c.h1_rstd,
            &mut g.attn_norm.gain,
            &mut g.attn_norm.bias,
            &mut dx,
        );
        dx
    }
}

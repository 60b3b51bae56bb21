//! Forward pass of the decoder-only transformer.
//!
//! Architecture, fixed across the crate:
//!
//! ```text
//! x[t]   = token_embedding[id_t] + pos_embedding[t]
//! block: n1 = layernorm(x)        ; x = x + attn(n1)      (causal, multi-head)
//!        n2 = layernorm(x)        ; x = x + w2 gelu(w1 n2 + b1) + b2
//! head:  hidden = layernorm(x)    ; logits = output.weight hidden + output.bias
//! ```
//!
//! Everything is `f64` and position-separable: the computation for position
//! `t` reads only positions `<= t`, so appending a token never changes the
//! logits (or hidden states) of earlier positions, bit for bit.
//!
//! The forward pass records every intermediate needed by the exact backward
//! pass in a [`ForwardTrace`]; nothing is recomputed approximately.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamLayout, Parameters};
use crate::tokens::TokenSequence;

/// Epsilon inside the layer-norm variance square root.
pub(crate) const LN_EPS: f64 = 1e-5;

/// tanh-form GELU; smooth everywhere, which keeps central finite differences
/// honest at every coordinate.
pub(crate) fn gelu(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044_715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * A * (1.0 + 3.0 * B * x * x)
}

/// `y[t] = W x[t] + b` for `t_len` row-major positions.
pub(crate) fn linear(
    y: &mut [f64],
    w: &[f64],
    b: &[f64],
    x: &[f64],
    t_len: usize,
    d_in: usize,
    d_out: usize,
) {
    debug_assert_eq!(y.len(), t_len * d_out);
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(x.len(), t_len * d_in);
    for t in 0..t_len {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let yr = &mut y[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let row = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for i in 0..d_in {
                acc += row[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
}

/// Per-position layer norm record: `xhat` is the normalized activation
/// before gain and bias, `out` the result after them. Both are kept because
/// the backward pass needs `xhat` for the gain gradient and `out` as the
/// input of the following projection.
#[derive(Debug, Clone)]
pub struct NormTrace {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], t_len: usize, d: usize) -> NormTrace {
    let mut xhat = vec![0.0; t_len * d];
    let mut inv_std = vec![0.0; t_len];
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let xr = &x[t * d..(t + 1) * d];
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for i in 0..d {
            let h = (xr[i] - mean) * is;
            xhat[t * d + i] = h;
            out[t * d + i] = gain[i] * h + bias[i];
        }
    }
    NormTrace { xhat, inv_std, out }
}

/// Intermediates of one decoder block, enough for exact reverse mode.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub x_in: Vec<f64>,     // T*d, block input
    pub norm1: NormTrace,   // attention sub-layer norm
    pub q: Vec<f64>,        // T*d
    pub k: Vec<f64>,        // T*d
    pub v: Vec<f64>,        // T*d
    pub attn_w: Vec<f64>,   // H*T*T softmax weights, zero above the diagonal
    pub head_cat: Vec<f64>, // T*d concatenated head contexts
    pub x_mid: Vec<f64>,    // T*d after the attention residual
    pub norm2: NormTrace,   // mlp sub-layer norm
    pub h_pre: Vec<f64>,    // T*d_mlp pre-activation
    pub h_act: Vec<f64>,    // T*d_mlp post-GELU
}

/// Complete record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    ids: Vec<usize>,
    config: ModelConfig,
    param_len: usize,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) final_norm: NormTrace,
    logits: Vec<f64>, // T*vocab
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn param_len(&self) -> usize {
        self.param_len
    }

    /// Next-token logits produced at position `t`.
    pub fn logits_at(&self, t: usize) -> &[f64] {
        let v = self.config.vocab_size;
        &self.logits[t * v..(t + 1) * v]
    }

    /// Final hidden state (after the last layer norm) at position `t`.
    pub fn hidden_at(&self, t: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.final_norm.out[t * d..(t + 1) * d]
    }

    /// Log-probability of the suffix `ids[prefix_len..]` given everything
    /// before it, summed over positions.
    pub fn suffix_logprob(&self, prefix_len: usize) -> f64 {
        assert!(
            prefix_len >= 1 && prefix_len <= self.ids.len(),
            "prefix_len {} out of range for {} tokens",
            prefix_len,
            self.ids.len()
        );
        let mut lp = 0.0;
        for t in prefix_len..self.ids.len() {
            lp += log_softmax_at(self.logits_at(t - 1), self.ids[t]);
        }
        lp
    }
}

/// `log softmax(row)[idx]`, max-subtracted.
pub fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    row[idx] - row_lse(row)
}

/// Numerically stable `log sum exp` of a logit row.
pub fn row_lse(row: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for &x in row {
        s += (x - m).exp();
    }
    m + s.ln()
}

fn check_inputs(params: &Parameters, config: &ModelConfig, ids: &[usize]) -> Result<ParamLayout> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    if params.len() != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "parameters hold {} scalars, config needs {}",
            params.len(),
            layout.total_len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::InvalidSequence("empty model input".into()));
    }
    if ids.len() > config.max_context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max_context: config.max_context,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::InvalidSequence(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(layout)
}

/// Runs the model over raw ids (already validated as a model input by the
/// caller's sequence types) and records the full trace.
pub(crate) fn forward_ids(
    params: &Parameters,
    config: &ModelConfig,
    ids: &[usize],
) -> Result<ForwardTrace> {
    let layout = check_inputs(params, config, ids)?;
    let p = params.flat();
    let t_len = ids.len();
    let d = config.d_model;
    let dm = config.d_mlp();
    let v = config.vocab_size;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();

    // Embedding sum.
    let mut x = vec![0.0; t_len * d];
    let tok = &p[layout.token_embedding.clone()];
    let pos = &p[layout.pos_embedding.clone()];
    for t in 0..t_len {
        let e = &tok[ids[t] * d..(ids[t] + 1) * d];
        let q = &pos[t * d..(t + 1) * d];
        for i in 0..d {
            x[t * d + i] = e[i] + q[i];
        }
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for lr in &layout.layers {
        let x_in = x;

        let norm1 = layer_norm(
            &x_in,
            &p[lr.attn_norm_gain.clone()],
            &p[lr.attn_norm_bias.clone()],
            t_len,
            d,
        );

        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut vv = vec![0.0; t_len * d];
        linear(&mut q, &p[lr.wq.clone()], &p[lr.bq.clone()], &norm1.out, t_len, d, d);
        linear(&mut k, &p[lr.wk.clone()], &p[lr.bk.clone()], &norm1.out, t_len, d, d);
        linear(&mut vv, &p[lr.wv.clone()], &p[lr.bv.clone()], &norm1.out, t_len, d, d);

        let mut attn_w = vec![0.0; heads * t_len * t_len];
        let mut head_cat = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let qr = &q[t * d + off..t * d + off + hd];
                let mut m = f64::NEG_INFINITY;
                for (u, s) in scores[..=t].iter_mut().enumerate() {
                    let kr = &k[u * d + off..u * d + off + hd];
                    let mut dot = 0.0;
                    for j in 0..hd {
                        dot += qr[j] * kr[j];
                    }
                    *s = dot * inv_sqrt_hd;
                    if *s > m {
                        m = *s;
                    }
                }
                let mut z = 0.0;
                for s in scores[..=t].iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let wrow = &mut attn_w[h * t_len * t_len + t * t_len..][..=t];
                let ctx = &mut head_cat[t * d + off..t * d + off + hd];
                for (u, w) in wrow.iter_mut().enumerate() {
                    *w = scores[u] / z;
                    let vr = &vv[u * d + off..u * d + off + hd];
                    for j in 0..hd {
                        ctx[j] += *w * vr[j];
                    }
                }
            }
        }

        let mut attn_out = vec![0.0; t_len * d];
        linear(&mut attn_out, &p[lr.wo.clone()], &p[lr.bo.clone()], &head_cat, t_len, d, d);
        let mut x_mid = x_in.clone();
        for (o, a) in x_mid.iter_mut().zip(attn_out.iter()) {
            *o += a;
        }

        let norm2 = layer_norm(
            &x_mid,
            &p[lr.mlp_norm_gain.clone()],
            &p[lr.mlp_norm_bias.clone()],
            t_len,
            d,
        );

        let mut h_pre = vec![0.0; t_len * dm];
        linear(&mut h_pre, &p[lr.w1.clone()], &p[lr.b1.clone()], &norm2.out, t_len, d, dm);
        let mut h_act = vec![0.0; t_len * dm];
        for (a, &x0) in h_act.iter_mut().zip(h_pre.iter()) {
            *a = gelu(x0);
        }
        let mut mlp_out = vec![0.0; t_len * d];
        linear(&mut mlp_out, &p[lr.w2.clone()], &p[lr.b2.clone()], &h_act, t_len, dm, d);

        let mut x_out = x_mid.clone();
        for (o, a) in x_out.iter_mut().zip(mlp_out.iter()) {
            *o += a;
        }

        layers.push(LayerTrace {
            x_in,
            norm1,
            q,
            k,
            v: vv,
            attn_w,
            head_cat,
            x_mid,
            norm2,
            h_pre,
            h_act,
        });
        x = x_out;
    }

    let final_norm = layer_norm(
        &x,
        &p[layout.final_norm_gain.clone()],
        &p[layout.final_norm_bias.clone()],
        t_len,
        d,
    );
    let mut logits = vec![0.0; t_len * v];
    linear(
        &mut logits,
        &p[layout.output_weight.clone()],
        &p[layout.output_bias.clone()],
        &final_norm.out,
        t_len,
        d,
        v,
    );

    Ok(ForwardTrace {
        ids: ids.to_vec(),
        config: *config,
        param_len: params.len(),
        layers,
        final_norm,
        logits,
    })
}

/// Full forward pass over a token sequence.
pub fn forward_logits(
    params: &Parameters,
    config: &ModelConfig,
    seq: &TokenSequence,
) -> Result<ForwardTrace> {
    forward_ids(params, config, seq.ids())
}

/// Log-probability of `continuation` given `prefix`:
/// `sum_t log softmax(logits[t-1])[id_t]` over the continuation positions.
pub fn sequence_logprob(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    continuation: &TokenSequence,
) -> Result<f64> {
    let ids = TokenSequence::concat(prefix, continuation)?;
    let trace = forward_ids(params, config, &ids)?;
    Ok(trace.suffix_logprob(prefix.len()))
}

/// Final-layer hidden state of every position, one `d_model` vector per
/// token. This is the representation mean-pooled by the ranking embeddings.
pub fn hidden_states(
    params: &Parameters,
    config: &ModelConfig,
    seq: &TokenSequence,
) -> Result<Vec<Vec<f64>>> {
    let trace = forward_ids(params, config, seq.ids())?;
    Ok((0..trace.seq_len())
        .map(|t| trace.hidden_at(t).to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_parameters;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 16,
        }
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let config = ModelConfig {
            vocab_size: 4,
            ..tiny_config()
        };
        let layout = ParamLayout::new(&config);
        let params = Parameters::zeros(&layout);
        let seq = TokenSequence::new(vec![1, 2, 3]).unwrap();
        let trace = forward_logits(&params, &config, &seq).unwrap();
        for t in 0..3 {
            let row = trace.logits_at(t);
            assert!(row.iter().all(|&x| x == row[0]), "row {t} not constant");
        }
    }

    #[test]
    fn uniform_three_token_logprob_is_minus_three_ln_four() {
        let config = ModelConfig {
            vocab_size: 4,
            ..tiny_config()
        };
        let params = Parameters::zeros(&ParamLayout::new(&config));
        let prefix = TokenSequence::new(vec![1, 2]).unwrap();
        let cont = TokenSequence::new(vec![3, 1, 0]).unwrap();
        let lp = sequence_logprob(&params, &config, &prefix, &cont).unwrap();
        assert!(
            (lp - (-3.0 * 4.0f64.ln())).abs() < 1e-12,
            "got {lp}, want {}",
            -3.0 * 4.0f64.ln()
        );
    }

    #[test]
    fn appending_a_token_leaves_earlier_logits_bitwise_unchanged() {
        let config = tiny_config();
        let params = init_parameters(&config, 11).unwrap();
        let short = TokenSequence::new(vec![4, 7, 2, 9]).unwrap();
        let long = TokenSequence::new(vec![4, 7, 2, 9, 5]).unwrap();
        let a = forward_logits(&params, &config, &short).unwrap();
        let b = forward_logits(&params, &config, &long).unwrap();
        for t in 0..short.len() {
            assert_eq!(a.logits_at(t), b.logits_at(t), "position {t} drifted");
            assert_eq!(a.hidden_at(t), b.hidden_at(t), "hidden {t} drifted");
        }
    }

    #[test]
    fn logprob_matches_compensated_summation_oracle() {
        // Independent recomputation of the same quantity: per-row softmax
        // normalizer via Kahan-compensated summation without the shared
        // helper functions.
        let config = tiny_config();
        let params = init_parameters(&config, 23).unwrap();
        let prefix = TokenSequence::new(vec![3, 8, 1]).unwrap();
        let cont = TokenSequence::new(vec![2, 9, 10, 4, 6, 5, 7, 0]).unwrap();

        let ids = TokenSequence::concat(&prefix, &cont).unwrap();
        let trace = forward_ids(&params, &config, &ids).unwrap();
        let mut oracle = 0.0;
        for t in prefix.len()..ids.len() {
            let row = trace.logits_at(t - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut comp = 0.0;
            for &x in row {
                let term = (x - m).exp();
                let y = term - comp;
                let t2 = sum + y;
                comp = (t2 - sum) - y;
                sum = t2;
            }
            oracle += row[ids[t]] - m - sum.ln();
        }

        let lp = sequence_logprob(&params, &config, &prefix, &cont).unwrap();
        assert!((lp - oracle).abs() < 1e-9, "impl {lp} vs oracle {oracle}");
        assert!(lp < 0.0);
    }

    #[test]
    fn hidden_states_of_zero_params_collapse_to_equal_vectors() {
        let config = tiny_config();
        let params = Parameters::zeros(&ParamLayout::new(&config));
        let seq = TokenSequence::new(vec![5, 9, 5]).unwrap();
        let hs = hidden_states(&params, &config, &seq).unwrap();
        assert_eq!(hs[0], hs[2]);
        assert_eq!(hs[0], hs[1]);
    }

    #[test]
    fn rejects_context_overflow_and_bad_ids() {
        let config = tiny_config();
        let params = init_parameters(&config, 1).unwrap();
        let long = TokenSequence::new(vec![1; 17]).unwrap();
        assert!(matches!(
            forward_logits(&params, &config, &long),
            Err(Error::ContextOverflow { .. })
        ));
        let bad = TokenSequence::new(vec![11]).unwrap();
        assert!(forward_logits(&params, &config, &bad).is_err());
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "x={x}");
        }
    }
}

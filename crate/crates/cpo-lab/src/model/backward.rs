//! Exact reverse-mode differentiation through the transformer.
//!
//! Every training objective in this crate is a smooth function of sequence
//! log-probabilities, so one backward entry point suffices: the caller
//! supplies, per forward trace, the partial derivative of the scalar loss
//! with respect to that trace's continuation log-probability, and this module
//! chains it through softmax, output head, blocks, and embeddings.
//!
//! For a continuation position `t` with target id `y_t`,
//!
//! ```text
//! d seq_logprob / d logits[t-1][v] = 1{v = y_t} - softmax(logits[t-1])[v]
//! ```
//!
//! and everything below the logits is mechanical reverse mode over the
//! recorded trace. Terms accumulate in slice order into one gradient buffer,
//! so results are bit-reproducible for a fixed term order.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::{gelu_prime, ForwardTrace, NormTrace};
use crate::model::params::{LayerRanges, ParamLayout, Parameters};

/// One differentiable term of a loss: a forward trace together with
/// `weight = d loss / d suffix_logprob(prefix_len)`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub trace: &'a ForwardTrace,
    pub prefix_len: usize,
    pub weight: f64,
}

/// Accumulates the exact parameter gradient of
/// `loss = f(logprob_1, ..., logprob_n)` given the traces and the partials
/// `weight_i = df/dlogprob_i`. An empty term list yields the zero gradient.
pub fn loss_backward(
    params: &Parameters,
    config: &ModelConfig,
    terms: &[LossTerm],
) -> Result<Vec<f64>> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    if params.len() != layout.total_len() {
        return Err(Error::ShapeMismatch(format!(
            "parameters hold {} scalars, config needs {}",
            params.len(),
            layout.total_len()
        )));
    }
    let mut grad = vec![0.0; layout.total_len()];
    for term in terms {
        if term.trace.param_len() != params.len() || term.trace.config() != config {
            return Err(Error::ShapeMismatch(
                "trace was recorded under a different model shape".into(),
            ));
        }
        if term.prefix_len < 1 || term.prefix_len > term.trace.seq_len() {
            return Err(Error::ShapeMismatch(format!(
                "prefix_len {} out of range for a {}-token trace",
                term.prefix_len,
                term.trace.seq_len()
            )));
        }
        backward_one(params, &layout, config, term, &mut grad);
    }
    Ok(grad)
}

/// `dx[t] += W^T dy[t]`, `dw += sum_t dy[t] (x) x[t]`, `db += sum_t dy[t]`,
/// over positions `t0..t1`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dy: &[f64],
    w: &[f64],
    x: &[f64],
    t0: usize,
    t1: usize,
    d_in: usize,
    d_out: usize,
) {
    for t in t0..t1 {
        let dyr = &dy[t * d_out..(t + 1) * d_out];
        let xr = &x[t * d_in..(t + 1) * d_in];
        let dxr = &mut dx[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wrow = &w[o * d_in..(o + 1) * d_in];
            let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dwrow[i] += g * xr[i];
                dxr[i] += g * wrow[i];
            }
        }
    }
}

/// Layer-norm backward: accumulates gain/bias gradients and adds the input
/// gradient onto `dx`.
fn layer_norm_backward(
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    nt: &NormTrace,
    gain: &[f64],
    t_len: usize,
    d: usize,
) {
    let inv_d = 1.0 / d as f64;
    for t in 0..t_len {
        let dor = &dout[t * d..(t + 1) * d];
        let xh = &nt.xhat[t * d..(t + 1) * d];
        let mut m1 = 0.0; // mean of dxhat
        let mut m2 = 0.0; // mean of dxhat * xhat
        for i in 0..d {
            let dh = dor[i] * gain[i];
            m1 += dh;
            m2 += dh * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let is = nt.inv_std[t];
        let dxr = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let dh = dor[i] * gain[i];
            dgain[i] += dor[i] * xh[i];
            dbias[i] += dor[i];
            dxr[i] += is * (dh - m1 - xh[i] * m2);
        }
    }
}

fn backward_one(
    params: &Parameters,
    layout: &ParamLayout,
    config: &ModelConfig,
    term: &LossTerm,
    grad: &mut [f64],
) {
    let p = params.flat();
    let trace = term.trace;
    let t_len = trace.seq_len();
    let d = config.d_model;
    let dm = config.d_mlp();
    let v = config.vocab_size;
    let heads = config.n_heads;
    let hd = config.head_dim();
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let ids = trace.ids();

    // d loss / d logits. Only rows prefix_len-1 ..= t_len-2 are active; the
    // row bounds below keep the head backward from touching zero rows.
    if term.prefix_len == t_len {
        return; // nothing predicted, zero contribution
    }
    let row0 = term.prefix_len - 1;
    let row1 = t_len - 1; // exclusive
    let mut d_logits = vec![0.0; t_len * v];
    for t in term.prefix_len..t_len {
        let row = trace.logits_at(t - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += (x - m).exp();
        }
        let dst = &mut d_logits[(t - 1) * v..t * v];
        for (i, &x) in row.iter().enumerate() {
            let prob = (x - m).exp() / z;
            dst[i] += term.weight * (-prob);
        }
        dst[ids[t]] += term.weight;
    }

    // Output head.
    let mut d_hidden = vec![0.0; t_len * d];
    {
        let (wslice, rest) = (layout.output_weight.clone(), layout.output_bias.clone());
        let (gw, gb) = split_two(grad, wslice.clone(), rest.clone());
        linear_backward(
            &mut d_hidden,
            gw,
            gb,
            &d_logits,
            &p[wslice],
            &trace.final_norm.out,
            row0,
            row1,
            d,
            v,
        );
    }

    // Final norm.
    let mut d_x = vec![0.0; t_len * d];
    {
        let (gg, gb) = split_two(
            grad,
            layout.final_norm_gain.clone(),
            layout.final_norm_bias.clone(),
        );
        layer_norm_backward(
            &mut d_x,
            gg,
            gb,
            &d_hidden,
            &trace.final_norm,
            &p[layout.final_norm_gain.clone()],
            t_len,
            d,
        );
    }

    // Blocks, in reverse.
    for (l, lr) in layout.layers.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        d_x = backward_block(p, lr, lt, d_x, t_len, d, dm, heads, hd, inv_sqrt_hd, grad);
    }

    // Embeddings.
    let gtok = layout.token_embedding.clone();
    let gpos = layout.pos_embedding.clone();
    for t in 0..t_len {
        let src = &d_x[t * d..(t + 1) * d];
        let te = &mut grad[gtok.start + ids[t] * d..gtok.start + (ids[t] + 1) * d];
        for i in 0..d {
            te[i] += src[i];
        }
        let pe = &mut grad[gpos.start + t * d..gpos.start + (t + 1) * d];
        for i in 0..d {
            pe[i] += src[i];
        }
    }
}

/// Two disjoint mutable views into the gradient buffer.
fn split_two(
    grad: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.len()])
}

#[allow(clippy::too_many_arguments)]
fn backward_block(
    p: &[f64],
    lr: &LayerRanges,
    lt: &crate::model::forward::LayerTrace,
    d_x_out: Vec<f64>,
    t_len: usize,
    d: usize,
    dm: usize,
    heads: usize,
    hd: usize,
    inv_sqrt_hd: f64,
    grad: &mut [f64],
) -> Vec<f64> {
    // x_out = x_mid + mlp(norm2(x_mid)); both branches start from d_x_out.
    let mut d_x_mid = d_x_out.clone();

    // MLP branch.
    let mut d_h_act = vec![0.0; t_len * dm];
    {
        let (gw, gb) = split_two(grad, lr.w2.clone(), lr.b2.clone());
        linear_backward(
            &mut d_h_act,
            gw,
            gb,
            &d_x_out,
            &p[lr.w2.clone()],
            &lt.h_act,
            0,
            t_len,
            dm,
            d,
        );
    }
    let mut d_h_pre = d_h_act;
    for (g, &x0) in d_h_pre.iter_mut().zip(lt.h_pre.iter()) {
        *g *= gelu_prime(x0);
    }
    let mut d_n2out = vec![0.0; t_len * d];
    {
        let (gw, gb) = split_two(grad, lr.w1.clone(), lr.b1.clone());
        linear_backward(
            &mut d_n2out,
            gw,
            gb,
            &d_h_pre,
            &p[lr.w1.clone()],
            &lt.norm2.out,
            0,
            t_len,
            d,
            dm,
        );
    }
    {
        let (gg, gb) = split_two(grad, lr.mlp_norm_gain.clone(), lr.mlp_norm_bias.clone());
        layer_norm_backward(
            &mut d_x_mid,
            gg,
            gb,
            &d_n2out,
            &lt.norm2,
            &p[lr.mlp_norm_gain.clone()],
            t_len,
            d,
        );
    }

    // x_mid = x_in + attn(norm1(x_in)); residual passthrough first.
    let mut d_x_in = d_x_mid.clone();

    // Attention output projection.
    let mut d_head_cat = vec![0.0; t_len * d];
    {
        let (gw, gb) = split_two(grad, lr.wo.clone(), lr.bo.clone());
        linear_backward(
            &mut d_head_cat,
            gw,
            gb,
            &d_x_mid,
            &p[lr.wo.clone()],
            &lt.head_cat,
            0,
            t_len,
            d,
            d,
        );
    }

    // Attention core.
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dwork = vec![0.0; t_len];
    for h in 0..heads {
        let off = h * hd;
        for t in 0..t_len {
            let dctx = &d_head_cat[t * d + off..t * d + off + hd];
            let wrow = &lt.attn_w[h * t_len * t_len + t * t_len..][..=t];
            let mut s = 0.0;
            for (u, dw) in dwork[..=t].iter_mut().enumerate() {
                let vr = &lt.v[u * d + off..u * d + off + hd];
                let mut acc = 0.0;
                for j in 0..hd {
                    acc += dctx[j] * vr[j];
                }
                *dw = acc;
                s += wrow[u] * acc;
            }
            let qr = &lt.q[t * d + off..t * d + off + hd];
            let dqr_base = t * d + off;
            for u in 0..=t {
                let w_u = wrow[u];
                let ds = w_u * (dwork[u] - s) * inv_sqrt_hd;
                let kr = &lt.k[u * d + off..u * d + off + hd];
                for j in 0..hd {
                    dq[dqr_base + j] += ds * kr[j];
                    dk[u * d + off + j] += ds * qr[j];
                    dv[u * d + off + j] += w_u * dctx[j];
                }
            }
        }
    }

    // Q/K/V projections share the norm1 output as input.
    let mut d_n1out = vec![0.0; t_len * d];
    {
        let (gw, gb) = split_two(grad, lr.wq.clone(), lr.bq.clone());
        linear_backward(&mut d_n1out, gw, gb, &dq, &p[lr.wq.clone()], &lt.norm1.out, 0, t_len, d, d);
    }
    {
        let (gw, gb) = split_two(grad, lr.wk.clone(), lr.bk.clone());
        linear_backward(&mut d_n1out, gw, gb, &dk, &p[lr.wk.clone()], &lt.norm1.out, 0, t_len, d, d);
    }
    {
        let (gw, gb) = split_two(grad, lr.wv.clone(), lr.bv.clone());
        linear_backward(&mut d_n1out, gw, gb, &dv, &p[lr.wv.clone()], &lt.norm1.out, 0, t_len, d, d);
    }
    {
        let (gg, gb) = split_two(grad, lr.attn_norm_gain.clone(), lr.attn_norm_bias.clone());
        layer_norm_backward(
            &mut d_x_in,
            gg,
            gb,
            &d_n1out,
            &lt.norm1,
            &p[lr.attn_norm_gain.clone()],
            t_len,
            d,
        );
    }

    d_x_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward_ids, sequence_logprob};
    use crate::model::params::init_parameters;
    use crate::tokens::TokenSequence;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 12,
        }
    }

    #[test]
    fn empty_term_list_gives_zero_gradient() {
        let config = tiny_config();
        let params = init_parameters(&config, 5).unwrap();
        let grad = loss_backward(&params, &config, &[]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        assert_eq!(grad.len(), params.len());
    }

    #[test]
    fn output_bias_gradient_is_softmax_minus_onehot() {
        // For loss = -suffix_logprob, d loss / d output.bias[v] at one
        // predicted position is softmax[v] - 1{v = y}; summed over positions.
        let config = tiny_config();
        let params = init_parameters(&config, 6).unwrap();
        let layout = ParamLayout::new(&config);
        let ids = vec![2, 5, 3, 1, 0];
        let prefix_len = 2;
        let trace = forward_ids(&params, &config, &ids).unwrap();

        let grad = loss_backward(
            &params,
            &config,
            &[LossTerm {
                trace: &trace,
                prefix_len,
                weight: -1.0,
            }],
        )
        .unwrap();

        let mut expected = vec![0.0; config.vocab_size];
        for t in prefix_len..ids.len() {
            let row = trace.logits_at(t - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for v in 0..config.vocab_size {
                expected[v] += (row[v] - m).exp() / z;
            }
            expected[ids[t]] -= 1.0;
        }
        let got = &grad[layout.output_bias.clone()];
        for v in 0..config.vocab_size {
            assert!(
                (got[v] - expected[v]).abs() < 1e-12,
                "bias {v}: {} vs {}",
                got[v],
                expected[v]
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences_on_sampled_coordinates() {
        use rand::Rng;
        let config = tiny_config();
        let params = init_parameters(&config, 7).unwrap();
        let prefix = TokenSequence::new(vec![3, 6]).unwrap();
        let cont = TokenSequence::new(vec![2, 4, 1, 0]).unwrap();
        let ids = TokenSequence::concat(&prefix, &cont).unwrap();
        let trace = forward_ids(&params, &config, &ids).unwrap();
        let grad = loss_backward(
            &params,
            &config,
            &[LossTerm {
                trace: &trace,
                prefix_len: prefix.len(),
                weight: -1.0,
            }],
        )
        .unwrap();

        let mut rng = crate::seeding::stream_rng(99, crate::seeding::Stream::Eval, 0);
        let h = 1e-5;
        for _ in 0..25 {
            let i = rng.gen_range(0..params.len());
            let mut plus = params.clone();
            plus.flat_mut()[i] += h;
            let mut minus = params.clone();
            minus.flat_mut()[i] -= h;
            let lp = -sequence_logprob(&plus, &config, &prefix, &cont).unwrap();
            let lm = -sequence_logprob(&minus, &config, &prefix, &cont).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / f64::max((fd.abs() + grad[i].abs()) / 2.0, 1e-8);
            assert!(rel < 1e-4, "coord {i}: fd {fd} vs grad {}", grad[i]);
        }
    }

    #[test]
    fn rejects_trace_from_different_shape() {
        let config = tiny_config();
        let params = init_parameters(&config, 8).unwrap();
        let other = ModelConfig {
            n_layers: 1,
            ..config
        };
        let other_params = init_parameters(&other, 8).unwrap();
        let trace = forward_ids(&other_params, &other, &[1, 2, 3]).unwrap();
        let term = LossTerm {
            trace: &trace,
            prefix_len: 1,
            weight: 1.0,
        };
        assert!(loss_backward(&params, &config, &[term]).is_err());
    }
}

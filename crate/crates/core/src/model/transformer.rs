//! Forward pass and hand-written reverse-mode backward pass.

use super::{BlockLayout, ModelParams, TokenSequence};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `out[t×m] = a[t×n] · w[n×m]`
fn matmul(a: &[f64], w: &[f64], t: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * m];
    for i in 0..t {
        let row = &a[i * n..(i + 1) * n];
        let o = &mut out[i * m..(i + 1) * m];
        for (k, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wr = &w[k * m..(k + 1) * m];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov += av * wv;
            }
        }
    }
    out
}

/// `da[t×n] += dout[t×m] · wᵀ`, `dw[n×m] += aᵀ · dout`
fn matmul_backward(
    a: &[f64],
    w: &[f64],
    dout: &[f64],
    t: usize,
    n: usize,
    m: usize,
    da: &mut [f64],
    dw: &mut [f64],
) {
    for i in 0..t {
        let drow = &dout[i * m..(i + 1) * m];
        let arow = &a[i * n..(i + 1) * n];
        let darow = &mut da[i * n..(i + 1) * n];
        for k in 0..n {
            let wr = &w[k * m..(k + 1) * m];
            let dwr = &mut dw[k * m..(k + 1) * m];
            let mut acc = 0.0;
            let ak = arow[k];
            for j in 0..m {
                acc += drow[j] * wr[j];
                dwr[j] += ak * drow[j];
            }
            darow[k] += acc;
        }
    }
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], t: usize, d: usize) -> (Vec<f64>, LayerNormCache) {
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dout: &[f64],
    t: usize,
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dy = &dout[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dy[j] * xh[j];
            dbias[j] += dy[j];
            dxhat[j] = dy[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LayerNormCache,
    f: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Activations of one forward pass over `tokens`.
pub(crate) struct Trace {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    /// Final normalized hidden states, `t × d`.
    hidden: Vec<f64>,
}

impl Trace {
    fn len(&self) -> usize {
        self.tokens.len()
    }

    pub(crate) fn logits_at(&self, params: &ModelParams, pos: usize) -> Vec<f64> {
        let cfg = params.config();
        let d = cfg.d_model;
        let h = &self.hidden[pos * d..(pos + 1) * d];
        let w = params.block(&params.layout().embed);
        (0..cfg.vocab_size)
            .map(|k| h.iter().zip(&w[k * d..(k + 1) * d]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn block_forward(
    params: &ModelParams,
    bl: &BlockLayout,
    input: Vec<f64>,
    t: usize,
    d: usize,
) -> (Vec<f64>, BlockCache) {
    let f = params.config().d_ff();
    let p = |r: &std::ops::Range<usize>| params.block(r);

    let (a, ln1) = layer_norm(&input, p(&bl.ln1_gain), p(&bl.ln1_bias), t, d);
    let q = matmul(&a, p(&bl.wq), t, d, d);
    let k = matmul(&a, p(&bl.wk), t, d, d);
    let v = matmul(&a, p(&bl.wv), t, d, d);

    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; t * t];
    let mut mixed = vec![0.0; t * d];
    let mut scores = vec![0.0; t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..=i {
            scores[j] = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum::<f64>() * scale;
        }
        let lse = log_sum_exp(&scores[..=i]);
        for j in 0..=i {
            let pij = (scores[j] - lse).exp();
            probs[i * t + j] = pij;
            for c in 0..d {
                mixed[i * d + c] += pij * v[j * d + c];
            }
        }
    }
    let proj = matmul(&mixed, p(&bl.wo), t, d, d);
    let mid: Vec<f64> = input.iter().zip(&proj).map(|(x, y)| x + y).collect();

    let (fnorm, ln2) = layer_norm(&mid, p(&bl.ln2_gain), p(&bl.ln2_bias), t, d);
    let mut pre = matmul(&fnorm, p(&bl.w1), t, d, f);
    let b1 = p(&bl.b1);
    for i in 0..t {
        for c in 0..f {
            pre[i * f + c] += b1[c];
        }
    }
    let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let mut out = matmul(&act, p(&bl.w2), t, f, d);
    let b2 = p(&bl.b2);
    for i in 0..t {
        for c in 0..d {
            out[i * d + c] += mid[i * d + c] + b2[c];
        }
    }
    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        attn: mixed,
        ln2,
        f: fnorm,
        pre,
        act,
    };
    (out, cache)
}

pub(crate) fn forward(params: &ModelParams, tokens: &[u32]) -> Result<Trace> {
    let cfg = params.config();
    let d = cfg.d_model;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::EmptySequence("context"));
    }
    if t > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {t} positions exceeds model max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::InvalidToken { id, vocab: cfg.vocab_size });
    }
    let layout = params.layout();
    let emb = params.block(&layout.embed);
    let pos = params.block(&layout.pos);
    let mut h = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = &emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos[i * d..(i + 1) * d];
        for c in 0..d {
            h[i * d + c] = e[c] + pe[c];
        }
    }
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for (li, bl) in layout.blocks.iter().enumerate() {
        let (out, cache) = block_forward(params, bl, h, t, d);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: li });
        }
        blocks.push(cache);
        h = out;
    }
    let (hidden, lnf) = layer_norm(
        &h,
        params.block(&layout.lnf_gain),
        params.block(&layout.lnf_bias),
        t,
        d,
    );
    if hidden.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteActivation { layer: layout.blocks.len() });
    }
    Ok(Trace {
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        hidden,
    })
}

/// Backpropagate `dlogits` (one row of length K per listed position) into
/// `grad`, accumulating.
pub(crate) fn backward(params: &ModelParams, trace: &Trace, dlogits: &[(usize, Vec<f64>)], grad: &mut [f64]) {
    let cfg = params.config();
    let layout = params.layout();
    let d = cfg.d_model;
    let f = cfg.d_ff();
    let t = trace.len();
    let emb = params.block(&layout.embed);

    let mut dhidden = vec![0.0; t * d];
    for (pos, dl) in dlogits {
        let h = &trace.hidden[pos * d..(pos + 1) * d];
        for (k, &g) in dl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let w = &emb[k * d..(k + 1) * d];
            let ge = &mut grad[layout.embed.start + k * d..layout.embed.start + (k + 1) * d];
            for c in 0..d {
                ge[c] += g * h[c];
                dhidden[pos * d + c] += g * w[c];
            }
        }
    }

    let mut dh = vec![0.0; t * d];
    {
        let (gain_g, bias_g) = split_two(grad, &layout.lnf_gain, &layout.lnf_bias);
        layer_norm_backward(
            &trace.lnf,
            params.block(&layout.lnf_gain),
            &dhidden,
            t,
            d,
            &mut dh,
            gain_g,
            bias_g,
        );
    }

    for (bl, cache) in layout.blocks.iter().zip(&trace.blocks).rev() {
        dh = block_backward(params, bl, cache, dh, t, d, f, grad);
    }

    for (i, &tok) in trace.tokens.iter().enumerate() {
        let e0 = layout.embed.start + tok as usize * d;
        let p0 = layout.pos.start + i * d;
        for c in 0..d {
            grad[e0 + c] += dh[i * d + c];
            grad[p0 + c] += dh[i * d + c];
        }
    }
}

fn split_two<'a>(
    grad: &'a mut [f64],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    params: &ModelParams,
    bl: &BlockLayout,
    c: &BlockCache,
    dout: Vec<f64>,
    t: usize,
    d: usize,
    f: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let p = |r: &std::ops::Range<usize>| params.block(r);

    // feed-forward branch
    let mut dmid = dout.clone();
    for i in 0..t {
        for cc in 0..d {
            grad[bl.b2.start + cc] += dout[i * d + cc];
        }
    }
    let mut dact = vec![0.0; t * f];
    matmul_backward(&c.act, p(&bl.w2), &dout, t, f, d, &mut dact, &mut grad[bl.w2.clone()]);
    let dpre: Vec<f64> = dact.iter().zip(&c.pre).map(|(g, &x)| g * gelu_grad(x)).collect();
    for i in 0..t {
        for cc in 0..f {
            grad[bl.b1.start + cc] += dpre[i * f + cc];
        }
    }
    let mut df = vec![0.0; t * d];
    matmul_backward(&c.f, p(&bl.w1), &dpre, t, d, f, &mut df, &mut grad[bl.w1.clone()]);
    {
        let (gg, bg) = split_two(grad, &bl.ln2_gain, &bl.ln2_bias);
        layer_norm_backward(&c.ln2, p(&bl.ln2_gain), &df, t, d, &mut dmid, gg, bg);
    }

    // attention branch
    let mut dinput = dmid.clone();
    let mut dattn = vec![0.0; t * d];
    matmul_backward(&c.attn, p(&bl.wo), &dmid, t, d, d, &mut dattn, &mut grad[bl.wo.clone()]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dprob = vec![0.0; t];
    for i in 0..t {
        let dai = &dattn[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for j in 0..=i {
            let pij = c.probs[i * t + j];
            let vj = &c.v[j * d..(j + 1) * d];
            let dp: f64 = dai.iter().zip(vj).map(|(x, y)| x * y).sum();
            dprob[j] = dp;
            dot += pij * dp;
            for cc in 0..d {
                dv[j * d + cc] += pij * dai[cc];
            }
        }
        for j in 0..=i {
            let ds = c.probs[i * t + j] * (dprob[j] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            for cc in 0..d {
                dq[i * d + cc] += ds * c.k[j * d + cc];
                dk[j * d + cc] += ds * c.q[i * d + cc];
            }
        }
    }
    let mut da = vec![0.0; t * d];
    matmul_backward(&c.a, p(&bl.wq), &dq, t, d, d, &mut da, &mut grad[bl.wq.clone()]);
    matmul_backward(&c.a, p(&bl.wk), &dk, t, d, d, &mut da, &mut grad[bl.wk.clone()]);
    matmul_backward(&c.a, p(&bl.wv), &dv, t, d, d, &mut da, &mut grad[bl.wv.clone()]);
    {
        let (gg, bg) = split_two(grad, &bl.ln1_gain, &bl.ln1_bias);
        layer_norm_backward(&c.ln1, p(&bl.ln1_gain), &da, t, d, &mut dinput, gg, bg);
    }
    dinput
}

fn check_pair(params: &ModelParams, x: &TokenSequence, y: &TokenSequence) -> Result<Vec<u32>> {
    let k = params.config().vocab_size;
    if x.is_empty() {
        return Err(Error::EmptySequence("prompt"));
    }
    if y.is_empty() {
        return Err(Error::EmptySequence("answer"));
    }
    if !y.is_terminated() {
        return Err(Error::Input("answer must end with the end-of-sequence token".into()));
    }
    x.validate(k)?;
    y.validate(k)?;
    let mut tokens = Vec::with_capacity(x.len() + y.len() - 1);
    tokens.extend_from_slice(x.ids());
    tokens.extend_from_slice(&y.ids()[..y.len() - 1]);
    Ok(tokens)
}

/// Next-token logits after `context`.
pub fn token_logits(params: &ModelParams, context: &TokenSequence) -> Result<Vec<f64>> {
    let trace = forward(params, context.ids())?;
    Ok(trace.logits_at(params, trace.len() - 1))
}

/// `log P_g(y | x)`, summed over answer positions only.
pub fn sequence_logprob(params: &ModelParams, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
    let tokens = check_pair(params, x, y)?;
    let trace = forward(params, &tokens)?;
    let start = x.len() - 1;
    let mut total = 0.0;
    for (j, &target) in y.ids().iter().enumerate() {
        let logits = trace.logits_at(params, start + j);
        total += logits[target as usize] - log_sum_exp(&logits);
    }
    Ok(total)
}

/// `(log P_g(y|x), ∇θ log P_g(y|x))`.
pub fn logprob_grad(params: &ModelParams, x: &TokenSequence, y: &TokenSequence) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let lp = logprob_grad_into(params, x, y, 1.0, &mut grad)?;
    Ok((lp, grad))
}

/// Adds `coeff · ∇θ log P_g(y|x)` to `grad` and returns `log P_g(y|x)`.
pub fn logprob_grad_into(
    params: &ModelParams,
    x: &TokenSequence,
    y: &TokenSequence,
    coeff: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if grad.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient buffer has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    let tokens = check_pair(params, x, y)?;
    let trace = forward(params, &tokens)?;
    let start = x.len() - 1;
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(y.len());
    for (j, &target) in y.ids().iter().enumerate() {
        let logits = trace.logits_at(params, start + j);
        let lse = log_sum_exp(&logits);
        total += logits[target as usize] - lse;
        let mut dl: Vec<f64> = logits.iter().map(|&z| -coeff * (z - lse).exp()).collect();
        dl[target as usize] += coeff;
        dlogits.push((start + j, dl));
    }
    if coeff != 0.0 {
        backward(params, &trace, &dlogits, grad);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn fd_check(params: &ModelParams, x: &TokenSequence, y: &TokenSequence) -> f64 {
        let (_, g) = logprob_grad(params, x, y).unwrap();
        let h = 1e-5;
        let mut num = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut p = params.flat().to_vec();
            p[i] += h;
            let fp = sequence_logprob(&params.with_flat(p.clone()).unwrap(), x, y).unwrap();
            p[i] -= 2.0 * h;
            let fm = sequence_logprob(&params.with_flat(p).unwrap(), x, y).unwrap();
            num[i] = (fp - fm) / (2.0 * h);
        }
        crate::numeric::max_relative_error(&g, &num)
    }

    #[test]
    fn gradient_matches_finite_differences_two_layers() {
        let cfg = ModelConfig::new(4, 8, 2, 8);
        let params = ModelParams::init(cfg, 11);
        let x = TokenSequence::prompt(vec![1, 2, 3]);
        let y = TokenSequence::terminated(vec![2, 1]);
        let err = fd_check(&params, &x, &y);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn logits_of_zero_model_vanish() {
        let cfg = ModelConfig::new(4, 8, 1, 8);
        let params = ModelParams::zeros(cfg);
        let logits = token_logits(&params, &TokenSequence::prompt(vec![1, 3])).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
    }

    #[test]
    fn rejects_overlong_and_unterminated() {
        let cfg = ModelConfig::new(4, 8, 1, 4);
        let params = ModelParams::zeros(cfg);
        let x = TokenSequence::prompt(vec![1, 2, 3]);
        assert!(sequence_logprob(&params, &x, &TokenSequence::terminated(vec![1, 1])).is_err());
        assert!(matches!(
            sequence_logprob(&params, &x, &TokenSequence::answer(vec![1])),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            sequence_logprob(&params, &x, &TokenSequence::answer(vec![])),
            Err(Error::EmptySequence(_))
        ));
        assert!(matches!(
            sequence_logprob(&params, &TokenSequence::prompt(vec![9]), &TokenSequence::terminated(vec![])),
            Err(Error::InvalidToken { id: 9, .. })
        ));
    }

    #[test]
    fn nan_parameter_surfaces_layer_index() {
        let cfg = ModelConfig::new(4, 8, 2, 8);
        let mut params = ModelParams::init(cfg, 1);
        let r = params.layout().blocks[1].wo.start;
        params.flat_mut()[r] = f64::NAN;
        let err = token_logits(&params, &TokenSequence::prompt(vec![1, 2])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteActivation { layer: 1 }), "{err}");
    }
}

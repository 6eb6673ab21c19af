//! Batched forward and reverse-mode pass of the noise predictor.
//!
//! Rows of every activation matrix are batch elements. Goal tokens of batch
//! element `b` occupy rows `b * n_tokens .. (b + 1) * n_tokens` of the context.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};

use super::params::{ArchConfig, Block, Linear, Scalar, Weights, TIME_FEATURES};

const RMS_EPS: f64 = 1e-5;

/// Goal features for a batch.
#[derive(Debug, Clone)]
pub struct Conditioning<F> {
    /// Tokens mode: `(B * n_tokens) x 7`; flat mode: `B x (7 * n_ee)`.
    pub feats: Array2<F>,
    /// One flag per feature row; unspecified rows use the empty token.
    pub specified: Vec<bool>,
    pub n_tokens: usize,
}

impl<F: Scalar> Conditioning<F> {
    pub fn batch_len(&self) -> usize {
        self.feats.nrows() / self.n_tokens
    }
}

struct Rms<F> {
    xhat: Array2<F>,
    inv: Array1<F>,
}

struct BlockCache<F> {
    res_rms: Rms<F>,
    res_u: Array2<F>,
    res_pre: Array2<F>,
    res_act: Array2<F>,
    attn_rms: Rms<F>,
    attn_a: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    p: Vec<F>,
    o: Array2<F>,
    ff_rms: Rms<F>,
    ff_u: Array2<F>,
    ff_pre: Array2<F>,
    ff_act: Array2<F>,
}

/// Activations kept for the backward pass.
pub(crate) struct Cache<F> {
    x: Array2<F>,
    tfeat: Array2<F>,
    tpre: Array2<F>,
    temb: Array2<F>,
    ctx: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    out_rms: Rms<F>,
    out_u: Array2<F>,
}

/// Sinusoidal features of integer timesteps, `B x 128`.
pub(crate) fn time_features<F: Scalar>(t_index: &[usize]) -> Array2<F> {
    let half = TIME_FEATURES / 2;
    let mut out = Array2::zeros((t_index.len(), TIME_FEATURES));
    for (r, &t) in t_index.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[r, k]] = F::of(a.sin());
            out[[r, half + k]] = F::of(a.cos());
        }
    }
    out
}

/// Fixed sinusoidal encoding of token slots, `n x d`.
pub fn positional_encoding<F: Scalar>(n: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((n, d), |(i, j)| {
        let k = (j / 2) as f64;
        let a = i as f64 * (-(10_000f64.ln()) * 2.0 * k / d as f64).exp();
        F::of(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Goal tokens: pose projection or empty token, plus the slot encoding.
pub(crate) fn embed_goals<F: Scalar>(w: &Weights<F>, cond: &Conditioning<F>) -> Array2<F> {
    let d = w.empty.len();
    let pe = positional_encoding::<F>(cond.n_tokens, d);
    let mut ctx = affine(&cond.feats, &w.pose);
    for (r, mut row) in ctx.rows_mut().into_iter().enumerate() {
        if !cond.specified[r] {
            row.assign(&w.empty);
        }
        row += &pe.row(r % cond.n_tokens);
    }
    ctx
}

fn affine<F: Scalar>(x: &Array2<F>, l: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&l.w);
    y += &l.b;
    y
}

/// Accumulates parameter gradients of `y = x W + b` and returns `dL/dx`.
fn affine_back<F: Scalar>(x: &Array2<F>, dy: &Array2<F>, l: &Linear<F>, g: &mut Linear<F>) -> Array2<F> {
    affine_back_params(x, dy, g);
    dy.dot(&l.w.t())
}

fn affine_back_params<F: Scalar>(x: &Array2<F>, dy: &Array2<F>, g: &mut Linear<F>) {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut g.w);
    g.b += &dy.sum_axis(Axis(0));
}

fn rms_forward<F: Scalar>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, Rms<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(RMS_EPS);
    let inv = x.map_axis(Axis(1), |r| {
        let ms = r.iter().map(|&v| v * v).sum::<F>() / d;
        F::one() / (ms + eps).sqrt()
    });
    let xhat = x * &inv.view().insert_axis(Axis(1));
    let y = &xhat * gain;
    (y, Rms { xhat, inv })
}

fn rms_backward<F: Scalar>(dy: &Array2<F>, gain: &Array1<F>, c: &Rms<F>, dgain: &mut Array1<F>) -> Array2<F> {
    *dgain += &(dy * &c.xhat).sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = F::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(c.xhat.rows())
        .and(&c.inv)
        .for_each(|mut out, g, xh, &inv| {
            let m = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = inv * (gi - xi * m));
        });
    dx
}

/// Tanh approximation of GeLU.
fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let th = (c * (x + a * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x)
}

fn gelu_back<F: Scalar>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|d, &v| *d *= gelu_grad(v));
    dx
}

/// Multi-head attention of one query row per batch element over its goal tokens.
/// Returns the head outputs and the attention weights `[b][head][token]`.
fn attention<F: Scalar>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    n_tok: usize,
    heads: usize,
) -> (Array2<F>, Vec<F>) {
    let (bsz, d) = q.dim();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (qs, ks, vs) = (std_slice(q), std_slice(k), std_slice(v));
    let mut o = Array2::zeros((bsz, d));
    let os = o.as_slice_mut().unwrap();
    let mut p = vec![F::zero(); bsz * heads * n_tok];
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            let qrow = &qs[b * d + off..b * d + off + dh];
            let pw = &mut p[(b * heads + h) * n_tok..(b * heads + h + 1) * n_tok];
            for (i, s) in pw.iter_mut().enumerate() {
                let krow = &ks[(b * n_tok + i) * d + off..][..dh];
                *s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<F>() * scale;
            }
            let mx = pw.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for s in pw.iter_mut() {
                *s = (*s - mx).exp();
                z += *s;
            }
            for s in pw.iter_mut() {
                *s /= z;
            }
            let orow = &mut os[b * d + off..b * d + off + dh];
            for (i, &pi) in pw.iter().enumerate() {
                let vrow = &vs[(b * n_tok + i) * d + off..][..dh];
                for (oo, &vv) in orow.iter_mut().zip(vrow) {
                    *oo += pi * vv;
                }
            }
        }
    }
    (o, p)
}

#[allow(clippy::too_many_arguments)]
fn attention_back<F: Scalar>(
    d_o: &Array2<F>,
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    p: &[F],
    n_tok: usize,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (bsz, d) = q.dim();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (qs, ks, vs) = (std_slice(q), std_slice(k), std_slice(v));
    let dos = std_slice(d_o);
    let mut dq = Array2::zeros((bsz, d));
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().unwrap(),
        dk.as_slice_mut().unwrap(),
        dv.as_slice_mut().unwrap(),
    );
    let mut dp = vec![F::zero(); n_tok];
    for b in 0..bsz {
        for h in 0..heads {
            let off = h * dh;
            let pw = &p[(b * heads + h) * n_tok..(b * heads + h + 1) * n_tok];
            let dorow = &dos[b * d + off..b * d + off + dh];
            let mut dot = F::zero();
            for i in 0..n_tok {
                let r = (b * n_tok + i) * d + off;
                dp[i] = dorow.iter().zip(&vs[r..r + dh]).map(|(&a, &c)| a * c).sum();
                dot += pw[i] * dp[i];
                for (dvv, &g) in dvs[r..r + dh].iter_mut().zip(dorow) {
                    *dvv += pw[i] * g;
                }
            }
            let qrow = &qs[b * d + off..b * d + off + dh];
            for i in 0..n_tok {
                let ds = pw[i] * (dp[i] - dot) * scale;
                let r = (b * n_tok + i) * d + off;
                for kk in 0..dh {
                    dqs[b * d + off + kk] += ds * ks[r + kk];
                    dks[r + kk] += ds * qrow[kk];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn std_slice<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("activations are in standard layout")
}

/// Predicted noise for a batch of normalized configurations, with the cache
/// needed to differentiate it.
pub(crate) fn forward<F: Scalar>(
    w: &Weights<F>,
    arch: &ArchConfig,
    x: &Array2<F>,
    t_index: &[usize],
    cond: &Conditioning<F>,
) -> (Array2<F>, Cache<F>) {
    let tfeat = time_features::<F>(t_index);
    let tpre = affine(&tfeat, &w.time);
    let temb = tpre.mapv(gelu);
    let ctx = embed_goals(w, cond);
    let mut h = affine(x, &w.input);
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for blk in &w.blocks {
        let (res_u, res_rms) = rms_forward(&h, &blk.res_norm);
        let mut res_pre = affine(&res_u, &blk.res_in);
        general_mat_mul(F::one(), &temb, &blk.res_time, F::one(), &mut res_pre);
        let res_act = res_pre.mapv(gelu);
        h += &affine(&res_act, &blk.res_out);

        let (attn_a, attn_rms) = rms_forward(&h, &blk.attn_norm);
        let q = attn_a.dot(&blk.wq);
        let k = ctx.dot(&blk.wk);
        let v = ctx.dot(&blk.wv);
        let (o, p) = attention(&q, &k, &v, cond.n_tokens, arch.n_heads);
        h += &affine(&o, &blk.attn_out);

        let (ff_u, ff_rms) = rms_forward(&h, &blk.ff_norm);
        let ff_pre = affine(&ff_u, &blk.ff_in);
        let ff_act = ff_pre.mapv(gelu);
        h += &affine(&ff_act, &blk.ff_out);

        blocks.push(BlockCache {
            res_rms,
            res_u,
            res_pre,
            res_act,
            attn_rms,
            attn_a,
            q,
            k,
            v,
            p,
            o,
            ff_rms,
            ff_u,
            ff_pre,
            ff_act,
        });
    }
    let (out_u, out_rms) = rms_forward(&h, &w.out_norm);
    let y = affine(&out_u, &w.out);
    let cache = Cache {
        x: x.clone(),
        tfeat,
        tpre,
        temb,
        ctx,
        blocks,
        out_rms,
        out_u,
    };
    (y, cache)
}

/// Gradient of a scalar loss w.r.t. every weight, given `dL/dy`.
pub(crate) fn backward<F: Scalar>(
    w: &Weights<F>,
    arch: &ArchConfig,
    cache: &Cache<F>,
    cond: &Conditioning<F>,
    dy: &Array2<F>,
) -> Weights<F> {
    let mut g = w.map(|_| F::zero());
    let du = affine_back(&cache.out_u, dy, &w.out, &mut g.out);
    let mut dh = rms_backward(&du, &w.out_norm, &cache.out_rms, &mut g.out_norm);
    let mut dtemb = Array2::zeros(cache.temb.raw_dim());
    let mut dctx = Array2::zeros(cache.ctx.raw_dim());

    for ((blk, c), gb) in w.blocks.iter().zip(&cache.blocks).zip(g.blocks.iter_mut()).rev() {
        block_backward(blk, c, gb, cache, arch, cond.n_tokens, &mut dh, &mut dtemb, &mut dctx);
    }

    affine_back_params(&cache.x, &dh, &mut g.input);
    let dtpre = gelu_back(&cache.tpre, &dtemb);
    affine_back_params(&cache.tfeat, &dtpre, &mut g.time);

    for (r, mut row) in dctx.rows_mut().into_iter().enumerate() {
        if !cond.specified[r] {
            g.empty += &row;
            row.fill(F::zero());
        }
    }
    affine_back_params(&cond.feats, &dctx, &mut g.pose);
    g
}

#[allow(clippy::too_many_arguments)]
fn block_backward<F: Scalar>(
    blk: &Block<F>,
    c: &BlockCache<F>,
    gb: &mut Block<F>,
    cache: &Cache<F>,
    arch: &ArchConfig,
    n_tok: usize,
    dh: &mut Array2<F>,
    dtemb: &mut Array2<F>,
    dctx: &mut Array2<F>,
) {
    let one = F::one();

    let dact = affine_back(&c.ff_act, dh, &blk.ff_out, &mut gb.ff_out);
    let dpre = gelu_back(&c.ff_pre, &dact);
    let du = affine_back(&c.ff_u, &dpre, &blk.ff_in, &mut gb.ff_in);
    *dh += &rms_backward(&du, &blk.ff_norm, &c.ff_rms, &mut gb.ff_norm);

    let d_o = affine_back(&c.o, dh, &blk.attn_out, &mut gb.attn_out);
    let (dq, dk, dv) = attention_back(&d_o, &c.q, &c.k, &c.v, &c.p, n_tok, arch.n_heads);
    general_mat_mul(one, &c.attn_a.t(), &dq, one, &mut gb.wq);
    general_mat_mul(one, &cache.ctx.t(), &dk, one, &mut gb.wk);
    general_mat_mul(one, &cache.ctx.t(), &dv, one, &mut gb.wv);
    general_mat_mul(one, &dk, &blk.wk.t(), one, dctx);
    general_mat_mul(one, &dv, &blk.wv.t(), one, dctx);
    let da = dq.dot(&blk.wq.t());
    *dh += &rms_backward(&da, &blk.attn_norm, &c.attn_rms, &mut gb.attn_norm);

    let dact = affine_back(&c.res_act, dh, &blk.res_out, &mut gb.res_out);
    let dpre = gelu_back(&c.res_pre, &dact);
    general_mat_mul(one, &cache.temb.t(), &dpre, one, &mut gb.res_time);
    general_mat_mul(one, &dpre, &blk.res_time.t(), one, dtemb);
    let du = affine_back(&c.res_u, &dpre, &blk.res_in, &mut gb.res_in);
    *dh += &rms_backward(&du, &blk.res_norm, &c.res_rms, &mut gb.res_norm);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn rms_output_has_unit_rms_with_unit_gain() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0, -2.0, 3.0, 0.5, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let (y, _) = rms_forward(&x, &Array1::ones(4));
        for row in y.rows() {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let q = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.3);
        let k = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j) % 5) as f64 * 0.2);
        let (_, p) = attention(&q, &k, &k, 3, 2);
        for chunk in p.chunks(3) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slot_encodings_differ() {
        let pe = positional_encoding::<f64>(3, 8);
        assert_ne!(pe.row(0), pe.row(1));
        assert_ne!(pe.row(1), pe.row(2));
    }
}

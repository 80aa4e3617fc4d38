//! Forward pass, manual reverse-mode gradients, and the vector-field
//! adapter. Everything is f64; the backward pass mirrors the forward pass
//! layer by layer against cached activations.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::flow::{Conditioning, VectorField};
use crate::tokens::TokenId;

use super::{LayerParams, ModelConfig, ParameterSet};

const LN_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
const TIME_FREQ_MIN: f64 = 1.0;
const TIME_FREQ_MAX: f64 = 1000.0;

/// One forward invocation: per-frame features (clean prompt prefix rows
/// followed by the flow state on the body), the two token streams over the
/// same length, and the flow time.
pub struct ForwardInput<'a> {
    pub features: &'a Array2<f64>,
    pub z1: &'a [TokenId],
    pub z2: &'a [TokenId],
    pub t: f64,
}

/// One training sample for [`gradients`]: the model input plus the
/// regression target and the per-frame loss mask.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Array2<f64>,
    pub z1: Vec<TokenId>,
    pub z2: Vec<TokenId>,
    pub t: f64,
    pub target: Array2<f64>,
    pub mask: Vec<bool>,
}

// ---------------------------------------------------------------------
// primitives

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    invstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut invstd = Array1::zeros(rows);
    for f in 0..rows {
        let row = x.row(f);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invstd[f] = inv;
        for c in 0..cols {
            xhat[[f, c]] = (x[[f, c]] - mean) * inv;
        }
    }
    let mut y = xhat.clone();
    for f in 0..rows {
        for c in 0..cols {
            y[[f, c]] = y[[f, c]] * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, invstd })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    for f in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            let dxhat = dy[[f, c]] * g[c];
            m1 += dxhat;
            m2 += dxhat * cache.xhat[[f, c]];
            dg[c] += dy[[f, c]] * cache.xhat[[f, c]];
            db[c] += dy[[f, c]];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        let inv = cache.invstd[f];
        for c in 0..cols {
            let dxhat = dy[[f, c]] * g[c];
            dx[[f, c]] = (dxhat - m1 - cache.xhat[[f, c]] * m2) * inv;
        }
    }
    dx
}

/// Rotate query/key pairs by position-dependent angles (in place).
/// `sign` is +1 in the forward pass and -1 when back-propagating.
fn rope(x: &mut Array2<f64>, n_heads: usize, sign: f64) {
    let (rows, cols) = x.dim();
    let dh = cols / n_heads;
    let half = dh / 2;
    for f in 0..rows {
        for h in 0..n_heads {
            for j in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * j as f64 / dh as f64);
                let angle = sign * f as f64 * theta;
                let (sin, cos) = angle.sin_cos();
                let i0 = h * dh + 2 * j;
                let a = x[[f, i0]];
                let b = x[[f, i0 + 1]];
                x[[f, i0]] = a * cos - b * sin;
                x[[f, i0 + 1]] = a * sin + b * cos;
            }
        }
    }
}

fn add_row_broadcast(m: &mut Array2<f64>, v: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += v;
    }
}

fn sum_rows(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

// ---------------------------------------------------------------------
// time conditioning

/// Sinusoidal features of `t` at geometrically spaced frequencies, before
/// the projection MLP. At t=0 the sin components are 0 and the cos
/// components are 1.
pub fn time_features(t: f64, d_model: usize) -> Array1<f64> {
    let half = d_model / 2;
    let mut s = Array1::zeros(d_model);
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let omega = TIME_FREQ_MIN * (TIME_FREQ_MAX / TIME_FREQ_MIN).powf(frac);
        s[2 * i] = (omega * t).sin();
        s[2 * i + 1] = (omega * t).cos();
    }
    s
}

struct TimeCache {
    s: Array1<f64>,
    u1: Array1<f64>,
    h1: Array1<f64>,
}

fn time_embed_cached(params: &ParameterSet, config: &ModelConfig, t: f64) -> (Array1<f64>, TimeCache) {
    let s = time_features(t, config.d_model);
    let mut u1 = params.time_w1.t().dot(&s);
    u1 += &params.time_b1;
    let h1 = u1.mapv(gelu);
    let mut e = params.time_w2.t().dot(&h1);
    e += &params.time_b2;
    (e, TimeCache { s, u1, h1 })
}

/// The shared per-frame time embedding.
pub fn time_embed(params: &ParameterSet, config: &ModelConfig, t: f64) -> Array1<f64> {
    time_embed_cached(params, config, t).0
}

// ---------------------------------------------------------------------
// forward

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Cache {
    /// xs[0] is the embedded input; xs[l + 1] is layer l's output.
    xs: Vec<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Array2<f64>,
    time: TimeCache,
}

fn attention_block(
    layer: &LayerParams,
    x_in: &Array2<f64>,
    config: &ModelConfig,
) -> (Array2<f64>, LayerCache) {
    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = x_in.nrows();

    let (a, ln1) = layer_norm(x_in, &layer.ln1_g, &layer.ln1_b);
    let mut q = a.dot(&layer.wq);
    add_row_broadcast(&mut q, &layer.bq);
    let mut k = a.dot(&layer.wk);
    add_row_broadcast(&mut k, &layer.bk);
    let mut v = a.dot(&layer.wv);
    add_row_broadcast(&mut v, &layer.bv);
    if config.use_rope {
        rope(&mut q, n_heads, 1.0);
        rope(&mut k, n_heads, 1.0);
    }

    let mut ctx = Array2::zeros((rows, config.d_model));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]).to_owned();
        let kh = k.slice(s![.., cols.clone()]).to_owned();
        let vh = v.slice(s![.., cols.clone()]).to_owned();
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        // softmax rows in place
        for mut row in scores.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(s![.., cols]).assign(&ctx_h);
        probs.push(scores);
    }
    let mut o = ctx.dot(&layer.wo);
    add_row_broadcast(&mut o, &layer.bo);
    let x_mid = x_in + &o;

    let (a2, ln2) = layer_norm(&x_mid, &layer.ln2_g, &layer.ln2_b);
    let mut u = a2.dot(&layer.w_up);
    add_row_broadcast(&mut u, &layer.b_up);
    let g = u.mapv(gelu);
    let mut d = g.dot(&layer.w_down);
    add_row_broadcast(&mut d, &layer.b_down);
    let x_out = &x_mid + &d;

    (
        x_out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            a2,
            u,
            g,
        },
    )
}

fn embed_input(params: &ParameterSet, config: &ModelConfig, input: &ForwardInput) -> Result<(Array2<f64>, TimeCache)> {
    let rows = input.features.nrows();
    if input.features.ncols() != config.d_features {
        return Err(Error::DimensionMismatch {
            expected: config.d_features,
            got: input.features.ncols(),
        });
    }
    if input.z1.len() != rows || input.z2.len() != rows {
        return Err(Error::ShapeMismatch {
            expected: format!("{rows} stream tokens"),
            got: format!("{} / {}", input.z1.len(), input.z2.len()),
        });
    }
    let (e_time, time) = time_embed_cached(params, config, input.t);
    let mut x0 = input.features.dot(&params.feat_w);
    add_row_broadcast(&mut x0, &params.feat_b);
    add_row_broadcast(&mut x0, &e_time);
    for f in 0..rows {
        let id1 = input.z1[f];
        let id2 = input.z2[f];
        if id1 >= config.vocab_size || id2 >= config.vocab_size {
            return Err(Error::OutOfRange(format!("token id beyond vocab at frame {f}")));
        }
        let mut row = x0.row_mut(f);
        row += &params.embed_z1.row(id1);
        row += &params.embed_z2.row(id2);
    }
    Ok((x0, time))
}

fn forward_cached(
    params: &ParameterSet,
    config: &ModelConfig,
    input: &ForwardInput,
) -> Result<(Array2<f64>, Cache)> {
    let (x0, time) = embed_input(params, config, input)?;
    let n = config.n_layers;
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(x0);
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let x_in = if l >= n / 2 {
            // merge the paired first-half layer's output into this input
            let p = l - n / 2;
            let skip = &xs[n - l];
            let own = params.merge_own[p];
            let sk = params.merge_skip[p];
            &(&xs[l] * own) + &(skip * sk)
        } else {
            xs[l].clone()
        };
        let (x_out, cache) = attention_block(&params.layers[l], &x_in, config);
        xs.push(x_out);
        layers.push(cache);
    }
    let (y, lnf) = layer_norm(&xs[n], &params.lnf_g, &params.lnf_b);
    let mut out = y.dot(&params.out_w);
    add_row_broadcast(&mut out, &params.out_b);
    Ok((
        out,
        Cache {
            xs,
            layers,
            lnf,
            y,
            time,
        },
    ))
}

/// Evaluate the vector field on a full (prefix + body) sequence.
pub fn forward(params: &ParameterSet, config: &ModelConfig, input: &ForwardInput) -> Result<Array2<f64>> {
    Ok(forward_cached(params, config, input)?.0)
}

// ---------------------------------------------------------------------
// backward

fn attention_block_backward(
    layer: &LayerParams,
    grads: &mut LayerParams,
    cache: &LayerCache,
    dout: &Array2<f64>,
    config: &ModelConfig,
) -> Array2<f64> {
    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = dout.nrows();

    // mlp: x_out = x_mid + gelu(ln2(x_mid) w_up + b_up) w_down + b_down
    let mut dx_mid = dout.clone();
    grads.w_down += &cache.g.t().dot(dout);
    grads.b_down += &sum_rows(dout);
    let dg = dout.dot(&layer.w_down.t());
    let mut du = dg;
    du.zip_mut_with(&cache.u, |d, u| *d *= gelu_grad(*u));
    grads.w_up += &cache.a2.t().dot(&du);
    grads.b_up += &sum_rows(&du);
    let da2 = du.dot(&layer.w_up.t());
    let dmid_ln = layer_norm_backward(&da2, &cache.ln2, &layer.ln2_g, &mut grads.ln2_g, &mut grads.ln2_b);
    dx_mid += &dmid_ln;

    // attention: x_mid = x_in + ctx wo + bo
    let d_o = &dx_mid;
    let mut dx_in = dx_mid.clone();
    grads.wo += &cache.ctx.t().dot(d_o);
    grads.bo += &sum_rows(d_o);
    let dctx = d_o.dot(&layer.wo.t());

    let mut dq = Array2::zeros((rows, config.d_model));
    let mut dk = Array2::zeros((rows, config.d_model));
    let mut dv = Array2::zeros((rows, config.d_model));
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let dctx_h = dctx.slice(s![.., cols.clone()]).to_owned();
        let probs = &cache.probs[h];
        let qh = cache.q.slice(s![.., cols.clone()]).to_owned();
        let kh = cache.k.slice(s![.., cols.clone()]).to_owned();
        let vh = cache.v.slice(s![.., cols.clone()]).to_owned();

        let dp = dctx_h.dot(&vh.t());
        dv.slice_mut(s![.., cols.clone()]).assign(&probs.t().dot(&dctx_h));
        // softmax backward per row
        let mut ds = dp;
        for f in 0..rows {
            let dot = ds.row(f).dot(&probs.row(f));
            for j in 0..rows {
                ds[[f, j]] = probs[[f, j]] * (ds[[f, j]] - dot);
            }
        }
        let mut dqh = ds.dot(&kh);
        dqh *= scale;
        let mut dkh = ds.t().dot(&qh);
        dkh *= scale;
        dq.slice_mut(s![.., cols.clone()]).assign(&dqh);
        dk.slice_mut(s![.., cols]).assign(&dkh);
    }
    if config.use_rope {
        rope(&mut dq, n_heads, -1.0);
        rope(&mut dk, n_heads, -1.0);
    }
    grads.wq += &cache.a.t().dot(&dq);
    grads.bq += &sum_rows(&dq);
    grads.wk += &cache.a.t().dot(&dk);
    grads.bk += &sum_rows(&dk);
    grads.wv += &cache.a.t().dot(&dv);
    grads.bv += &sum_rows(&dv);
    let mut da = dq.dot(&layer.wq.t());
    da += &dk.dot(&layer.wk.t());
    da += &dv.dot(&layer.wv.t());
    let din_ln = layer_norm_backward(&da, &cache.ln1, &layer.ln1_g, &mut grads.ln1_g, &mut grads.ln1_b);
    dx_in += &din_ln;
    dx_in
}

/// Full backward pass; accumulates parameter gradients into `grads`.
fn backward(
    params: &ParameterSet,
    config: &ModelConfig,
    input: &ForwardInput,
    cache: &Cache,
    dout: &Array2<f64>,
    grads: &mut ParameterSet,
) {
    let n = config.n_layers;

    // output head
    grads.out_w += &cache.y.t().dot(dout);
    grads.out_b += &sum_rows(dout);
    let dy = dout.dot(&params.out_w.t());
    let dxn = layer_norm_backward(&dy, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    // per-position grads flowing along the residual stream
    let mut dxs: Vec<Array2<f64>> = (0..=n)
        .map(|i| Array2::zeros(cache.xs[i].dim()))
        .collect();
    dxs[n] = dxn;

    for l in (0..n).rev() {
        let dout_l = dxs[l + 1].clone();
        let dx_in = attention_block_backward(
            &params.layers[l],
            &mut grads.layers[l],
            &cache.layers[l],
            &dout_l,
            config,
        );
        if l >= n / 2 {
            let p = l - n / 2;
            grads.merge_own[p] += (&dx_in * &cache.xs[l]).sum();
            grads.merge_skip[p] += (&dx_in * &cache.xs[n - l]).sum();
            let own = params.merge_own[p];
            let sk = params.merge_skip[p];
            dxs[l] += &(&dx_in * own);
            dxs[n - l] += &(&dx_in * sk);
        } else {
            dxs[l] += &dx_in;
        }
    }

    // embedding stage
    let dx0 = &dxs[0];
    grads.feat_w += &input.features.t().dot(dx0);
    grads.feat_b += &sum_rows(dx0);
    for f in 0..input.z1.len() {
        let mut r1 = grads.embed_z1.row_mut(input.z1[f]);
        r1 += &dx0.row(f);
        let mut r2 = grads.embed_z2.row_mut(input.z2[f]);
        r2 += &dx0.row(f);
    }
    // time embedding broadcast: gradient sums over frames
    let de = sum_rows(dx0);
    grads.time_w2 += &outer(&cache.time.h1, &de);
    grads.time_b2 += &de;
    let dh1 = params.time_w2.dot(&de);
    let mut du1 = dh1;
    du1.zip_mut_with(&cache.time.u1, |d, u| *d *= gelu_grad(*u));
    grads.time_w1 += &outer(&cache.time.s, &du1);
    grads.time_b1 += &du1;
}

// ---------------------------------------------------------------------
// loss + gradients over a batch

/// Masked flow-matching loss (mean over unmasked frame-dimension entries
/// across the whole batch) and exact gradients for every parameter.
pub fn gradients(
    params: &ParameterSet,
    config: &ModelConfig,
    batch: &[TrainItem],
) -> Result<(f64, ParameterSet)> {
    let d = config.d_features;
    let total_unmasked: usize = batch
        .iter()
        .map(|item| item.mask.iter().filter(|m| **m).count())
        .sum();
    if total_unmasked == 0 {
        return Err(Error::AllMasked);
    }
    let denom = (total_unmasked * d) as f64;

    let mut grads = ParameterSet::zeros(config);
    let mut sq_sum = 0.0;
    for item in batch {
        let input = ForwardInput {
            features: &item.features,
            z1: &item.z1,
            z2: &item.z2,
            t: item.t,
        };
        let (out, cache) = forward_cached(params, config, &input)?;
        if out.dim() != item.target.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", out.dim()),
                got: format!("{:?}", item.target.dim()),
            });
        }
        let mut dout = Array2::zeros(out.dim());
        for (f, keep) in item.mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for c in 0..d {
                let diff = out[[f, c]] - item.target[[f, c]];
                sq_sum += diff * diff;
                dout[[f, c]] = 2.0 * diff / denom;
            }
        }
        backward(params, config, &input, &cache, &dout, &mut grads);
    }
    let loss = sq_sum / denom;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            step: None,
        });
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            what: "gradients".into(),
            step: None,
        });
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------
// the flow-field adapter

/// Wraps parameters as a [`VectorField`]: assembles the (prefix + body)
/// input, runs the forward pass, and returns the body slice.
pub struct ModelField<'a> {
    pub params: &'a ParameterSet,
    pub config: &'a ModelConfig,
}

impl VectorField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.config.d_features
    }

    fn eval(&self, w: &FeatureSequence, t: f64, cond: Option<&Conditioning>) -> FeatureSequence {
        let body = w.n_frames();
        let null;
        let c = match cond {
            Some(c) => c,
            None => {
                null = Conditioning::null(body);
                &null
            }
        };
        let prefix_len = c.prefix_len();
        assert_eq!(
            c.total_len(),
            prefix_len + body,
            "conditioning length must cover prefix + body"
        );
        let features = match &c.prefix {
            Some(p) => p.concat(w).expect("dims validated by caller"),
            None => w.clone(),
        };
        let out = forward(
            self.params,
            self.config,
            &ForwardInput {
                features: &features.0,
                z1: &c.z1,
                z2: &c.z2,
                t,
            },
        )
        .expect("shapes validated by caller");
        FeatureSequence(out.slice(s![prefix_len.., ..]).to_owned())
    }
}

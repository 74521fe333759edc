//! Forward and adjoint kernels on raw row-major slices.
//!
//! The graph wraps these; they are public so that encoders can run
//! inference without building a tape.

/// Output length of a valid-padding sliding window.
pub fn window_out_len(len: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || len < window {
        None
    } else {
        Some((len - window) / stride + 1)
    }
}

pub fn conv1d_forward(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let t_out = (t_in - k) / stride + 1;
    let mut y = vec![0.0; c_out * t_out];
    for o in 0..c_out {
        let yo = &mut y[o * t_out..(o + 1) * t_out];
        yo.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..c_in {
            let xc = &x[c * t_in..(c + 1) * t_in];
            let wk = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
            for (t, yv) in yo.iter_mut().enumerate() {
                let xs = &xc[t * stride..t * stride + k];
                let mut acc = 0.0;
                for j in 0..k {
                    acc += wk[j] * xs[j];
                }
                *yv += acc;
            }
        }
    }
    y
}

/// Adjoints of [`conv1d_forward`]. Any of the outputs may be skipped with `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    dy: &[f64],
    x: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let t_out = (t_in - k) / stride + 1;
    if let Some(db) = db {
        for o in 0..c_out {
            db[o] += dy[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
        }
    }
    for o in 0..c_out {
        let dyo = &dy[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let base = (o * c_in + c) * k;
            if let Some(dw) = dw.as_deref_mut() {
                let xc = &x[c * t_in..(c + 1) * t_in];
                let dwk = &mut dw[base..base + k];
                for (t, &g) in dyo.iter().enumerate() {
                    let xs = &xc[t * stride..t * stride + k];
                    for j in 0..k {
                        dwk[j] += g * xs[j];
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wk = &w[base..base + k];
                let dxc = &mut dx[c * t_in..(c + 1) * t_in];
                for (t, &g) in dyo.iter().enumerate() {
                    let dxs = &mut dxc[t * stride..t * stride + k];
                    for j in 0..k {
                        dxs[j] += g * wk[j];
                    }
                }
            }
        }
    }
}

/// Group normalization statistics and output.
///
/// Returns `(y, xhat, rstd)` where `rstd` has one entry per group.
pub fn group_norm_forward(
    x: &[f64],
    c: usize,
    t: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let per = c / groups * t;
    let mut xhat = vec![0.0; c * t];
    let mut rstd = vec![0.0; groups];
    for g in 0..groups {
        let xs = &x[g * per..(g + 1) * per];
        let mean = xs.iter().sum::<f64>() / per as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[g] = r;
        for (h, v) in xhat[g * per..(g + 1) * per].iter_mut().zip(xs) {
            *h = (v - mean) * r;
        }
    }
    let mut y = vec![0.0; c * t];
    for ch in 0..c {
        for i in ch * t..(ch + 1) * t {
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    c: usize,
    t: usize,
    groups: usize,
    gamma: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    if let Some(dg) = dgamma {
        for ch in 0..c {
            let r = ch * t..(ch + 1) * t;
            dg[ch] += dy[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] += dy[ch * t..(ch + 1) * t].iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        let cpg = c / groups;
        let per = cpg * t;
        let mut dxhat = vec![0.0; per];
        for g in 0..groups {
            for (local, i) in (g * per..(g + 1) * per).enumerate() {
                dxhat[local] = dy[i] * gamma[i / t];
            }
            let xh = &xhat[g * per..(g + 1) * per];
            let mean_d = dxhat.iter().sum::<f64>() / per as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per as f64;
            for (local, i) in (g * per..(g + 1) * per).enumerate() {
                dx[i] += rstd[g] * (dxhat[local] - mean_d - xh[local] * mean_dx);
            }
        }
    }
}

/// Returns `(y, argmax)`; `argmax` holds flat input indices, first maximum wins.
pub fn max_pool1d_forward(
    x: &[f64],
    c: usize,
    t_in: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let t_out = (t_in - window) / stride + 1;
    let mut y = Vec::with_capacity(c * t_out);
    let mut arg = Vec::with_capacity(c * t_out);
    for ch in 0..c {
        for t in 0..t_out {
            let start = ch * t_in + t * stride;
            let mut best = start;
            for i in start + 1..start + window {
                if x[i] > x[best] {
                    best = i;
                }
            }
            y.push(x[best]);
            arg.push(best);
        }
    }
    (y, arg)
}

/// Per-step activations kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h_{t-1} + b_hn`, needed for the reset-gate adjoint.
    pub hn: Vec<f64>,
    /// Hidden states `h_0 .. h_T`, `(T+1) × H`.
    pub h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine `out = W v + b` for a `rows × cols` matrix.
fn matvec(w: &[f64], b: &[f64], v: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        let wr = &w[i * cols..(i + 1) * cols];
        let mut acc = b[i];
        for j in 0..cols {
            acc += wr[j] * v[j];
        }
        out[i] = acc;
    }
}

/// GRU recurrence with gate order (reset, update, new):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// `seq` is `[D × T]` (one column per step); returns outputs `[H × T]`.
#[allow(clippy::too_many_arguments)]
pub fn gru_forward(
    seq: &[f64],
    d: usize,
    t_len: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b_ih: &[f64],
    b_hh: &[f64],
    h0: &[f64],
    hidden: usize,
) -> (Vec<f64>, GruCache) {
    let h3 = 3 * hidden;
    let mut cache = GruCache {
        r: Vec::with_capacity(t_len * hidden),
        z: Vec::with_capacity(t_len * hidden),
        n: Vec::with_capacity(t_len * hidden),
        hn: Vec::with_capacity(t_len * hidden),
        h: Vec::with_capacity((t_len + 1) * hidden),
    };
    cache.h.extend_from_slice(h0);
    let mut x_t = vec![0.0; d];
    let mut gx = vec![0.0; h3];
    let mut gh = vec![0.0; h3];
    for t in 0..t_len {
        for (i, v) in x_t.iter_mut().enumerate() {
            *v = seq[i * t_len + t];
        }
        let h_prev = cache.h[t * hidden..(t + 1) * hidden].to_vec();
        matvec(w_ih, b_ih, &x_t, h3, d, &mut gx);
        matvec(w_hh, b_hh, &h_prev, h3, hidden, &mut gh);
        for j in 0..hidden {
            let r = sigmoid(gx[j] + gh[j]);
            let z = sigmoid(gx[hidden + j] + gh[hidden + j]);
            let hn = gh[2 * hidden + j];
            let n = (gx[2 * hidden + j] + r * hn).tanh();
            cache.r.push(r);
            cache.z.push(z);
            cache.n.push(n);
            cache.hn.push(hn);
            cache.h.push((1.0 - z) * n + z * h_prev[j]);
        }
    }
    let mut out = vec![0.0; hidden * t_len];
    for t in 0..t_len {
        for j in 0..hidden {
            out[j * t_len + t] = cache.h[(t + 1) * hidden + j];
        }
    }
    (out, cache)
}

/// Gradient buffers for [`gru_backward`]; `None` entries are not computed.
pub struct GruGrads<'a> {
    pub seq: Option<&'a mut [f64]>,
    pub w_ih: Option<&'a mut [f64]>,
    pub w_hh: Option<&'a mut [f64]>,
    pub b_ih: Option<&'a mut [f64]>,
    pub b_hh: Option<&'a mut [f64]>,
    pub h0: Option<&'a mut [f64]>,
}

/// Backpropagation through time for [`gru_forward`]. `dout` is `[H × T]`.
#[allow(clippy::too_many_arguments)]
pub fn gru_backward(
    dout: &[f64],
    seq: &[f64],
    d: usize,
    t_len: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    hidden: usize,
    cache: &GruCache,
    mut g: GruGrads<'_>,
) {
    let h3 = 3 * hidden;
    let mut dh_next = vec![0.0; hidden];
    let mut ga_x = vec![0.0; h3];
    let mut ga_h = vec![0.0; h3];
    for t in (0..t_len).rev() {
        let h_prev = &cache.h[t * hidden..(t + 1) * hidden];
        let off = t * hidden;
        let mut dh_prev = vec![0.0; hidden];
        for j in 0..hidden {
            let dh = dout[j * t_len + t] + dh_next[j];
            let (r, z, n, hn) = (
                cache.r[off + j],
                cache.z[off + j],
                cache.n[off + j],
                cache.hn[off + j],
            );
            let dn = dh * (1.0 - z);
            let dz = dh * (h_prev[j] - n);
            dh_prev[j] = dh * z;
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * hn;
            let da_r = dr * r * (1.0 - r);
            let da_z = dz * z * (1.0 - z);
            ga_x[j] = da_r;
            ga_x[hidden + j] = da_z;
            ga_x[2 * hidden + j] = da_n;
            ga_h[j] = da_r;
            ga_h[hidden + j] = da_z;
            ga_h[2 * hidden + j] = da_n * r;
        }
        if let Some(dw) = g.w_ih.as_deref_mut() {
            for i in 0..h3 {
                let gi = ga_x[i];
                if gi == 0.0 {
                    continue;
                }
                let row = &mut dw[i * d..(i + 1) * d];
                for k in 0..d {
                    row[k] += gi * seq[k * t_len + t];
                }
            }
        }
        if let Some(db) = g.b_ih.as_deref_mut() {
            for i in 0..h3 {
                db[i] += ga_x[i];
            }
        }
        if let Some(dw) = g.w_hh.as_deref_mut() {
            for i in 0..h3 {
                let gi = ga_h[i];
                if gi == 0.0 {
                    continue;
                }
                let row = &mut dw[i * hidden..(i + 1) * hidden];
                for k in 0..hidden {
                    row[k] += gi * h_prev[k];
                }
            }
        }
        if let Some(db) = g.b_hh.as_deref_mut() {
            for i in 0..h3 {
                db[i] += ga_h[i];
            }
        }
        if let Some(dx) = g.seq.as_deref_mut() {
            for i in 0..h3 {
                let gi = ga_x[i];
                let row = &w_ih[i * d..(i + 1) * d];
                for k in 0..d {
                    dx[k * t_len + t] += gi * row[k];
                }
            }
        }
        for i in 0..h3 {
            let gi = ga_h[i];
            let row = &w_hh[i * hidden..(i + 1) * hidden];
            for k in 0..hidden {
                dh_prev[k] += gi * row[k];
            }
        }
        dh_next = dh_prev;
    }
    if let Some(dh0) = g.h0 {
        for j in 0..hidden {
            dh0[j] += dh_next[j];
        }
    }
}

/// `y = x W + b` with `x: [n × d]`, `W: [d × e]`.
pub fn linear_forward(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64], e: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * e);
    for i in 0..n {
        y.extend_from_slice(b);
        let yr = &mut y[i * e..(i + 1) * e];
        for k in 0..d {
            let xv = x[i * d + k];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * e..(k + 1) * e];
            for j in 0..e {
                yr[j] += xv * wr[j];
            }
        }
    }
    y
}

/// Row-wise Euclidean norms.
pub fn row_norms(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..n)
        .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// InfoNCE value and the row-softmax matrix `P` (`n × n`).
///
/// `L = (1/n) Σ_i [ logsumexp_j(a_i·t_j / τ) − a_i·t_i / τ ]`, with the row
/// maximum subtracted before exponentiation.
pub fn info_nce_forward(a: &[f64], t: &[f64], n: usize, d: usize, tau: f64) -> (f64, Vec<f64>) {
    let mut p = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        let row = &mut p[i * n..(i + 1) * n];
        for j in 0..n {
            let tj = &t[j * d..(j + 1) * d];
            row[j] = ai.iter().zip(tj).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[i];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    (loss / n as f64, p)
}

/// Mean softmax cross-entropy over rows of `logits: [n × k]`; returns the
/// value and the probability matrix.
pub fn softmax_ce_forward(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let mut p = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[labels[i]];
        for j in 0..k {
            p[i * k + j] = (row[j] - lse).exp();
        }
    }
    (loss / n as f64, p)
}

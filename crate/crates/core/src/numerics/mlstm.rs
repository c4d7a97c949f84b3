//! Sequential mLSTM recurrence used by [`Graph::mlstm`](super::Graph::mlstm).
//!
//! Per head, with `f = log_sigmoid(fg)` and stabiliser `m`:
//!
//! ```text
//! m_t = max(f_t + m_{t-1}, ig_t)
//! C_t = e^{f_t + m_{t-1} - m_t} C_{t-1} + e^{ig_t - m_t} v_t k_t^T
//! n_t = e^{f_t + m_{t-1} - m_t} n_{t-1} + e^{ig_t - m_t} k_t
//! h_t = C_t q_t / max(|n_t . q_t|, e^{-m_t})
//! ```
//!
//! The output does not depend on the stabiliser values, so the backward pass
//! treats `m` as a constant.

use super::graph::log_sigmoid;

/// Recurrent state carried between calls (one entry per head).
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmState {
    pub heads: usize,
    pub qk_dim: usize,
    pub v_dim: usize,
    /// `heads x v_dim x qk_dim`, row-major.
    pub c: Vec<f64>,
    /// `heads x qk_dim`.
    pub n: Vec<f64>,
    /// Stabiliser per head; `-inf` before the first step.
    pub m: Vec<f64>,
}

impl MlstmState {
    pub fn empty(heads: usize, qk_dim: usize, v_dim: usize) -> Self {
        Self {
            heads,
            qk_dim,
            v_dim,
            c: vec![0.0; heads * v_dim * qk_dim],
            n: vec![0.0; heads * qk_dim],
            m: vec![f64::NEG_INFINITY; heads],
        }
    }
}

pub(crate) struct MlstmSaved {
    heads: usize,
    dk: usize,
    dv: usize,
    t_len: usize,
    init: MlstmState,
    c_hist: Vec<f64>,
    n_hist: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    m: Vec<f64>,
    s: Vec<f64>,
    den: Vec<f64>,
}

pub(crate) struct MlstmGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dig: Vec<f64>,
    pub dfg: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ig: &[f64],
    fg: &[f64],
    t_len: usize,
    init: MlstmState,
    keep: bool,
) -> (Vec<f64>, MlstmState, MlstmSaved) {
    let (heads, dk, dv) = (init.heads, init.qk_dim, init.v_dim);
    let mut state = init.clone();
    let mut h_out = vec![0.0; t_len * heads * dv];
    let hist = if keep { t_len * heads } else { 0 };
    let mut saved = MlstmSaved {
        heads,
        dk,
        dv,
        t_len,
        init,
        c_hist: Vec::with_capacity(hist * dv * dk),
        n_hist: Vec::with_capacity(hist * dk),
        a: Vec::with_capacity(hist),
        b: Vec::with_capacity(hist),
        m: Vec::with_capacity(hist),
        s: Vec::with_capacity(hist),
        den: Vec::with_capacity(hist),
    };
    for t in 0..t_len {
        for h in 0..heads {
            let qt = &q[(t * heads + h) * dk..][..dk];
            let kt = &k[(t * heads + h) * dk..][..dk];
            let vt = &v[(t * heads + h) * dv..][..dv];
            let i_pre = ig[t * heads + h];
            let lf = log_sigmoid(fg[t * heads + h]);
            let m_prev = state.m[h];
            let (m, a) = if m_prev == f64::NEG_INFINITY {
                (i_pre, 0.0)
            } else {
                let m = (lf + m_prev).max(i_pre);
                (m, (lf + m_prev - m).exp())
            };
            let b = (i_pre - m).exp();
            let c = &mut state.c[h * dv * dk..][..dv * dk];
            let n = &mut state.n[h * dk..][..dk];
            for (row, &va) in c.chunks_mut(dk).zip(vt) {
                let bv = b * va;
                for (cell, &kb) in row.iter_mut().zip(kt) {
                    *cell = a * *cell + bv * kb;
                }
            }
            for (nb, &kb) in n.iter_mut().zip(kt) {
                *nb = a * *nb + b * kb;
            }
            let s: f64 = n.iter().zip(qt).map(|(x, y)| x * y).sum();
            let den = s.abs().max((-m).exp());
            let out = &mut h_out[(t * heads + h) * dv..][..dv];
            for (o, row) in out.iter_mut().zip(c.chunks(dk)) {
                *o = row.iter().zip(qt).map(|(x, y)| x * y).sum::<f64>() / den;
            }
            state.m[h] = m;
            if keep {
                saved.c_hist.extend_from_slice(c);
                saved.n_hist.extend_from_slice(n);
                saved.a.push(a);
                saved.b.push(b);
                saved.m.push(m);
                saved.s.push(s);
                saved.den.push(den);
            }
        }
    }
    (h_out, state, saved)
}

pub(crate) fn backward(
    saved: &MlstmSaved,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    fg: &[f64],
    h_out: &[f64],
    dh: &[f64],
) -> MlstmGrads {
    let MlstmSaved {
        heads,
        dk,
        dv,
        t_len,
        ..
    } = *saved;
    let mut g = MlstmGrads {
        dq: vec![0.0; q.len()],
        dk: vec![0.0; k.len()],
        dv: vec![0.0; v.len()],
        dig: vec![0.0; t_len * heads],
        dfg: vec![0.0; t_len * heads],
    };
    let cs = dv * dk;
    for h in 0..heads {
        let mut dc_carry = vec![0.0; cs];
        let mut dn_carry = vec![0.0; dk];
        let mut dnum = vec![0.0; dv];
        for t in (0..t_len).rev() {
            let idx = t * heads + h;
            let qt = &q[idx * dk..][..dk];
            let kt = &k[idx * dk..][..dk];
            let vt = &v[idx * dv..][..dv];
            let ht = &h_out[idx * dv..][..dv];
            let dht = &dh[idx * dv..][..dv];
            let c_t = &saved.c_hist[idx * cs..][..cs];
            let n_t = &saved.n_hist[idx * dk..][..dk];
            let (c_prev, n_prev) = if t == 0 {
                (&saved.init.c[h * cs..][..cs], &saved.init.n[h * dk..][..dk])
            } else {
                let p = (t - 1) * heads + h;
                (&saved.c_hist[p * cs..][..cs], &saved.n_hist[p * dk..][..dk])
            };
            let (a, b, m, s, den) = (
                saved.a[idx],
                saved.b[idx],
                saved.m[idx],
                saved.s[idx],
                saved.den[idx],
            );

            for (dn, &d) in dnum.iter_mut().zip(dht) {
                *dn = d / den;
            }
            let dden = -dht.iter().zip(ht).map(|(x, y)| x * y).sum::<f64>() / den;
            let ds = if s.abs() > (-m).exp() {
                dden * s.signum()
            } else {
                0.0
            };

            // dC_t = carry + dnum q^T ; dn_t = carry + ds q
            for (row, &dn) in dc_carry.chunks_mut(dk).zip(&dnum) {
                for (cell, &qb) in row.iter_mut().zip(qt) {
                    *cell += dn * qb;
                }
            }
            for (x, &qb) in dn_carry.iter_mut().zip(qt) {
                *x += ds * qb;
            }
            let dct = &dc_carry;
            let dnt = &dn_carry;

            let dq = &mut g.dq[idx * dk..][..dk];
            for (row, &dn) in c_t.chunks(dk).zip(&dnum) {
                for (o, &cab) in dq.iter_mut().zip(row) {
                    *o += cab * dn;
                }
            }
            for (o, &nb) in dq.iter_mut().zip(n_t) {
                *o += ds * nb;
            }

            let mut da = 0.0;
            let mut db = 0.0;
            let dvo = &mut g.dv[idx * dv..][..dv];
            let dko = &mut g.dk[idx * dk..][..dk];
            for (ai, (row, prow)) in dct.chunks(dk).zip(c_prev.chunks(dk)).enumerate() {
                let mut row_k = 0.0;
                for bi in 0..dk {
                    row_k += row[bi] * kt[bi];
                    da += row[bi] * prow[bi];
                    dko[bi] += b * row[bi] * vt[ai];
                }
                dvo[ai] += b * row_k;
                db += vt[ai] * row_k;
            }
            for bi in 0..dk {
                da += dnt[bi] * n_prev[bi];
                db += dnt[bi] * kt[bi];
                dko[bi] += b * dnt[bi];
            }
            g.dig[idx] = db * b;
            let dlf = da * a;
            let f = fg[idx];
            g.dfg[idx] = dlf * (1.0 - 1.0 / (1.0 + (-f).exp()));

            dc_carry.iter_mut().for_each(|x| *x *= a);
            dn_carry.iter_mut().for_each(|x| *x *= a);
        }
    }
    g
}

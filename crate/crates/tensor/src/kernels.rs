//! Raw slice kernels shared by the forward and backward passes.

use std::ops::Range;

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `da[m,k] += dc[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_grad_lhs<S: Scalar>(
    dc: &[S],
    b: &[S],
    da: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + p] += acc;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · dc[m,n]`
pub(crate) fn matmul_grad_rhs<S: Scalar>(
    a: &[S],
    dc: &[S],
    db: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &x) in dbrow.iter_mut().zip(drow) {
                *dv += aip * x;
            }
        }
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyIndex {
    /// Every query sees every key.
    Dense,
    /// Query `i` sees the contiguous keys `ranges[i]`.
    Ranges(Vec<Range<usize>>),
    /// Query `i` sees the listed keys, in order.
    Lists(Vec<Vec<u32>>),
}

impl KeyIndex {
    pub(crate) fn check(&self, queries: usize, keys: usize) -> Result<(), String> {
        match self {
            KeyIndex::Dense => Ok(()),
            KeyIndex::Ranges(r) => {
                if r.len() != queries {
                    return Err(format!("{} key ranges for {} queries", r.len(), queries));
                }
                match r.iter().find(|r| r.end > keys || r.start > r.end) {
                    Some(bad) => Err(format!("key range {bad:?} outside 0..{keys}")),
                    None => Ok(()),
                }
            }
            KeyIndex::Lists(l) => {
                if l.len() != queries {
                    return Err(format!("{} key lists for {} queries", l.len(), queries));
                }
                match l.iter().flatten().find(|&&j| j as usize >= keys) {
                    Some(bad) => Err(format!("key index {bad} outside 0..{keys}")),
                    None => Ok(()),
                }
            }
        }
    }

    pub(crate) fn fill(&self, query: usize, keys: usize, out: &mut Vec<usize>) {
        out.clear();
        match self {
            KeyIndex::Dense => out.extend(0..keys),
            KeyIndex::Ranges(r) => out.extend(r[query].clone()),
            KeyIndex::Lists(l) => out.extend(l[query].iter().map(|&j| j as usize)),
        }
    }

    /// Number of score entries per head over all queries.
    pub fn score_count(&self, queries: usize, keys: usize) -> usize {
        match self {
            KeyIndex::Dense => queries * keys,
            KeyIndex::Ranges(r) => r.iter().map(|r| r.len()).sum(),
            KeyIndex::Lists(l) => l.iter().map(|l| l.len()).sum(),
        }
    }
}

pub(crate) struct AttentionDims {
    pub queries: usize,
    pub keys: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention. Returns the output rows and the
/// softmax probabilities laid out per query as `[head][key]`, with
/// `offsets[i]` the start of query `i`'s block.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    dims: &AttentionDims,
    index: &KeyIndex,
) -> (Vec<S>, Vec<S>, Vec<usize>) {
    let AttentionDims {
        queries,
        keys,
        dim,
        heads,
    } = *dims;
    let dh = dim / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::zero(); queries * dim];
    let mut offsets = Vec::with_capacity(queries + 1);
    let mut probs = Vec::with_capacity(heads * index.score_count(queries, keys));
    let mut ks = Vec::new();
    for i in 0..queries {
        index.fill(i, keys, &mut ks);
        offsets.push(probs.len());
        for h in 0..heads {
            let qh = &q[i * dim + h * dh..i * dim + (h + 1) * dh];
            let start = probs.len();
            let mut max = S::neg_infinity();
            for &j in &ks {
                let kh = &k[j * dim + h * dh..j * dim + (h + 1) * dh];
                let mut s = S::zero();
                for (&a, &b) in qh.iter().zip(kh) {
                    s += a * b;
                }
                let s = s * scale;
                if s > max {
                    max = s;
                }
                probs.push(s);
            }
            let mut sum = S::zero();
            for p in &mut probs[start..] {
                *p = (*p - max).exp();
                sum += *p;
            }
            let orow = &mut out[i * dim + h * dh..i * dim + (h + 1) * dh];
            for (p, &j) in probs[start..].iter_mut().zip(&ks) {
                *p /= sum;
                let vh = &v[j * dim + h * dh..j * dim + (h + 1) * dh];
                for (o, &x) in orow.iter_mut().zip(vh) {
                    *o += *p * x;
                }
            }
        }
    }
    offsets.push(probs.len());
    (out, probs, offsets)
}

pub(crate) struct AttentionGrads<S> {
    pub dq: Option<Vec<S>>,
    pub dk: Option<Vec<S>>,
    pub dv: Option<Vec<S>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    dims: &AttentionDims,
    index: &KeyIndex,
    dout: &[S],
    want: [bool; 3],
) -> AttentionGrads<S> {
    let AttentionDims {
        queries,
        keys,
        dim,
        heads,
    } = *dims;
    let dh = dim / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = want[0].then(|| vec![S::zero(); q.len()]);
    let mut dk = want[1].then(|| vec![S::zero(); k.len()]);
    let mut dv = want[2].then(|| vec![S::zero(); v.len()]);
    let mut ks = Vec::new();
    let mut ds = Vec::new();
    let mut cursor = 0;
    for i in 0..queries {
        index.fill(i, keys, &mut ks);
        for h in 0..heads {
            let p = &probs[cursor..cursor + ks.len()];
            cursor += ks.len();
            let go = &dout[i * dim + h * dh..i * dim + (h + 1) * dh];
            ds.clear();
            let mut weighted = S::zero();
            for (&pj, &j) in p.iter().zip(&ks) {
                let vh = &v[j * dim + h * dh..j * dim + (h + 1) * dh];
                let mut dp = S::zero();
                for (&a, &b) in go.iter().zip(vh) {
                    dp += a * b;
                }
                weighted += pj * dp;
                ds.push(dp);
                if let Some(dv) = dv.as_mut() {
                    let dvh = &mut dv[j * dim + h * dh..j * dim + (h + 1) * dh];
                    for (d, &g) in dvh.iter_mut().zip(go) {
                        *d += pj * g;
                    }
                }
            }
            for (s, &pj) in ds.iter_mut().zip(p) {
                *s = pj * (*s - weighted) * scale;
            }
            let qh = &q[i * dim + h * dh..i * dim + (h + 1) * dh];
            if let Some(dq) = dq.as_mut() {
                let dqh = &mut dq[i * dim + h * dh..i * dim + (h + 1) * dh];
                for (&s, &j) in ds.iter().zip(&ks) {
                    let kh = &k[j * dim + h * dh..j * dim + (h + 1) * dh];
                    for (d, &x) in dqh.iter_mut().zip(kh) {
                        *d += s * x;
                    }
                }
            }
            if let Some(dk) = dk.as_mut() {
                for (&s, &j) in ds.iter().zip(&ks) {
                    let dkh = &mut dk[j * dim + h * dh..j * dim + (h + 1) * dh];
                    for (d, &x) in dkh.iter_mut().zip(qh) {
                        *d += s * x;
                    }
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}

use super::{Real, Result, TensorError};

/// Sparse query-to-key visibility in compressed-row form.
///
/// Row `q` lists the key indices query `q` may attend to, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visibility {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
}

impl Visibility {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for (q, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&k) = row.last() {
                if k >= n {
                    return Err(TensorError::Invalid {
                        op: "visibility",
                        msg: format!("row {q} references key {k} outside {n} positions"),
                    });
                }
            }
            cols.extend(row.into_iter().map(|k| k as u32));
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols })
    }

    pub fn from_dense(mask: &[Vec<bool>]) -> Result<Self> {
        let n = mask.len();
        if let Some(bad) = mask.iter().position(|r| r.len() != n) {
            return Err(TensorError::Invalid {
                op: "visibility",
                msg: format!("mask row {bad} has {} entries, expected {n}", mask[bad].len()),
            });
        }
        Self::from_rows(
            mask.iter()
                .map(|r| r.iter().enumerate().filter(|(_, &v)| v).map(|(k, _)| k).collect())
                .collect(),
        )
    }

    /// Standard lower-triangular visibility.
    pub fn causal(n: usize) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::with_capacity(n * (n + 1) / 2);
        for q in 0..n {
            cols.extend(0..=q as u32);
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.cols[self.row_ptr[q]..self.row_ptr[q + 1]]
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.row(q).binary_search(&(k as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|q| {
                let mut r = vec![false; self.n];
                for &k in self.row(q) {
                    r[k as usize] = true;
                }
                r
            })
            .collect()
    }

    pub(crate) fn offset(&self, q: usize) -> usize {
        self.row_ptr[q]
    }
}

/// Multi-head attention over a packed `[p, 3d]` projection, restricted to
/// visible keys. Returns the `[p, d]` output and per-head probabilities laid
/// out as `heads x nnz`.
pub(crate) fn attention_forward<T: Real>(
    qkv: &[T],
    p: usize,
    d: usize,
    heads: usize,
    vis: &Visibility,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let nnz = vis.nnz();
    let mut out = vec![T::zero(); p * d];
    let mut probs = vec![T::zero(); heads * nnz];
    let stride = 3 * d;
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for q in 0..p {
            let keys = vis.row(q);
            if keys.is_empty() {
                continue;
            }
            let base = h * nnz + vis.offset(q);
            let pr = &mut probs[base..base + keys.len()];
            let qrow = &qkv[q * stride + qo..q * stride + qo + dh];
            let mut max = T::neg_infinity();
            for (s, &k) in pr.iter_mut().zip(keys) {
                let krow = &qkv[k as usize * stride + ko..k as usize * stride + ko + dh];
                let dot = qrow.iter().zip(krow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut sum = T::zero();
            for s in pr.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let o = &mut out[q * d + qo..q * d + qo + dh];
            for (s, &k) in pr.iter_mut().zip(keys) {
                *s = *s / sum;
                let vrow = &qkv[k as usize * stride + vo..k as usize * stride + vo + dh];
                for (oi, &vi) in o.iter_mut().zip(vrow) {
                    *oi += *s * vi;
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    grad_out: &[T],
    p: usize,
    d: usize,
    heads: usize,
    vis: &Visibility,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let nnz = vis.nnz();
    let stride = 3 * d;
    let mut g = vec![T::zero(); p * stride];
    let mut dp = Vec::new();
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for q in 0..p {
            let keys = vis.row(q);
            if keys.is_empty() {
                continue;
            }
            let base = h * nnz + vis.offset(q);
            let pr = &probs[base..base + keys.len()];
            let go = &grad_out[q * d + qo..q * d + qo + dh];
            dp.clear();
            let mut weighted = T::zero();
            for (&pk, &k) in pr.iter().zip(keys) {
                let k = k as usize;
                let vrow = &qkv[k * stride + vo..k * stride + vo + dh];
                let v = go.iter().zip(vrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                dp.push(v);
                weighted += pk * v;
                let gv = &mut g[k * stride + vo..k * stride + vo + dh];
                for (gi, &goi) in gv.iter_mut().zip(go) {
                    *gi += pk * goi;
                }
            }
            for ((&pk, &dpk), &k) in pr.iter().zip(&dp).zip(keys) {
                let k = k as usize;
                let ds = pk * (dpk - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for i in 0..dh {
                    let kq = qkv[k * stride + ko + i];
                    let qq = qkv[q * stride + qo + i];
                    g[q * stride + qo + i] += ds * kq;
                    g[k * stride + ko + i] += ds * qq;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip() {
        let mask = vec![
            vec![true, false, false],
            vec![true, true, false],
            vec![false, true, true],
        ];
        let v = Visibility::from_dense(&mask).unwrap();
        assert_eq!(v.to_dense(), mask);
        assert_eq!(v.nnz(), 5);
        assert!(v.is_visible(2, 1));
        assert!(!v.is_visible(2, 0));
    }

    #[test]
    fn causal_matches_lower_triangle() {
        let v = Visibility::causal(4);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(v.is_visible(q, k), k <= q);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_keys() {
        assert!(Visibility::from_rows(vec![vec![0], vec![5]]).is_err());
    }
}

//! Numeric kernels shared by the reference model and the emulated ranks.
//! Every kernel rounds its result to the policy's storage format; matmul
//! operands are first rounded to the policy's matmul input format.

use crate::tensor::{PrecisionPolicy, Tensor};

pub const LN_EPS: f64 = 1e-5;

fn mm(a: &Tensor, b: &Tensor, p: PrecisionPolicy) -> Tensor {
    let r = p.matmul_operand(a).matmul(&p.matmul_operand(b)).expect("matmul shapes");
    p.store(r)
}

/// `y = x·w`.
pub fn linear(x: &Tensor, w: &Tensor, p: PrecisionPolicy) -> Tensor {
    mm(x, w, p)
}

/// Returns `(dx, dw)` for `y = x·w`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, p: PrecisionPolicy) -> (Tensor, Tensor) {
    (mm(dy, &w.transpose(), p), mm(&x.transpose(), dy, p))
}

pub fn add(a: &Tensor, b: &Tensor, p: PrecisionPolicy) -> Tensor {
    p.store(a.add(b).expect("add shapes"))
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, p: PrecisionPolicy) -> (Tensor, NormCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut y = Tensor::zeros(&[n, d]);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat.row_mut(i)[j] = h;
            y.row_mut(i)[j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    (p.store(y), NormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`; parameter gradients cover only the rows
/// present in `dy`.
pub fn layer_norm_backward(dy: &Tensor, cache: &NormCache, gamma: &Tensor, p: PrecisionPolicy) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    for i in 0..n {
        let (g, h) = (dy.row(i), cache.xhat.row(i));
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            dg[j] += g[j] * h[j];
            db[j] += g[j];
            let dh = g[j] * gamma.data()[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = g[j] * gamma.data()[j];
            dx.row_mut(i)[j] = cache.rstd[i] * (dh - mean_dh - h[j] * mean_dh_h);
        }
    }
    (p.store(dx), p.store(Tensor::vector(dg)), p.store(Tensor::vector(db)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: &Tensor, p: PrecisionPolicy) -> Tensor {
    p.store(x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor, p: PrecisionPolicy) -> Tensor {
    let d = x.map(|v| {
        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
    });
    p.store(dy.zip_map(&d, |a, b| a * b).expect("gelu shapes"))
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
}

fn head(t: &Tensor, h: usize, dh: usize) -> Tensor {
    t.cols_range(h * dh, (h + 1) * dh)
}

/// Causal scaled dot-product attention over `heads` heads packed along the
/// columns. `q_pos`/`k_pos` give the global sequence position of each row;
/// a key is visible when its position does not exceed the query's.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_pos: &[usize],
    k_pos: &[usize],
    heads: usize,
    p: PrecisionPolicy,
) -> (Tensor, AttnCache) {
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head(q, h, dh), head(k, h, dh), head(v, h, dh));
        let s = p.store(mm(&qh, &kh.transpose(), p).scale(scale));
        let mut pr = Tensor::zeros(s.shape());
        for i in 0..s.rows() {
            let row = s.row(i);
            let visible = |j: usize| k_pos[j] <= q_pos[i];
            let max = (0..row.len()).filter(|&j| visible(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..row.len() {
                let e = if visible(j) { (row[j] - max).exp() } else { 0.0 };
                pr.row_mut(i)[j] = e;
                sum += e;
            }
            for x in pr.row_mut(i) {
                *x /= sum;
            }
        }
        let pr = p.store(pr);
        outs.push(mm(&pr, &vh, p));
        probs.push(pr);
    }
    let out = Tensor::concat_cols(&outs).expect("head outputs");
    (out, AttnCache { q: q.clone(), k: k.clone(), v: v.clone(), probs })
}

/// Returns `(dq, dk, dv)`; `dk`/`dv` hold contributions from the local
/// queries only.
pub fn attention_backward(dout: &Tensor, cache: &AttnCache, heads: usize, p: PrecisionPolicy) -> (Tensor, Tensor, Tensor) {
    let dh = cache.q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dqs, mut dks, mut dvs) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..heads {
        let (qh, kh, vh) = (head(&cache.q, h, dh), head(&cache.k, h, dh), head(&cache.v, h, dh));
        let doh = head(dout, h, dh);
        let pr = &cache.probs[h];
        dvs.push(mm(&pr.transpose(), &doh, p));
        let dp = mm(&doh, &vh.transpose(), p);
        let mut ds = Tensor::zeros(pr.shape());
        for i in 0..pr.rows() {
            let (pi, di) = (pr.row(i), dp.row(i));
            let dot: f64 = pi.iter().zip(di).map(|(a, b)| a * b).sum();
            for j in 0..pi.len() {
                ds.row_mut(i)[j] = pi[j] * (di[j] - dot) * scale;
            }
        }
        let ds = p.store(ds);
        dqs.push(mm(&ds, &kh, p));
        dks.push(mm(&ds.transpose(), &qh, p));
    }
    let cat = |v: Vec<Tensor>| Tensor::concat_cols(&v).expect("head grads");
    (cat(dqs), cat(dks), cat(dvs))
}

/// Rows of `table` for `ids`, where the table holds vocabulary rows
/// `[offset, offset + rows)`; ids outside that range give zero rows.
pub fn embedding_lookup(table: &Tensor, ids: &[usize], offset: usize) -> Tensor {
    let d = table.cols();
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if (offset..offset + table.rows()).contains(&id) {
            out.row_mut(i).copy_from_slice(table.row(id - offset));
        }
    }
    out
}

pub fn embedding_backward(dy: &Tensor, ids: &[usize], offset: usize, rows: usize, p: PrecisionPolicy) -> Tensor {
    let mut g = Tensor::zeros(&[rows, dy.cols()]);
    for (i, &id) in ids.iter().enumerate() {
        if (offset..offset + rows).contains(&id) {
            let src = dy.row(i).to_vec();
            for (a, b) in g.row_mut(id - offset).iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    p.store(g)
}

/// Summed token loss and `d(mean loss)/d logits` with `denom` tokens in the
/// mean.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], denom: usize, p: PrecisionPolicy) -> (f64, Tensor) {
    let mut loss = 0.0;
    let mut g = Tensor::zeros(logits.shape());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[y];
        for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
            let soft = (row[j] - max).exp() / sum;
            *gj = (soft - if j == y { 1.0 } else { 0.0 }) / denom as f64;
        }
    }
    (loss, p.store(g))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXACT: PrecisionPolicy = PrecisionPolicy::Exact;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_small() {
        let x = t(&[vec![1.0, 2.0]]);
        let w = t(&[vec![1.0, 0.0, 2.0], vec![0.5, 1.0, -1.0]]);
        assert_eq!(linear(&x, &w, EXACT).data(), &[2.0, 2.0, 0.0]);
        let (dx, dw) = linear_backward(&x, &w, &t(&[vec![1.0, 1.0, 1.0]]), EXACT);
        assert_eq!(dx.data(), &[3.0, 0.5]);
        assert_eq!(dw.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = t(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let (y, _) = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), EXACT);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&Tensor::vector(vec![0.0, 1.0, -1.0]), EXACT);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_191_990_607_975_5).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_808_009_392_024_5).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_first_row_copies_first_value() {
        let q = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = t(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let (out, _) = attention(&q, &q, &v, &[0, 1], &[0, 1], 1, EXACT);
        assert_eq!(out.row(0), &[3.0, 4.0]);
        // Reversing the key order together with its positions changes nothing.
        let (k2, v2) = (q.select_rows(&[1, 0]), v.select_rows(&[1, 0]));
        let (out2, _) = attention(&q, &k2, &v2, &[0, 1], &[1, 0], 1, EXACT);
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (loss, g) = cross_entropy(&Tensor::zeros(&[2, 4]), &[1, 3], 2, EXACT);
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(g.row(0), &[0.125, -0.375, 0.125, 0.125]);
    }

    #[test]
    fn embedding_shard_round_trip() {
        let table = t(&[vec![1.0], vec![2.0]]);
        let out = embedding_lookup(&table, &[3, 2, 0, 2], 2);
        assert_eq!(out.data(), &[2.0, 1.0, 0.0, 1.0]);
        let g = embedding_backward(&Tensor::filled(&[4, 1], 1.0), &[3, 2, 0, 2], 2, 2, EXACT);
        assert_eq!(g.data(), &[2.0, 1.0]);
    }
}

//! Differentiable operations recorded on a [`Graph`].

use std::rc::Rc;

use super::gemm::{gemm, MatMut, MatRef};
use super::{Graph, Tensor, Var};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
    (y, dy)
}

/// Key/query masking for [`Graph::attention`].
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// `[nk]`: key `j` visible to every query when true.
    Keys(Rc<Vec<bool>>),
    /// `[nq * nk]` row-major: query `i` may attend key `j` when true.
    Full(Rc<Vec<bool>>),
}

impl AttnMask {
    fn allowed(&self, i: usize, j: usize, nk: usize) -> bool {
        match self {
            AttnMask::Keys(m) => m[j],
            AttnMask::Full(m) => m[i * nk + j],
        }
    }
}

impl Graph<'_> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = Tensor::new(
            va.shape(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.custom(&[a, b], out, move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.clone());
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = Tensor::new(
            va.shape(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.custom(&[a, b], out, move |g, s| {
            s.add(a, g.clone());
            let mut n = g.clone();
            n.scale_in_place(-1.0);
            s.add(b, n);
        })
    }

    /// Sum of several same-shape variables.
    pub fn add_n(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]);
        let mut acc = (*first).clone();
        for x in &xs[1..] {
            acc.add_assign(&self.value(*x));
        }
        let parents = xs.to_vec();
        self.custom(xs, acc, move |g, s| {
            for p in &parents {
                s.add(*p, g.clone());
            }
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = Tensor::new(
            va.shape(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.custom(&[a, b], out, move |g, s| {
            if s.wants(a) {
                s.add(
                    a,
                    Tensor::new(
                        g.shape(),
                        g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                    ),
                );
            }
            if s.wants(b) {
                s.add(
                    b,
                    Tensor::new(
                        g.shape(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    ),
                );
            }
        })
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|x| x * k).collect());
        self.custom(&[a], out, move |g, s| {
            let mut t = g.clone();
            t.scale_in_place(k);
            s.add(a, t);
        })
    }

    /// `a [n, d] + b [d]` broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.cols();
        assert_eq!(vb.len(), d, "add_row: width mismatch");
        let mut out = (*va).clone();
        for r in out.data_mut().chunks_mut(d) {
            for (x, y) in r.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let bshape = vb.shape().to_vec();
        self.custom(&[a, b], out, move |g, s| {
            s.add(a, g.clone());
            if s.wants(b) {
                let mut acc = vec![0.0; d];
                for r in g.data().chunks(d) {
                    for (x, y) in acc.iter_mut().zip(r) {
                        *x += y;
                    }
                }
                s.add(b, Tensor::new(&bshape, acc));
            }
        })
    }

    /// `a [n, d] ⊙ b [d]` broadcast over rows.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.cols();
        assert_eq!(vb.len(), d, "mul_row: width mismatch");
        let mut out = (*va).clone();
        for r in out.data_mut().chunks_mut(d) {
            for (x, y) in r.iter_mut().zip(vb.data()) {
                *x *= y;
            }
        }
        let bshape = vb.shape().to_vec();
        self.custom(&[a, b], out, move |g, s| {
            if s.wants(a) {
                let mut ga = g.clone();
                for r in ga.data_mut().chunks_mut(d) {
                    for (x, y) in r.iter_mut().zip(vb.data()) {
                        *x *= y;
                    }
                }
                s.add(a, ga);
            }
            if s.wants(b) {
                let mut acc = vec![0.0; d];
                for (gr, ar) in g.data().chunks(d).zip(va.data().chunks(d)) {
                    for k in 0..d {
                        acc[k] += gr[k] * ar[k];
                    }
                }
                s.add(b, Tensor::new(&bshape, acc));
            }
        })
    }

    /// Multiplies row `i` of `a` by the constant `w[i]`.
    pub fn scale_rows(&self, a: Var, w: Rc<Vec<f64>>) -> Var {
        let va = self.value(a);
        let d = va.cols();
        assert_eq!(w.len(), va.rows());
        let mut out = (*va).clone();
        for (r, k) in out.data_mut().chunks_mut(d).zip(w.iter()) {
            r.iter_mut().for_each(|x| *x *= k);
        }
        self.custom(&[a], out, move |g, s| {
            let mut ga = g.clone();
            for (r, k) in ga.data_mut().chunks_mut(d).zip(w.iter()) {
                r.iter_mut().for_each(|x| *x *= k);
            }
            s.add(a, ga);
        })
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let n = vb.cols();
        assert_eq!(
            vb.rows(),
            k,
            "matmul: inner dimension mismatch {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::dense(va.data(), m, k),
            MatRef::dense(vb.data(), k, n),
            0.0,
            MatMut::dense(&mut out, m, n),
        );
        self.custom(&[a, b], Tensor::new(&[m, n], out), move |g, s| {
            if s.wants(a) {
                let mut ga = vec![0.0; m * k];
                gemm(
                    1.0,
                    MatRef::dense(g.data(), m, n),
                    MatRef::dense(vb.data(), k, n).t(),
                    0.0,
                    MatMut::dense(&mut ga, m, k),
                );
                s.add(a, Tensor::new(va.shape(), ga));
            }
            if s.wants(b) {
                let mut gb = vec![0.0; k * n];
                gemm(
                    1.0,
                    MatRef::dense(va.data(), m, k).t(),
                    MatRef::dense(g.data(), m, n),
                    0.0,
                    MatMut::dense(&mut gb, k, n),
                );
                s.add(b, Tensor::new(vb.shape(), gb));
            }
        })
    }

    /// `x [n, in] · w [in, out] + b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let (vals, ders): (Vec<f64>, Vec<f64>) = va.data().iter().map(|x| gelu_scalar(*x)).unzip();
        self.custom(&[a], Tensor::new(va.shape(), vals), move |g, s| {
            s.add(
                a,
                Tensor::new(
                    g.shape(),
                    g.data().iter().zip(&ders).map(|(x, d)| x * d).collect(),
                ),
            );
        })
    }

    /// Row-wise layer normalization with optional affine parameters of width `d`.
    pub fn layer_norm(&self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        let n = vx.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let r = vx.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for k in 0..d {
                xhat[i * d + k] = (r[k] - mean) * is;
            }
        }
        let xhat = Rc::new(Tensor::new(vx.shape(), xhat));
        let gvals = gamma.map(|v| self.value(v));
        let mut out = (*xhat).clone();
        if let Some(gv) = &gvals {
            for r in out.data_mut().chunks_mut(d) {
                for (o, gk) in r.iter_mut().zip(gv.data()) {
                    *o *= gk;
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b);
            for r in out.data_mut().chunks_mut(d) {
                for (o, bk) in r.iter_mut().zip(bv.data()) {
                    *o += bk;
                }
            }
        }
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        self.custom(&parents, out, move |g, s| {
            if let Some(b) = beta {
                if s.wants(b) {
                    let mut acc = vec![0.0; d];
                    for r in g.data().chunks(d) {
                        for k in 0..d {
                            acc[k] += r[k];
                        }
                    }
                    s.add(b, Tensor::new(&[d], acc));
                }
            }
            if let (Some(gm), Some(_)) = (gamma, &gvals) {
                if s.wants(gm) {
                    let mut acc = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for k in 0..d {
                            acc[k] += gr[k] * xr[k];
                        }
                    }
                    s.add(gm, Tensor::new(&[d], acc));
                }
            }
            if s.wants(x) {
                let mut gx = vec![0.0; n * d];
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let xr = &xhat.data()[i * d..(i + 1) * d];
                    for k in 0..d {
                        dxhat[k] = gr[k] * gvals.as_ref().map_or(1.0, |gv| gv.data()[k]);
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[i * d + k] = inv_std[i] * (dxhat[k] - m1 - xr[k] * m2);
                    }
                }
                s.add(x, Tensor::new(g.shape(), gx));
            }
        })
    }

    /// Softmax along the last dimension.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let d = va.cols();
        let mut out = (*va).clone();
        for r in out.data_mut().chunks_mut(d) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            r.iter_mut().for_each(|v| *v /= z);
        }
        let p = Rc::new(out.clone());
        self.custom(&[a], out, move |g, s| {
            let mut ga = vec![0.0; p.len()];
            for ((gr, pr), o) in g
                .data()
                .chunks(d)
                .zip(p.data().chunks(d))
                .zip(ga.chunks_mut(d))
            {
                let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                for k in 0..d {
                    o[k] = pr[k] * (gr[k] - dot);
                }
            }
            s.add(a, Tensor::new(g.shape(), ga));
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape);
        self.custom(&[a], out, move |g, s| s.add(a, g.clone().reshape(&old)))
    }

    /// Stacks row blocks that share their trailing width.
    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|x| self.value(*x)).collect();
        let d = vals[0].cols();
        let mut data = Vec::new();
        let mut rows = Vec::with_capacity(xs.len());
        for v in &vals {
            assert_eq!(v.cols(), d, "concat_rows: width mismatch");
            data.extend_from_slice(v.data());
            rows.push(v.rows());
        }
        let total: usize = rows.iter().sum();
        let parents = xs.to_vec();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.custom(xs, Tensor::new(&[total, d], data), move |g, s| {
            let mut off = 0;
            for ((p, r), sh) in parents.iter().zip(&rows).zip(&shapes) {
                if s.wants(*p) {
                    s.add(
                        *p,
                        Tensor::new(sh, g.data()[off * d..(off + r) * d].to_vec()),
                    );
                }
                off += r;
            }
        })
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        let vals: Vec<_> = xs.iter().map(|x| self.value(*x)).collect();
        let n = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (v, w) in vals.iter().zip(&widths) {
            assert_eq!(v.rows(), n, "concat_cols: row mismatch");
            for i in 0..n {
                data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let parents = xs.to_vec();
        self.custom(xs, Tensor::new(&[n, total], data), move |g, s| {
            let mut off = 0;
            for (p, w) in parents.iter().zip(&widths) {
                if s.wants(*p) {
                    let mut part = vec![0.0; n * w];
                    for i in 0..n {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                    }
                    s.add(*p, Tensor::new(&[n, *w], part));
                }
                off += w;
            }
        })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let d = va.cols();
        let n = va.rows();
        assert!(start + len <= n, "slice_rows out of range");
        let out = Tensor::new(&[len, d], va.data()[start * d..(start + len) * d].to_vec());
        self.custom(&[a], out, move |g, s| {
            s.add_with(a, &[n, d], |buf| {
                for (o, v) in buf[start * d..(start + len) * d].iter_mut().zip(g.data()) {
                    *o += v;
                }
            });
        })
    }

    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        let d = va.cols();
        let n = va.rows();
        assert!(start + width <= d, "slice_cols out of range");
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            out[i * width..(i + 1) * width].copy_from_slice(&va.row(i)[start..start + width]);
        }
        self.custom(&[a], Tensor::new(&[n, width], out), move |g, s| {
            s.add_with(a, &[n, d], |buf| {
                for i in 0..n {
                    for k in 0..width {
                        buf[i * d + start + k] += g.data()[i * width + k];
                    }
                }
            });
        })
    }

    /// Row gather `out[r] = a[idx[r]]`; backward scatter-adds.
    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let d = va.cols();
        let n = va.rows();
        let mut out = vec![0.0; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(va.row(i));
        }
        let shape = va.shape().to_vec();
        self.custom(&[a], Tensor::new(&[idx.len(), d], out), move |g, s| {
            s.add_with(a, &shape, |buf| {
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        buf[i * d + k] += g.data()[r * d + k];
                    }
                }
            });
            let _ = n;
        })
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        self.custom(&[a], Tensor::scalar(va.sum()), move |g, s| {
            s.add(a, Tensor::full(&shape, g.data()[0]));
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let total = self.sum(a);
        self.scale(total, 1.0 / n as f64)
    }

    /// Pairwise L1 distances `[na, nb]` between rows of `a [na, k]` and `b [nb, k]`.
    pub fn pairwise_l1(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.cols();
        assert_eq!(vb.cols(), k);
        let (na, nb) = (va.rows(), vb.rows());
        let mut out = vec![0.0; na * nb];
        for i in 0..na {
            for j in 0..nb {
                out[i * nb + j] = va
                    .row(i)
                    .iter()
                    .zip(vb.row(j))
                    .map(|(x, y)| (x - y).abs())
                    .sum();
            }
        }
        self.custom(&[a, b], Tensor::new(&[na, nb], out), move |g, s| {
            let mut ga = vec![0.0; na * k];
            let mut gb = vec![0.0; nb * k];
            for i in 0..na {
                for j in 0..nb {
                    let w = g.data()[i * nb + j];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        let d = va.row(i)[c] - vb.row(j)[c];
                        let sg = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i * k + c] += w * sg;
                        gb[j * k + c] -= w * sg;
                    }
                }
            }
            s.add(a, Tensor::new(va.shape(), ga));
            s.add(b, Tensor::new(vb.shape(), gb));
        })
    }

    /// Per-head additive attention bias `−tau[h] · dist`, zero-padded by
    /// `pad_rows` extra queries and `pad_cols` extra keys at the end.
    /// Output shape `[h, nq + pad_rows, nk + pad_cols]`.
    pub fn distance_bias(&self, dist: Var, tau: Var, pad_rows: usize, pad_cols: usize) -> Var {
        let (vd, vt) = (self.value(dist), self.value(tau));
        let (nq, nk) = (vd.rows(), vd.cols());
        let h = vt.len();
        let (rq, rk) = (nq + pad_rows, nk + pad_cols);
        let mut out = vec![0.0; h * rq * rk];
        for hh in 0..h {
            let t = vt.data()[hh];
            for i in 0..nq {
                for j in 0..nk {
                    out[hh * rq * rk + i * rk + j] = -t * vd.data()[i * nk + j];
                }
            }
        }
        self.custom(&[dist, tau], Tensor::new(&[h, rq, rk], out), move |g, s| {
            if s.wants(dist) {
                let mut gd = vec![0.0; nq * nk];
                for hh in 0..h {
                    let t = vt.data()[hh];
                    for i in 0..nq {
                        for j in 0..nk {
                            gd[i * nk + j] -= t * g.data()[hh * rq * rk + i * rk + j];
                        }
                    }
                }
                s.add(dist, Tensor::new(&[nq, nk], gd));
            }
            if s.wants(tau) {
                let mut gt = vec![0.0; h];
                for (hh, acc) in gt.iter_mut().enumerate() {
                    for i in 0..nq {
                        for j in 0..nk {
                            *acc -= vd.data()[i * nk + j] * g.data()[hh * rq * rk + i * rk + j];
                        }
                    }
                }
                s.add(tau, Tensor::new(vt.shape(), gt));
            }
        })
    }

    /// Applies `x ↦ R x + t` to each row of `points [n, 3]`; `rot` is row-major 3×3.
    pub fn rigid_transform(&self, points: Var, rot: [f64; 9], trans: [f64; 3]) -> Var {
        let vp = self.value(points);
        assert_eq!(vp.cols(), 3);
        let n = vp.rows();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            let p = vp.row(i);
            for r in 0..3 {
                out[i * 3 + r] =
                    rot[r * 3] * p[0] + rot[r * 3 + 1] * p[1] + rot[r * 3 + 2] * p[2] + trans[r];
            }
        }
        let shape = vp.shape().to_vec();
        self.custom(&[points], Tensor::new(&[n, 3], out), move |g, s| {
            let mut gp = vec![0.0; n * 3];
            for i in 0..n {
                let gr = &g.data()[i * 3..i * 3 + 3];
                for c in 0..3 {
                    gp[i * 3 + c] = rot[c] * gr[0] + rot[3 + c] * gr[1] + rot[6 + c] * gr[2];
                }
            }
            s.add(points, Tensor::new(&shape, gp));
        })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [nq, d]`, `k [nk, d]`, `v [nk, dv]`; heads split `d` and `dv`
    /// evenly. `bias`, when given, has shape `[heads, nq, nk]` and is added
    /// to the scaled scores. Queries with no admissible key produce a zero
    /// row. Returns `[nq, dv]`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<Var>,
        mask: Option<AttnMask>,
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = (vq.rows(), vq.cols());
        let nk = vk.rows();
        let dv = vv.cols();
        assert_eq!(vk.cols(), d, "attention: key width");
        assert_eq!(vv.rows(), nk, "attention: value rows");
        assert!(
            d % heads == 0 && dv % heads == 0,
            "attention: width not divisible by heads"
        );
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let vb = bias.map(|b| self.value(b));
        if let Some(b) = &vb {
            assert_eq!(b.shape(), &[heads, nq, nk], "attention: bias shape");
        }
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * dv];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                scale,
                MatRef::col_block(vq.data(), nq, d, h * dh, dh),
                MatRef::col_block(vk.data(), nk, d, h * dh, dh).t(),
                0.0,
                MatMut::dense(p, nq, nk),
            );
            if let Some(b) = &vb {
                for (x, y) in p.iter_mut().zip(&b.data()[h * nq * nk..(h + 1) * nq * nk]) {
                    *x += y;
                }
            }
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let mut m = f64::NEG_INFINITY;
                for j in 0..nk {
                    if mask.as_ref().is_none_or(|mk| mk.allowed(i, j, nk)) {
                        m = m.max(row[j]);
                    } else {
                        row[j] = f64::NEG_INFINITY;
                    }
                }
                if m == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = if *x == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (*x - m).exp()
                    };
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            gemm(
                1.0,
                MatRef::dense(p, nq, nk),
                MatRef::col_block(vv.data(), nk, dv, h * dvh, dvh),
                0.0,
                MatMut::col_block(&mut out, nq, dv, h * dvh, dvh),
            );
        }
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        let probs = Rc::new(probs);
        self.custom(&parents, Tensor::new(&[nq, dv], out), move |g, s| {
            let mut gq = vec![0.0; nq * d];
            let mut gk = vec![0.0; nk * d];
            let mut gv = vec![0.0; nk * dv];
            let mut gbias = if bias.is_some() {
                vec![0.0; heads * nq * nk]
            } else {
                Vec::new()
            };
            let mut dp = vec![0.0; nq * nk];
            for h in 0..heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                let go = MatRef::col_block(g.data(), nq, dv, h * dvh, dvh);
                // dV_h = P^T dO_h
                gemm(
                    1.0,
                    MatRef::dense(p, nq, nk).t(),
                    go,
                    0.0,
                    MatMut::col_block(&mut gv, nk, dv, h * dvh, dvh),
                );
                // dP = dO_h V_h^T
                gemm(
                    1.0,
                    go,
                    MatRef::col_block(vv.data(), nk, dv, h * dvh, dvh).t(),
                    0.0,
                    MatMut::dense(&mut dp, nq, nk),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..nq {
                    let pr = &p[i * nk..(i + 1) * nk];
                    let dr = &mut dp[i * nk..(i + 1) * nk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..nk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                if bias.is_some() {
                    gbias[h * nq * nk..(h + 1) * nq * nk].copy_from_slice(&dp);
                }
                gemm(
                    scale,
                    MatRef::dense(&dp, nq, nk),
                    MatRef::col_block(vk.data(), nk, d, h * dh, dh),
                    0.0,
                    MatMut::col_block(&mut gq, nq, d, h * dh, dh),
                );
                gemm(
                    scale,
                    MatRef::dense(&dp, nq, nk).t(),
                    MatRef::col_block(vq.data(), nq, d, h * dh, dh),
                    0.0,
                    MatMut::col_block(&mut gk, nk, d, h * dh, dh),
                );
            }
            s.add(q, Tensor::new(&[nq, d], gq));
            s.add(k, Tensor::new(&[nk, d], gk));
            s.add(v, Tensor::new(&[nk, dv], gv));
            if let Some(b) = bias {
                s.add(b, Tensor::new(&[heads, nq, nk], gbias));
            }
        })
    }
}

//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and registers a closure that
//! maps the output gradient back onto the parents. Closures read parent data
//! through the graph handles, compute every contribution first, and only then
//! accumulate — parents may alias (e.g. `x.mul(&x)`), so no data borrow may
//! be live during accumulation.

use super::kernels;
use super::{BackwardFn, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// Sentinel index for [`Tensor::gather_elems`]: the output element is 0.0 and
/// receives no gradient.
pub const GATHER_PAD: usize = usize::MAX;

impl Tensor {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::shape(op, "rank-2 tensor", format!("{s:?}")))
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() == 3 {
            Ok((s[0], s[1], s[2]))
        } else {
            Err(Error::shape(op, "rank-3 tensor", format!("{s:?}")))
        }
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// self[m,k] · other[k,n]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents to match ([{m}x{k}] · [k x n])"),
                format!("[{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(&self.data(), &other.data(), &mut out, m, k, n);
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.is_tracked() {
                let da = {
                    let bd = b.data();
                    let mut da = vec![0.0; m * k];
                    kernels::mm_nt(g, &bd, &mut da, m, n, k);
                    da
                };
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                let db = {
                    let ad = a.data();
                    let mut db = vec![0.0; k * n];
                    kernels::mm_tn_accum(&ad, g, &mut db, m, k, n);
                    db
                };
                b.accumulate_grad(&db);
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    /// self[m,k] · other[n,k]ᵀ
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m}x{k}] · [n x {k}]ᵀ"),
                format!("[{n}x{k2}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(&self.data(), &other.data(), &mut out, m, k, n);
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            if a.is_tracked() {
                let da = {
                    let bd = b.data();
                    let mut da = vec![0.0; m * k];
                    kernels::mm(g, &bd, &mut da, m, n, k);
                    da
                };
                a.accumulate_grad(&da);
            }
            if b.is_tracked() {
                let db = {
                    let ad = a.data();
                    let mut db = vec![0.0; n * k];
                    kernels::mm_tn_accum(g, &ad, &mut db, m, n, k);
                    db
                };
                b.accumulate_grad(&db);
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    // ── Elementwise binary ───────────────────────────────────────────

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let bw: BackwardFn = Box::new(|g, _, parents| {
            for p in parents {
                if p.is_tracked() {
                    p.accumulate_grad(g);
                }
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let bw: BackwardFn = Box::new(|g, _, parents| {
            if parents[0].is_tracked() {
                parents[0].accumulate_grad(g);
            }
            if parents[1].is_tracked() {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                parents[1].accumulate_grad(&neg);
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let bw: BackwardFn = Box::new(|g, _, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (da, db) = {
                let ad = a.data();
                let bd = b.data();
                let da = if a.is_tracked() {
                    Some(g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect::<Vec<_>>())
                } else {
                    None
                };
                let db = if b.is_tracked() {
                    Some(g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect::<Vec<_>>())
                } else {
                    None
                };
                (da, db)
            };
            if let Some(da) = da {
                a.accumulate_grad(&da);
            }
            if let Some(db) = db {
                b.accumulate_grad(&db);
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "div")?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a / b)
            .collect();
        let bw: BackwardFn = Box::new(|g, out, parents| {
            let (a, b) = (&parents[0], &parents[1]);
            let (da, db) = {
                let bd = b.data();
                let da = if a.is_tracked() {
                    Some(g.iter().zip(bd.iter()).map(|(g, b)| g / b).collect::<Vec<_>>())
                } else {
                    None
                };
                let db = if b.is_tracked() {
                    Some(
                        g.iter()
                            .zip(out.iter())
                            .zip(bd.iter())
                            .map(|((g, o), b)| -g * o / b)
                            .collect::<Vec<_>>(),
                    )
                } else {
                    None
                };
                (da, db)
            };
            if let Some(da) = da {
                a.accumulate_grad(&da);
            }
            if let Some(db) = db {
                b.accumulate_grad(&db);
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), other.clone()],
            bw,
        ))
    }

    // ── Row/column broadcasts over rank-2 tensors ────────────────────

    /// self[m,n] + row[n], broadcast over rows.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        if row.numel() != n {
            return Err(Error::shape("add_row", format!("[{n}]"), format!("{:?}", row.shape())));
        }
        let rd = row.to_vec();
        let out: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(rd.iter()).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                parents[0].accumulate_grad(g);
            }
            if parents[1].is_tracked() {
                let mut dr = vec![0.0; n];
                for grow in g.chunks_exact(n) {
                    for (d, gv) in dr.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                parents[1].accumulate_grad(&dr);
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), row.clone()],
            bw,
        ))
    }

    /// self[m,n] / row[n], broadcast over rows.
    pub fn div_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("div_row")?;
        if row.numel() != n {
            return Err(Error::shape("div_row", format!("[{n}]"), format!("{:?}", row.shape())));
        }
        let rd = row.to_vec();
        let out: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(rd.iter()).map(|(a, b)| a / b).collect::<Vec<_>>())
            .collect();
        let bw: BackwardFn = Box::new(move |g, out, parents| {
            let (a, r) = (&parents[0], &parents[1]);
            let (da, dr) = {
                let rdat = r.data();
                let da = if a.is_tracked() {
                    let mut da = vec![0.0; m * n];
                    for (drow, grow) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((d, gv), rv) in drow.iter_mut().zip(grow).zip(rdat.iter()) {
                            *d = gv / rv;
                        }
                    }
                    Some(da)
                } else {
                    None
                };
                let dr = if r.is_tracked() {
                    let mut dr = vec![0.0; n];
                    for (grow, orow) in g.chunks_exact(n).zip(out.chunks_exact(n)) {
                        for j in 0..n {
                            dr[j] -= grow[j] * orow[j] / rdat[j];
                        }
                    }
                    Some(dr)
                } else {
                    None
                };
                (da, dr)
            };
            if let Some(da) = da {
                a.accumulate_grad(&da);
            }
            if let Some(dr) = dr {
                r.accumulate_grad(&dr);
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), row.clone()],
            bw,
        ))
    }

    /// self[m,n] / col[m], broadcast over columns.
    pub fn div_col(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("div_col")?;
        if col.numel() != m {
            return Err(Error::shape("div_col", format!("[{m}]"), format!("{:?}", col.shape())));
        }
        let cd = col.to_vec();
        let mut out = vec![0.0; m * n];
        for (i, (orow, arow)) in out.chunks_exact_mut(n).zip(self.data().chunks_exact(n)).enumerate()
        {
            for (o, a) in orow.iter_mut().zip(arow) {
                *o = a / cd[i];
            }
        }
        let bw: BackwardFn = Box::new(move |g, out, parents| {
            let (a, c) = (&parents[0], &parents[1]);
            let (da, dc) = {
                let cdat = c.data();
                let da = if a.is_tracked() {
                    let mut da = vec![0.0; m * n];
                    for (i, (drow, grow)) in
                        da.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate()
                    {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d = gv / cdat[i];
                        }
                    }
                    Some(da)
                } else {
                    None
                };
                let dc = if c.is_tracked() {
                    let mut dc = vec![0.0; m];
                    for (i, (grow, orow)) in g.chunks_exact(n).zip(out.chunks_exact(n)).enumerate()
                    {
                        dc[i] -= grow
                            .iter()
                            .zip(orow)
                            .map(|(gv, ov)| gv * ov)
                            .sum::<f64>()
                            / cdat[i];
                    }
                    Some(dc)
                } else {
                    None
                };
                (da, dc)
            };
            if let Some(da) = da {
                a.accumulate_grad(&da);
            }
            if let Some(dc) = dc {
                c.accumulate_grad(&dc);
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), col.clone()],
            bw,
        ))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    /// scale * self + offset, elementwise.
    pub fn affine(&self, scale: f64, offset: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| scale * v + offset).collect();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let dx: Vec<f64> = g.iter().map(|v| scale * v).collect();
                parents[0].accumulate_grad(&dx);
            }
        });
        Tensor::from_op(out, self.shape(), vec![self.clone()], bw)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.affine(factor, 0.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let bw: BackwardFn = Box::new(|g, out, parents| {
            if parents[0].is_tracked() {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, self.shape(), vec![self.clone()], bw))
    }

    pub fn square(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v * v).collect();
        let bw: BackwardFn = Box::new(|g, _, parents| {
            if parents[0].is_tracked() {
                let dx = {
                    let xd = parents[0].data();
                    g.iter().zip(xd.iter()).map(|(g, x)| 2.0 * x * g).collect::<Vec<_>>()
                };
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, self.shape(), vec![self.clone()], bw))
    }

    /// Elementwise square root. The derivative is clamped near zero so that
    /// exact-zero inputs (e.g. identical feature statistics) stay finite.
    pub fn sqrt_elem(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        let bw: BackwardFn = Box::new(|g, out, parents| {
            if parents[0].is_tracked() {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(g, o)| g / (2.0 * o.max(1e-8)))
                    .collect();
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, self.shape(), vec![self.clone()], bw))
    }

    pub fn abs_elem(&self) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v.abs()).collect();
        let bw: BackwardFn = Box::new(|g, _, parents| {
            if parents[0].is_tracked() {
                let dx = {
                    let xd = parents[0].data();
                    g.iter()
                        .zip(xd.iter())
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -*g
                            } else {
                                0.0
                            }
                        })
                        .collect::<Vec<_>>()
                };
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, self.shape(), vec![self.clone()], bw))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                parents[0].accumulate_grad(&vec![g[0]; n]);
            }
        });
        Tensor::from_op(vec![s], vec![1], vec![self.clone()], bw)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().affine(1.0 / n, 0.0)
    }

    /// [m,n] -> [m,1], sum across each row.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_sums")?;
        let out: Vec<f64> = self.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; m * n];
                for (drow, gi) in dx.chunks_exact_mut(n).zip(g) {
                    drow.iter_mut().for_each(|d| *d = *gi);
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![m, 1], vec![self.clone()], bw))
    }

    /// [m,n] -> [1,n], sum down each column.
    pub fn col_sums(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("col_sums")?;
        let mut out = vec![0.0; n];
        for row in self.data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; m * n];
                for drow in dx.chunks_exact_mut(n) {
                    drow.copy_from_slice(g);
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![1, n], vec![self.clone()], bw))
    }

    // ── Softmax and normalization ────────────────────────────────────

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        if n == 0 {
            return Err(Error::invalid("softmax_rows: empty rows"));
        }
        let mut out = vec![0.0; m * n];
        for (orow, xrow) in out.chunks_exact_mut(n).zip(self.data().chunks_exact(n)) {
            let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in orow.iter_mut().zip(xrow) {
                *o = (x - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let bw: BackwardFn = Box::new(move |g, out, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; m * n];
                for ((drow, grow), orow) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(orow).map(|(g, o)| g * o).sum();
                    for ((d, gv), ov) in drow.iter_mut().zip(grow).zip(orow) {
                        *d = ov * (gv - dot);
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone()], bw))
    }

    /// Per-column standardization over rows: (x - mean) / sqrt(var + eps),
    /// with population variance. Columns are feature channels, rows tokens.
    pub fn norm_cols(&self, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("norm_cols")?;
        if m == 0 {
            return Err(Error::invalid("norm_cols: no rows"));
        }
        let data = self.data();
        let mut mean = vec![0.0; n];
        for row in data.chunks_exact(n) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for row in data.chunks_exact(n) {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; m * n];
        for (orow, xrow) in out.chunks_exact_mut(n).zip(data.chunks_exact(n)) {
            for (j, (o, x)) in orow.iter_mut().zip(xrow).enumerate() {
                *o = (x - mean[j]) * invstd[j];
            }
        }
        drop(data);
        let inv = invstd;
        let bw: BackwardFn = Box::new(move |g, out, parents| {
            if parents[0].is_tracked() {
                // dx = inv * (g - mean_col(g) - y * mean_col(g*y))
                let mut gmean = vec![0.0; n];
                let mut gymean = vec![0.0; n];
                for (grow, orow) in g.chunks_exact(n).zip(out.chunks_exact(n)) {
                    for j in 0..n {
                        gmean[j] += grow[j];
                        gymean[j] += grow[j] * orow[j];
                    }
                }
                gmean.iter_mut().for_each(|v| *v /= m as f64);
                gymean.iter_mut().for_each(|v| *v /= m as f64);
                let mut dx = vec![0.0; m * n];
                for ((drow, grow), orow) in dx
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.chunks_exact(n))
                {
                    for j in 0..n {
                        drow[j] = inv[j] * (grow[j] - gmean[j] - orow[j] * gymean[j]);
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone()], bw))
    }

    /// [m,n] -> [1,n] per-column mean over rows.
    pub fn col_mean(&self) -> Result<Tensor> {
        let (m, _) = self.dims2("col_mean")?;
        Ok(self.col_sums()?.affine(1.0 / m as f64, 0.0))
    }

    /// [m,n] -> [1,n] per-column population standard deviation over rows.
    /// The backward pass clamps 1/sigma so constant channels stay finite.
    pub fn col_std(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("col_std")?;
        if m == 0 {
            return Err(Error::invalid("col_std: no rows"));
        }
        let data = self.data();
        let mut mean = vec![0.0; n];
        for row in data.chunks_exact(n) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for row in data.chunks_exact(n) {
            for (j, v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / m as f64).sqrt()).collect();
        drop(data);
        let mean_saved = mean;
        let out = std;
        let bw: BackwardFn = Box::new(move |g, out, parents| {
            if parents[0].is_tracked() {
                let dx = {
                    let xd = parents[0].data();
                    let mut dx = vec![0.0; m * n];
                    for (drow, xrow) in dx.chunks_exact_mut(n).zip(xd.chunks_exact(n)) {
                        for j in 0..n {
                            let denom = m as f64 * out[j].max(1e-8);
                            drow[j] = g[j] * (xrow[j] - mean_saved[j]) / denom;
                        }
                    }
                    dx
                };
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![1, n], vec![self.clone()], bw))
    }

    // ── Structural ops ───────────────────────────────────────────────

    /// out[i] = self.data[idx[i]], with [`GATHER_PAD`] producing 0.0.
    /// Duplicate indices are fine; the backward pass scatter-adds.
    pub fn gather_elems(&self, indices: Rc<[usize]>, out_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::shape(
                "gather_elems",
                format!("{numel} indices"),
                format!("{}", indices.len()),
            ));
        }
        let src_len = self.numel();
        if let Some(bad) = indices.iter().find(|&&i| i != GATHER_PAD && i >= src_len) {
            return Err(Error::invalid(format!(
                "gather_elems: index {bad} out of bounds for {src_len} elements"
            )));
        }
        let out: Vec<f64> = {
            let d = self.data();
            indices
                .iter()
                .map(|&i| if i == GATHER_PAD { 0.0 } else { d[i] })
                .collect()
        };
        let idx = indices.clone();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; src_len];
                for (&i, gv) in idx.iter().zip(g) {
                    if i != GATHER_PAD {
                        dx[i] += gv;
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(
            out,
            out_shape.to_vec(),
            vec![self.clone()],
            bw,
        ))
    }

    /// Contiguous row block of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::invalid(format!(
                "slice_rows: rows {start}..{} out of {m}",
                start + len
            )));
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g);
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![len, n], vec![self.clone()], bw))
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: empty input list"));
        }
        let (_, n) = parts[0].dims2("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (m_p, n_p) = p.dims2("concat_rows")?;
            if n_p != n {
                return Err(Error::shape("concat_rows", format!("{n} columns"), format!("{n_p}")));
            }
            rows.push(m_p);
            total += m_p;
        }
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            let mut offset = 0usize;
            for (p, m_p) in parents.iter().zip(&rows) {
                let len = m_p * n;
                if p.is_tracked() {
                    p.accumulate_grad(&g[offset..offset + len]);
                }
                offset += len;
            }
        });
        Ok(Tensor::from_op(out, vec![total, n], parts.to_vec(), bw))
    }

    /// Stack rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: empty input list"));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut cols = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (m_p, n_p) = p.dims2("concat_cols")?;
            if m_p != m {
                return Err(Error::shape("concat_cols", format!("{m} rows"), format!("{m_p}")));
            }
            cols.push(n_p);
            total += n_p;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0usize;
        for (p, n_p) in parts.iter().zip(&cols) {
            let d = p.data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + n_p]
                    .copy_from_slice(&d[i * n_p..(i + 1) * n_p]);
            }
            offset += n_p;
        }
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            let mut offset = 0usize;
            for (p, n_p) in parents.iter().zip(&cols) {
                if p.is_tracked() {
                    let mut dp = vec![0.0; m * n_p];
                    for i in 0..m {
                        dp[i * n_p..(i + 1) * n_p]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + n_p]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += n_p;
            }
        });
        Ok(Tensor::from_op(out, vec![m, total], parts.to_vec(), bw))
    }

    // ── Image ops (rank-3: [channels, height, width]) ────────────────

    /// 3x3 convolution with stride 1 and zero padding 1.
    /// weight: [co, ci, 3, 3], bias: [co].
    pub fn conv3x3(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (ci, h, w) = self.dims3("conv3x3")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv3x3",
                format!("[co, {ci}, 3, 3]"),
                format!("{ws:?}"),
            ));
        }
        let co = ws[0];
        if bias.numel() != co {
            return Err(Error::shape("conv3x3", format!("[{co}] bias"), format!("{:?}", bias.shape())));
        }
        let mut out = vec![0.0; co * h * w];
        kernels::conv3x3(
            &self.data(),
            &weight.data(),
            &bias.data(),
            &mut out,
            ci,
            co,
            h,
            w,
        );
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
            if input.is_tracked() {
                let din = {
                    let wd = weight.data();
                    let mut din = vec![0.0; ci * h * w];
                    kernels::conv3x3_input_grad(g, &wd, &mut din, ci, co, h, w);
                    din
                };
                input.accumulate_grad(&din);
            }
            if weight.is_tracked() || bias.is_tracked() {
                let (dw, db) = {
                    let id = input.data();
                    let mut dw = vec![0.0; co * ci * 9];
                    let mut db = vec![0.0; co];
                    kernels::conv3x3_weight_grad(g, &id, &mut dw, &mut db, ci, co, h, w);
                    (dw, db)
                };
                if weight.is_tracked() {
                    weight.accumulate_grad(&dw);
                }
                if bias.is_tracked() {
                    bias.accumulate_grad(&db);
                }
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![co, h, w],
            vec![self.clone(), weight.clone(), bias.clone()],
            bw,
        ))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "avg_pool2: spatial dims must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        {
            let d = self.data();
            for ch in 0..c {
                let iplane = &d[ch * h * w..(ch + 1) * h * w];
                let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        let base = 2 * y * w + 2 * x;
                        oplane[y * ow + x] =
                            0.25 * (iplane[base] + iplane[base + 1] + iplane[base + w] + iplane[base + w + 1]);
                    }
                }
            }
        }
        let bw: BackwardFn = Box::new(move |g, _, parents| {
            if parents[0].is_tracked() {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * gplane[y * ow + x];
                            let base = 2 * y * w + 2 * x;
                            dplane[base] += gv;
                            dplane[base + 1] += gv;
                            dplane[base + w] += gv;
                            dplane[base + w + 1] += gv;
                        }
                    }
                }
                parents[0].accumulate_grad(&dx);
            }
        });
        Ok(Tensor::from_op(out, vec![c, oh, ow], vec![self.clone()], bw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_err};
    use crate::rng::Rng;

    fn tracked(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let t = Tensor::from_vec(data, shape).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_descriptive() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let a = tracked((0..6).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[2, 3]);
        let b = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor| x.matmul(&b).unwrap().sum();
        let fd = finite_diff_grad(&|x| loss(x).value(), &a, 1e-5);
        loss(&a).backward().unwrap();
        let err = max_rel_err(&a.grad().unwrap(), &fd);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_column_is_ones() {
        let x = Tensor::from_vec(vec![-3.0, 0.5, 9.0], &[3, 1]).unwrap();
        assert_eq!(x.softmax_rows().unwrap().to_vec(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_closed_form_exponentials() {
        let x = Tensor::from_vec(
            vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()],
            &[1, 3],
        )
        .unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let x = Tensor::uniform(&[7, 5], -10.0, 10.0, &mut rng);
        let y = x.softmax_rows().unwrap();
        for row in y.data().chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_cols_constant_channel_is_zero() {
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0], &[3, 1]).unwrap();
        let y = x.norm_cols(1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn norm_cols_two_point_channel() {
        // channel [1, 3]: mean 2, population std 1 -> [-1, 1] at eps = 0
        let x = Tensor::from_vec(vec![1.0, 3.0], &[2, 1]).unwrap();
        let y = x.norm_cols(0.0).unwrap();
        assert_eq!(y.to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn norm_cols_standardizes_random_input() {
        let mut rng = Rng::new(17);
        let x = Tensor::uniform(&[64, 3], -10.0, 10.0, &mut rng);
        let y = x.norm_cols(1e-5).unwrap();
        let m = y.col_mean().unwrap().to_vec();
        let s = y.col_std().unwrap().to_vec();
        for j in 0..3 {
            assert!(m[j].abs() < 1e-9, "mean {}", m[j]);
            assert!((s[j] - 1.0).abs() < 1e-6, "std {}", s[j]);
        }
    }

    #[test]
    fn col_stats_hand_cases() {
        let x = Tensor::from_vec(vec![5.0, 5.0], &[2, 1]).unwrap();
        assert_eq!(x.col_mean().unwrap().to_vec(), vec![5.0]);
        assert_eq!(x.col_std().unwrap().to_vec(), vec![0.0]);

        let x = Tensor::from_vec(vec![0.0, 2.0], &[2, 1]).unwrap();
        assert_eq!(x.col_mean().unwrap().to_vec(), vec![1.0]);
        assert_eq!(x.col_std().unwrap().to_vec(), vec![1.0]);
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let x = tracked(vec![1.0, 2.0, 3.0], &[3]);
        // Duplicate index 0; pad one slot.
        let idx: Rc<[usize]> = vec![0, 0, 2, GATHER_PAD].into();
        let y = x.gather_elems(idx, &[4]).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 3.0, 0.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 6.0], &[1, 2]).unwrap();
        let c = Tensor::concat_rows(&[a.clone(), b]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        let back = c.slice_rows(0, 2).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = Rng::new(9);
        for op in 0..6 {
            let x = tracked((0..8).map(|_| rng.uniform(0.2, 2.0)).collect(), &[2, 4]);
            let w = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
            let f = move |t: &Tensor| -> Tensor {
                let y = match op {
                    0 => t.relu().unwrap(),
                    1 => t.square().unwrap(),
                    2 => t.sqrt_elem().unwrap(),
                    3 => t.abs_elem().unwrap(),
                    4 => t.norm_cols(1e-5).unwrap(),
                    _ => t.softmax_rows().unwrap(),
                };
                y.mul(&w).unwrap().sum()
            };
            let fd = finite_diff_grad(&|t| f(t).value(), &x, 1e-5);
            f(&x).backward().unwrap();
            let err = max_rel_err(&x.grad().unwrap(), &fd);
            assert!(err < 1e-4, "op {op}: rel err {err}");
        }
    }

    #[test]
    fn conv_and_pool_grads_match_finite_differences() {
        let mut rng = Rng::new(21);
        let x = tracked((0..2 * 4 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect(), &[2, 4, 4]);
        let w = tracked((0..3 * 2 * 9).map(|_| rng.uniform(-0.5, 0.5)).collect(), &[3, 2, 3, 3]);
        let b = tracked((0..3).map(|_| rng.uniform(-0.5, 0.5)).collect(), &[3]);
        let proj = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
            x.conv3x3(w, b)
                .unwrap()
                .avg_pool2()
                .unwrap()
                .mul(&proj)
                .unwrap()
                .sum()
        };
        f(&x, &w, &b).backward().unwrap();
        // Perturbation happens in place, so the closure can ignore its arg.
        for (t, name) in [(&x, "input"), (&w, "weight"), (&b, "bias")] {
            let fd = finite_diff_grad(&|_| f(&x, &w, &b).value(), t, 1e-5);
            let err = max_rel_err(&t.grad().unwrap(), &fd);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}

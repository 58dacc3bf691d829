//! Differentiable operations.
//!
//! Shapes are checked up front and reported through [`Error::Dimension`].
//! Backward closures read parent values straight from the parent handles;
//! forward values needed by a backward pass (softmax rows, activation
//! inputs) are captured by value.

use super::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Rows/cols view of a 1-D or 2-D shape: a vector is one row.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => panic!("op expects a 1-D or 2-D tensor, got {shape:?}"),
    }
}

impl Tensor {
    /// Matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(dim_err("matmul", ls, rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = matmul_nn(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    a.add_to_grad(&matmul_nt(g, &b.data(), m, n, k));
                }
                if b.requires_grad() {
                    b.add_to_grad(&matmul_tn(&a.data(), g, k, m, n));
                }
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gt = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gt[i * n + j] = g[j * m + i];
                    }
                }
                parents[0].add_to_grad(&gt);
            }),
        ))
    }

    fn zip_same_shape(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Vec<f32>> {
        if self.shape() != rhs.shape() {
            return Err(dim_err(op, self.shape(), rhs.shape()));
        }
        Ok(self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same_shape(rhs, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                parents[0].add_to_grad(g);
                parents[1].add_to_grad(g);
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same_shape(rhs, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                parents[0].add_to_grad(g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                parents[1].add_to_grad(&neg);
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same_shape(rhs, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(&g, &b)| g * b).collect();
                    a.add_to_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f32> = g.iter().zip(a.data().iter()).map(|(&g, &a)| g * a).collect();
                    b.add_to_grad(&db);
                }
            }),
        ))
    }

    /// Elementwise quotient. Caller keeps the denominator away from zero.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same_shape(rhs, "div", |a, b| a / b)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let da: Vec<f32> = g.iter().zip(b.data().iter()).map(|(&g, &b)| g / b).collect();
                    a.add_to_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.data();
                    let bv = b.data();
                    let db: Vec<f32> = g
                        .iter()
                        .zip(av.iter().zip(bv.iter()))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect();
                    b.add_to_grad(&db);
                }
            }),
        ))
    }

    /// Add a row vector `[n]` to every row of `[m,n]`.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(self.shape());
        if row.numel() != n {
            return Err(dim_err("add_row", self.shape(), row.shape()));
        }
        let rv = row.data();
        let out: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % n])
            .collect();
        drop(rv);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, parents| {
                parents[0].add_to_grad(g);
                if parents[1].requires_grad() {
                    let mut dr = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j] as f64;
                        }
                    }
                    let dr: Vec<f32> = dr.into_iter().map(|v| v as f32).collect();
                    parents[1].add_to_grad(&dr);
                }
            }),
        ))
    }

    /// Multiply row `i` of `[m,n]` by `v[i]`.
    pub fn scale_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = as_2d(self.shape());
        if v.numel() != m {
            return Err(dim_err("scale_rows", self.shape(), v.shape()));
        }
        let vv = v.data();
        let out: Vec<f32> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vv[i / n])
            .collect();
        drop(vv);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g, parents| {
                let (x, v) = (&parents[0], &parents[1]);
                if x.requires_grad() {
                    let vv = v.data();
                    let dx: Vec<f32> = g.iter().enumerate().map(|(i, &g)| g * vv[i / n]).collect();
                    x.add_to_grad(&dx);
                }
                if v.requires_grad() {
                    let xv = x.data();
                    let mut dv = vec![0.0f64; m];
                    for i in 0..m {
                        for j in 0..n {
                            dv[i] += (g[i * n + j] * xv[i * n + j]) as f64;
                        }
                    }
                    let dv: Vec<f32> = dv.into_iter().map(|v| v as f32).collect();
                    v.add_to_grad(&dv);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dg: Vec<f32> = g.iter().map(|&v| v * c).collect();
                parents[0].add_to_grad(&dg);
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g, parents| parents[0].add_to_grad(g)),
        )
    }

    /// Sum of several same-shape tensors.
    pub fn add_n(terms: &[Tensor]) -> Result<Tensor> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Validation("add_n needs at least one term".into()))?;
        let shape = first.shape().to_vec();
        let mut acc = vec![0.0f64; first.numel()];
        for t in terms {
            if t.shape() != shape.as_slice() {
                return Err(dim_err("add_n", &shape, t.shape()));
            }
            for (a, &v) in acc.iter_mut().zip(t.data().iter()) {
                *a += v as f64;
            }
        }
        let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        Ok(Tensor::from_op(
            shape,
            out,
            terms.to_vec(),
            Box::new(|g, parents| {
                for p in parents {
                    p.add_to_grad(g);
                }
            }),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor (f64 accumulation).
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        Tensor::from_op(
            vec![1],
            vec![s as f32],
            vec![self.clone()],
            Box::new(|g, parents| {
                let d = vec![g[0]; parents[0].numel()];
                parents[0].add_to_grad(&d);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// Row-stable softmax over the last dimension.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() || *s.last().unwrap() == 0 {
            return Err(dim_err("softmax_lastdim", s, &[]));
        }
        let (m, n) = as_2d(s);
        let src = self.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                let e = ((v - max) as f64).exp();
                *o = e as f32;
                denom += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = (*o as f64 / denom) as f32;
            }
        }
        drop(src);
        let saved = out.clone();
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // dx = y ⊙ (g − Σ_j g_j y_j) per row
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let y = &saved[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(&y, &g)| y as f64 * g as f64).sum();
                    for j in 0..n {
                        dx[i * n + j] = (y[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                parents[0].add_to_grad(&dx);
            }),
        ))
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = as_2d(self.shape());
        if gain.numel() != n || bias.numel() != n {
            return Err(dim_err("layer_norm", self.shape(), gain.shape()));
        }
        let src = self.data();
        let gv = gain.data();
        let bv = bias.data();
        let mut out = vec![0.0f32; m * n];
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var: f64 = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            rstd[i] = r as f32;
            for j in 0..n {
                let xh = ((row[j] as f64 - mean) * r) as f32;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gv[j] + bv[j];
            }
        }
        drop((src, gv, bv));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let (x, gain, bias) = (&parents[0], &parents[1], &parents[2]);
                let gv = gain.data();
                if x.requires_grad() {
                    let mut dx = vec![0.0f32; m * n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut sum_gy = 0.0f64;
                        let mut sum_gyx = 0.0f64;
                        for j in 0..n {
                            let gy = gr[j] as f64 * gv[j] as f64;
                            sum_gy += gy;
                            sum_gyx += gy * xh[j] as f64;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let gy = gr[j] as f64 * gv[j] as f64;
                            dx[i * n + j] = (rstd[i] as f64
                                * (gy - inv_n * sum_gy - xh[j] as f64 * inv_n * sum_gyx))
                                as f32;
                        }
                    }
                    x.add_to_grad(&dx);
                }
                drop(gv);
                if gain.requires_grad() || bias.requires_grad() {
                    let mut dg = vec![0.0f64; n];
                    let mut db = vec![0.0f64; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] as f64 * xhat[i * n + j] as f64;
                            db[j] += g[i * n + j] as f64;
                        }
                    }
                    let dg: Vec<f32> = dg.into_iter().map(|v| v as f32).collect();
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    gain.add_to_grad(&dg);
                    bias.add_to_grad(&db);
                }
            }),
        ))
    }

    fn unary(
        &self,
        f: impl Fn(f32) -> f32,
        dfdx: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Tensor {
        let input = self.to_vec();
        let out: Vec<f32> = input.iter().map(|&v| f(v)).collect();
        let saved_out = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(input.iter().zip(saved_out.iter()))
                    .map(|(&g, (&x, &y))| g * dfdx(x, y))
                    .collect();
                parents[0].add_to_grad(&dx);
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_f32, |x, _| gelu_grad_f32(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_f32, |x, _| 1.0 / (1.0 + (-x).exp()))
    }

    /// `elu(x) + 1`: strictly positive feature map for linear attention.
    pub fn elu_plus_one(&self) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x + 1.0 } else { x.exp() },
            |x, y| if x > 0.0 { 1.0 } else { y },
        )
    }

    /// `sqrt(x + eps)`; eps keeps the derivative finite at x = 0.
    pub fn sqrt_eps(&self, eps: f32) -> Tensor {
        self.unary(
            move |x| (x + eps).sqrt(),
            |_, y| 0.5 / y,
        )
    }

    /// Rows of `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_2d(self.shape());
        if start + len > m {
            return Err(Error::Validation(format!(
                "slice_rows {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let out = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::from_op(
            vec![len, n],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0f32; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g);
                parents[0].add_to_grad(&dx);
            }),
        ))
    }

    /// Columns `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_2d(self.shape());
        if start + len > n {
            return Err(Error::Validation(format!(
                "slice_cols {start}..{} out of bounds for {n} cols",
                start + len
            )));
        }
        let src = self.data();
        let mut out = vec![0.0f32; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![m, len],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                parents[0].add_to_grad(&dx);
            }),
        ))
    }

    /// Stack 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows needs at least one part".into()))?;
        let (_, n) = as_2d(first.shape());
        let mut rows = 0;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = as_2d(p.shape());
            if pn != n {
                return Err(dim_err("concat_rows", first.shape(), p.shape()));
            }
            rows += pm;
            row_counts.push(pm);
            data.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(
            vec![rows, n],
            data,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut offset = 0;
                for (p, &pm) in parents.iter().zip(&row_counts) {
                    let chunk = &g[offset * n..(offset + pm) * n];
                    p.add_to_grad(chunk);
                    offset += pm;
                }
            }),
        ))
    }

    /// Stack 2-D tensors with equal row counts horizontally.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_cols needs at least one part".into()))?;
        let (m, _) = as_2d(first.shape());
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pm, pn) = as_2d(p.shape());
            if pm != m {
                return Err(dim_err("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0f32; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::from_op(
            vec![m, total],
            data,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![0.0f32; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        p.add_to_grad(&dp);
                    }
                    offset += w;
                }
            }),
        ))
    }

    /// Mean cross-entropy of row logits `[b,k]` against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (b, k) = as_2d(self.shape());
        if labels.len() != b {
            return Err(Error::Validation(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let src = self.data();
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            let lse = max as f64 + denom.ln();
            loss += lse - row[labels[i]] as f64;
            for j in 0..k {
                probs[i * k + j] = (((row[j] - max) as f64).exp() / denom) as f32;
            }
        }
        drop(src);
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss as f32],
            vec![self.clone()],
            Box::new(move |g, parents| {
                let scale = g[0] / b as f32;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                parents[0].add_to_grad(&dx);
            }),
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&self, p: f32, rng: &mut R) -> Tensor {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f32> = (0..self.numel())
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx: Vec<f32> = g.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                parents[0].add_to_grad(&dx);
            }),
        )
    }
}

pub(crate) fn softplus_f32(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu_f32(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_f32(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

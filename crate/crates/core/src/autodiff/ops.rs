use super::kernels::{axis_split, logsumexp, matmul_nn, matmul_nt, matmul_tn, softmax_along};
use super::{gradient_fault, Tensor, EPS_NORM};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(mismatch(op, s, &[])),
    }
}

fn ensure_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Tensor {
    /// `self[m×k] · other[k×n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(), other.shape()));
        }
        let out = matmul_nn(&self.values(), &other.values(), m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p, need| {
                let da = need[0].then(|| matmul_nt(g, &p[1].values(), m, n, k));
                let db = need[1].then(|| matmul_tn(&p[0].values(), g, m, k, n));
                vec![da, db]
            }),
        ))
    }

    /// `self[m×k] · other[n×k]ᵀ`, the layout used by every linear projection.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul_t", self)?;
        let (n, k2) = matrix_dims("matmul_t", other)?;
        if k != k2 {
            return Err(mismatch("matmul_t", self.shape(), other.shape()));
        }
        let out = matmul_nt(&self.values(), &other.values(), m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p, need| {
                let scale = if gradient_fault() { 2.0 } else { 1.0 };
                let rescale = |mut v: Vec<f64>| {
                    if scale != 1.0 {
                        v.iter_mut().for_each(|x| *x *= scale);
                    }
                    v
                };
                let da = need[0].then(|| rescale(matmul_nn(g, &p[1].values(), m, n, k)));
                let db = need[1].then(|| rescale(matmul_tn(g, &p[0].values(), m, n, k)));
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = matrix_dims("transpose", self)?;
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _, _| vec![Some(g.to_vec())]),
        ))
    }

    fn zip_same(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, self.shape(), other.shape()));
        }
        let (a, b) = (self.values(), other.values());
        Ok(a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _, need| vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _, need| {
                vec![
                    need[0].then(|| g.to_vec()),
                    need[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p, need| {
                let da = need[0].then(|| {
                    let b = p[1].values();
                    g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()
                });
                let db = need[1].then(|| {
                    let a = p[0].values();
                    g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()
                });
                vec![da, db]
            }),
        ))
    }

    /// `self[m×n] + bias[n]`, broadcast over rows.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = bias.len();
        let last = *self.shape().last().unwrap_or(&1);
        if bias.shape().len() != 1 || last != n {
            return Err(mismatch("add_row", self.shape(), bias.shape()));
        }
        let out: Vec<f64> = {
            let (x, b) = (self.values(), bias.values());
            x.iter().enumerate().map(|(i, v)| v + b[i % n]).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _, need| {
                let db = need[1].then(|| {
                    let mut d = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        d[i % n] += v;
                    }
                    d
                });
                vec![need[0].then(|| g.to_vec()), db]
            }),
        ))
    }

    /// `self[m×n] ∘ col[m]`, each row scaled by its entry of `col`.
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = matrix_dims("mul_col", self)?;
        if col.len() != m {
            return Err(mismatch("mul_col", self.shape(), col.shape()));
        }
        let out: Vec<f64> = {
            let (x, c) = (self.values(), col.values());
            x.iter().enumerate().map(|(i, v)| v * c[i / n]).collect()
        };
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), col.clone()],
            Box::new(move |g, _, p, need| {
                let dx = need[0].then(|| {
                    let c = p[1].values();
                    g.iter().enumerate().map(|(i, v)| v * c[i / n]).collect()
                });
                let dc = need[1].then(|| {
                    let x = p[0].values();
                    let mut d = vec![0.0; m];
                    for (i, v) in g.iter().enumerate() {
                        d[i / n] += v * x[i];
                    }
                    d
                });
                vec![dx, dc]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.values().iter().map(|v| v * s).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    /// Multiplication by a differentiable single-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(mismatch("mul_scalar", self.shape(), s.shape()));
        }
        let sv = s.item();
        let out = self.values().iter().map(|v| v * sv).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(|g, _, p, need| {
                let sv = p[1].values()[0];
                let dx = need[0].then(|| g.iter().map(|v| v * sv).collect());
                let ds = need[1].then(|| {
                    let x = p[0].values();
                    vec![g.iter().zip(x.iter()).map(|(g, x)| g * x).sum()]
                });
                vec![dx, ds]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sum(&self) -> Tensor {
        let n = self.len();
        let total = self.values().iter().sum();
        Tensor::from_op(
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        ensure_finite("softmax", &self.values())?;
        let shape = self.shape().to_vec();
        let out = softmax_along(&self.values(), &shape, axis);
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(move |g, y, _, _| {
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let sm = self.softmax(axis)?.detach();
        let shape = self.shape().to_vec();
        let p = sm.to_vec();
        let out: Vec<f64> = {
            let x = self.values();
            let (outer, len, inner) = axis_split(&shape, axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * len * inner + a * inner + i;
                    let slice: Vec<f64> = (0..len).map(|a| x[at(a)]).collect();
                    let lse = logsumexp(&slice);
                    for a in 0..len {
                        out[at(a)] = x[at(a)] - lse;
                    }
                }
            }
            out
        };
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let total: f64 = (0..len).map(|a| g[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = g[at(a)] - p[at(a)] * total;
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// `log Σ exp(x)` over every element.
    pub fn logsumexp(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::invalid("logsumexp of an empty tensor"));
        }
        ensure_finite("logsumexp", &self.values())?;
        let x = self.to_vec();
        let lse = logsumexp(&x);
        let n = x.len();
        let w = softmax_along(&x, &[n], 0);
        Ok(Tensor::from_op(
            vec![lse],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(w.iter().map(|p| p * g[0]).collect())]),
        ))
    }

    pub fn exp(&self) -> Tensor {
        let out = self.values().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, y, _, _| vec![Some(g.iter().zip(y).map(|(g, y)| g * y).collect())]),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.values().iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = self.values().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, p, _| {
                let x = p[0].values();
                vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())]
            }),
        ))
    }

    /// Element-wise `1/x`; zero entries are an error.
    pub fn recip(&self) -> Result<Tensor> {
        if self.values().iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::NonFinite { op: "recip" });
        }
        let out = self.values().iter().map(|v| 1.0 / v).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, y, _, _| vec![Some(g.iter().zip(y).map(|(g, y)| -g * y * y).collect())]),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self
            .values()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, p, _| {
                let x = p[0].values();
                let d = g
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &x)| {
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = *self.shape().last().unwrap_or(&0);
        if n == 0 || gain.len() != n || bias.len() != n {
            return Err(mismatch("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.len() / n;
        let x = self.to_vec();
        let (gv, bv) = (gain.to_vec(), bias.to_vec());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gv[j] * h + bv[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, p, need| {
                let gv = p[1].values();
                let dx = need[0].then(|| {
                    let mut d = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..n).map(|j| g[r * n + j] * gv[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghx = (0..n).map(|j| gh[j] * xhat[r * n + j]).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] = inv_std[r] * (gh[j] - mean_gh - xhat[r * n + j] * mean_ghx);
                        }
                    }
                    d
                });
                let dg = need[1].then(|| {
                    let mut d = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        d[i % n] += v * xhat[i];
                    }
                    d
                });
                let db = need[2].then(|| {
                    let mut d = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        d[i % n] += v;
                    }
                    d
                });
                vec![dx, dg, db]
            }),
        ))
    }

    /// Embedding lookup: rows `ids` of a `[V×d]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = matrix_dims("gather_rows", self)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        let out: Vec<f64> = {
            let t = self.values();
            ids.iter()
                .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
                .collect()
        };
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), d],
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut dt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (m, n) = matrix_dims("row", self)?;
        if i >= m {
            return Err(Error::invalid(format!("row {i} out of range for {m} rows")));
        }
        let out = self.values()[i * n..(i + 1) * n].to_vec();
        Ok(Tensor::from_op(
            out,
            vec![n],
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; m * n];
                d[i * n..(i + 1) * n].copy_from_slice(g);
                vec![Some(d)]
            }),
        ))
    }

    /// Stacks equally sized tensors as the rows of a `[k×n]` matrix.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("stack of zero tensors"));
        };
        let n = first.len();
        if let Some(bad) = parts.iter().find(|p| p.len() != n) {
            return Err(mismatch("stack", first.shape(), bad.shape()));
        }
        let mut out = Vec::with_capacity(parts.len() * n);
        for p in parts {
            out.extend_from_slice(&p.values());
        }
        let k = parts.len();
        Ok(Tensor::from_op(
            out,
            vec![k, n],
            parts.to_vec(),
            Box::new(move |g, _, _, need| {
                (0..k)
                    .map(|r| need[r].then(|| g[r * n..(r + 1) * n].to_vec()))
                    .collect()
            }),
        ))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = matrix_dims("slice_cols", self)?;
        if start + width > n {
            return Err(Error::invalid(format!(
                "columns {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let out: Vec<f64> = {
            let x = self.values();
            (0..m)
                .flat_map(|r| x[r * n + start..r * n + start + width].iter().copied())
                .collect()
        };
        Ok(Tensor::from_op(
            out,
            vec![m, width],
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat_cols of zero tensors"));
        };
        let (m, _) = matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(mismatch("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.values();
            for r in 0..m {
                out[r * n + offset..r * n + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            parts.to_vec(),
            Box::new(move |g, _, _, need| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (idx, &w) in widths.iter().enumerate() {
                    grads.push(need[idx].then(|| {
                        let mut d = vec![0.0; m * w];
                        for r in 0..m {
                            d[r * w..(r + 1) * w].copy_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Picks flat elements `idx` into a vector.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let len = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(format!("index {bad} out of range for {len} elements")));
        }
        let out: Vec<f64> = {
            let x = self.values();
            idx.iter().map(|&i| x[i]).collect()
        };
        let idx = idx.to_vec();
        let k = idx.len();
        Ok(Tensor::from_op(
            out,
            vec![k],
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; len];
                for (j, &i) in idx.iter().enumerate() {
                    d[i] += g[j];
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Flat element `i` as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        self.gather(&[i])?.reshape(&[])
    }

    /// Inner product of two equally sized tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.len() != other.len() {
            return Err(mismatch("dot", self.shape(), other.shape()));
        }
        let value = {
            let (a, b) = (self.values(), other.values());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        Ok(Tensor::from_op(
            vec![value],
            Vec::new(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p, need| {
                let da = need[0].then(|| p[1].values().iter().map(|b| b * g[0]).collect());
                let db = need[1].then(|| p[0].values().iter().map(|a| a * g[0]).collect());
                vec![da, db]
            }),
        ))
    }

    /// `u·v / (‖u‖‖v‖)`; errors when either norm is below [`EPS_NORM`].
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        if self.len() != other.len() {
            return Err(mismatch("cosine_similarity", self.shape(), other.shape()));
        }
        let (u, v) = (self.to_vec(), other.to_vec());
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for norm in [nu, nv] {
            // Written negated so a NaN norm is rejected too.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(norm >= EPS_NORM) {
                return Err(Error::DegenerateVector { norm, eps: EPS_NORM });
            }
        }
        let dotv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let c = dotv / (nu * nv);
        Ok(Tensor::from_op(
            vec![c],
            Vec::new(),
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _, need| {
                let grad_for = |a: &[f64], b: &[f64], na: f64| -> Vec<f64> {
                    a.iter()
                        .zip(b)
                        .map(|(ai, bi)| g[0] * (bi / (nu * nv) - c * ai / (na * na)))
                        .collect()
                };
                vec![
                    need[0].then(|| grad_for(&u, &v, nu)),
                    need[1].then(|| grad_for(&v, &u, nv)),
                ]
            }),
        ))
    }
}

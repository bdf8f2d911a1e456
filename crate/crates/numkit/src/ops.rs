use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy)]
enum Side {
    Same,
    /// rhs repeats along the leading axes of lhs
    RhsSmaller,
    /// lhs repeats along the leading axes of rhs
    LhsSmaller,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Side)> {
    if a == b {
        return Ok((a.to_vec(), Side::Same));
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Side::RhsSmaller));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Side::LhsSmaller));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sums a full-size gradient down to a repeating suffix of length `n`.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

fn zip_broadcast(a: &[f64], b: &[f64], side: Side, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match side {
        Side::Same => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        Side::RhsSmaller => {
            let mut out = Vec::with_capacity(a.len());
            for chunk in a.chunks_exact(b.len()) {
                out.extend(chunk.iter().zip(b).map(|(x, y)| f(*x, *y)));
            }
            out
        }
        Side::LhsSmaller => {
            let mut out = Vec::with_capacity(b.len());
            for chunk in b.chunks_exact(a.len()) {
                out.extend(a.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
            }
            out
        }
    }
}

/// Expands `small` cyclically to length `n` (suffix broadcasting).
fn expand(small: &[f64], n: usize) -> Vec<f64> {
    small.iter().copied().cycle().take(n).collect()
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // a is stored as m×k (or k×m when transposed); likewise b.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized for the requested strides, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| f(*v)).collect();
    let xc = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, out, _| {
            let gx = g
                .iter()
                .zip(xc.data())
                .zip(out)
                .map(|((g, x), y)| g * df(*x, *y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (g, a, b) -> (da, db)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        let (shape, side) = broadcast(op, self.shape(), other.shape())?;
        let data = zip_broadcast(self.data(), other.data(), side, f);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, needs| {
                let n = g.len();
                let av = match side {
                    Side::LhsSmaller => expand(a.data(), n),
                    _ => a.data().to_vec(),
                };
                let bv = match side {
                    Side::RhsSmaller => expand(b.data(), n),
                    _ => b.data().to_vec(),
                };
                let mut ga = Vec::with_capacity(if needs[0] { n } else { 0 });
                let mut gb = Vec::with_capacity(if needs[1] { n } else { 0 });
                for i in 0..n {
                    let (da, db) = df(g[i], av[i], bv[i]);
                    if needs[0] {
                        ga.push(da);
                    }
                    if needs[1] {
                        gb.push(db);
                    }
                }
                let ga = needs[0].then(|| match side {
                    Side::LhsSmaller => reduce_to(&ga, a.numel()),
                    _ => ga,
                });
                let gb = needs[1].then(|| match side {
                    Side::RhsSmaller => reduce_to(&gb, b.numel()),
                    _ => gb,
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Elementwise division; any zero in the denominator is an error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.binary(other, "div", |a, b| a / b, |g, a, b| (g / b, -g * a / (b * b)))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = unary(self, f64::exp, |_, y| y);
        if out.data().iter().any(|v| v.is_infinite()) {
            return Err(TensorError::Domain {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        Ok(out)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(unary(self, f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(unary(self, f64::sqrt, |_, y| 0.5 / y))
    }

    /// `x^c`; negative bases are rejected unless `c` is an integer.
    pub fn powf(&self, c: f64) -> Result<Tensor> {
        if c.fract() != 0.0 {
            if let Some(v) = self.data().iter().find(|v| **v < 0.0) {
                return Err(TensorError::Domain {
                    op: "powf",
                    detail: format!("negative base {v} with fractional exponent {c}"),
                });
            }
        }
        Ok(unary(self, |x| x.powf(c), move |x, _| c * x.powf(c - 1.0)))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    /// Log-gamma for positive inputs; gradient is the digamma function.
    pub fn lgamma(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "lgamma",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(unary(
            self,
            statrs::function::gamma::ln_gamma,
            |x, _| statrs::function::gamma::digamma(x),
        ))
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp(lo, f64::INFINITY)
    }

    /// Picks `self` where `mask` is true and `other` elsewhere.
    pub fn where_mask(&self, mask: &[bool], other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() || mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "where_mask",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = mask
            .iter()
            .zip(self.data().iter().zip(other.data()))
            .map(|(m, (a, b))| if *m { *a } else { *b })
            .collect();
        let m = mask.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, _| {
                let ga = g.iter().zip(&m).map(|(g, m)| if *m { *g } else { 0.0 }).collect();
                let gb = g.iter().zip(&m).map(|(g, m)| if *m { 0.0 } else { *g }).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Scales each last-axis row by one entry of `s`, whose shape is `self.shape()[..n-1]`.
    pub fn mul_rows(&self, s: &Tensor) -> Result<Tensor> {
        let nd = self.ndim();
        if nd == 0 || s.shape() != &self.shape()[..nd - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                lhs: self.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let d = self.shape()[nd - 1];
        let mut data = Vec::with_capacity(self.numel());
        for (row, f) in self.data().chunks_exact(d.max(1)).zip(s.data()) {
            data.extend(row.iter().map(|v| v * f));
        }
        let (x, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |g, _, needs| {
                let gx = needs[0].then(|| {
                    let mut out = Vec::with_capacity(g.len());
                    for (gr, f) in g.chunks_exact(d).zip(sc.data()) {
                        out.extend(gr.iter().map(|v| v * f));
                    }
                    out
                });
                let gs = needs[1].then(|| {
                    g.chunks_exact(d)
                        .zip(x.data().chunks_exact(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
                vec![gx, gs]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(TensorError::DivisionByZero { op: "mean_all" });
        }
        Ok(self.sum_all().mul_scalar(1.0 / self.numel() as f64))
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        match self.shape().last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::InvalidShape {
                op,
                shape: self.shape().to_vec(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    /// Sums the last axis away.
    pub fn sum_last(&self) -> Result<Tensor> {
        let d = self.last_dim("sum_last")?;
        let data = self.data().chunks_exact(d).map(|r| r.iter().sum()).collect();
        let shape = self.shape()[..self.ndim() - 1].to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gx = g.iter().flat_map(|v| std::iter::repeat_n(*v, d)).collect();
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_last(&self) -> Result<Tensor> {
        let d = self.last_dim("mean_last")?;
        Ok(self.sum_last()?.mul_scalar(1.0 / d as f64))
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        let d = self.last_dim("softmax_last")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        let d = self.last_dim("log_softmax_last")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..d {
                        out[i] = gr[i] - yr[i].exp() * s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `log Σ exp` over the last axis, which is removed.
    pub fn logsumexp_last(&self) -> Result<Tensor> {
        let d = self.last_dim("logsumexp_last")?;
        let data: Vec<f64> = self.data().chunks_exact(d).map(logsumexp).collect();
        let shape = self.shape()[..self.ndim() - 1].to_vec();
        let x = self.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; x.numel()];
                for (r, (xr, out)) in x.data().chunks_exact(d).zip(gx.chunks_exact_mut(d)).enumerate() {
                    for i in 0..d {
                        out[i] = g[r] * (xr[i] - y[r]).exp();
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn cumsum_last(&self) -> Result<Tensor> {
        let d = self.last_dim("cumsum_last")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = g.to_vec();
                for row in gx.chunks_exact_mut(d) {
                    let mut acc = 0.0;
                    for v in row.iter_mut().rev() {
                        acc += *v;
                        *v = acc;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either a single matrix shared by every leading index of `self`,
    /// or has exactly the same leading axes as `self`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);

        let mut data = vec![0.0; batch * m * n];
        if shared {
            gemm(batch * m, k, n, self.data(), false, rhs.data(), false, &mut data, 0.0);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &rhs.data()[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
        }

        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _, needs| {
                let mut ga = None;
                let mut gb = None;
                if shared {
                    let rows = batch * m;
                    if needs[0] {
                        let mut d = vec![0.0; rows * k];
                        gemm(rows, n, k, g, false, b.data(), true, &mut d, 0.0);
                        ga = Some(d);
                    }
                    if needs[1] {
                        let mut d = vec![0.0; k * n];
                        gemm(k, rows, n, a.data(), true, g, false, &mut d, 0.0);
                        gb = Some(d);
                    }
                } else {
                    if needs[0] {
                        let mut d = vec![0.0; batch * m * k];
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &b.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut d[bi * m * k..(bi + 1) * m * k],
                                0.0,
                            );
                        }
                        ga = Some(d);
                    }
                    if needs[1] {
                        let mut d = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &a.data()[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut d[bi * k * n..(bi + 1) * k * n],
                                0.0,
                            );
                        }
                        gb = Some(d);
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("bad axis order {axes:?}"),
            });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let index = permutation_index(&in_shape, axes);
        let data = index.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; g.len()];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "needs at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: self.shape().to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, dim, inner) = axis_split(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total_dim;
        let mut data = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _, needs| {
                let mut grads: Vec<Vec<f64>> = dims.iter().map(|d| Vec::with_capacity(outer * d * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &d) in grads.iter_mut().zip(&dims) {
                        gp.extend_from_slice(&g[pos..pos + d * inner]);
                        pos += d * inner;
                    }
                }
                grads.into_iter().zip(needs).map(|(g, n)| n.then_some(g)).collect()
            }),
        ))
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// For each output position of a permutation, the flat input index it reads.
fn permutation_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = in_shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        index.push(offset);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

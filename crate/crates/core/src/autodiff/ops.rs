//! Differentiable operations recorded on a [`Tape`].
//!
//! Every op computes its forward value eagerly and registers a closure that
//! maps the output gradient to parent gradients. Reductions and normalizers
//! that act "along the last axis" treat the tensor as `[outer, last]`.

use std::rc::Rc;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Floor applied to vector norms in [`Var::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `c = op(a) · op(b) + beta·c` with row-major storage; `m×k` times `k×n`.
/// A transposed operand is stored as its transpose (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked above.
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

/// `tanh` through a single `exp`; absolute error stays near 1e-16, which is
/// all the GELU needs, at a fraction of libm's cost.
fn fast_tanh(y: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * y).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    let t = fast_tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x));
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel / last.max(1), last)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    // Keeping the last axis in place lets whole rows be copied at once.
    let (walk, run) = if nd > 0 && axes[nd - 1] == nd - 1 {
        strides.pop();
        (nd - 1, shape[nd - 1])
    } else {
        (nd, 1)
    };
    let mut out = Vec::with_capacity(data.len());
    if run == 0 {
        return (out, out_shape);
    }
    let mut coord = vec![0usize; walk];
    let mut offset = 0usize;
    for _ in 0..data.len() / run {
        out.extend_from_slice(&data[offset..offset + run]);
        for d in (0..walk).rev() {
            coord[d] += 1;
            offset += strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    (out, out_shape)
}

impl<'t> Var<'t> {
    fn check_same(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &a, &b));
        }
        Ok(a)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn map(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.iter().map(|&v| f(v)).collect::<Vec<_>>());
        let yc = Rc::clone(&y);
        self.tape.push(
            self.shape(),
            y,
            &[self],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.iter().zip(yc.iter()))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.check_same(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.check_same(&other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let shape = self.check_same(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.iter()).map(|(g, y)| g * y).collect());
                let gb = needs[1].then(|| g.iter().zip(a.iter()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(gelu, |x, _| gelu_grad(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, |x, _| sigmoid(x))
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, last) = split_last(&shape);
        if bias.numel() != last {
            return Err(Error::shape("add_row", &shape, &bias.shape()));
        }
        let (x, b) = (self.value(), bias.value());
        let mut out = x.to_vec();
        for row in out.chunks_mut(last) {
            row.iter_mut().zip(b.iter()).for_each(|(o, b)| *o += b);
        }
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; last];
                    for row in g.chunks(last) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                let _ = outer;
                vec![needs[0].then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Multiplies by a vector along the last axis (gain broadcast).
    pub fn mul_row(self, gain: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        if gain.numel() != last {
            return Err(Error::shape("mul_row", &shape, &gain.shape()));
        }
        let (x, w) = (self.value(), gain.value());
        let mut out = x.to_vec();
        for row in out.chunks_mut(last) {
            row.iter_mut().zip(w.iter()).for_each(|(o, w)| *o *= w);
        }
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, gain],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(last) {
                        row.iter_mut().zip(w.iter()).for_each(|(o, w)| *o *= w);
                    }
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; last];
                    for (grow, xrow) in g.chunks(last).zip(x.chunks(last)) {
                        for ((acc, g), x) in gw.iter_mut().zip(grow).zip(xrow) {
                            *acc += g * x;
                        }
                    }
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Scales each slice along the leading axis by the matching entry of `c`.
    pub fn mul_col(self, c: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let rows = shape.first().copied().unwrap_or(1);
        if c.numel() != rows {
            return Err(Error::shape("mul_col", &shape, &c.shape()));
        }
        let inner = self.numel() / rows.max(1);
        let (x, s) = (self.value(), c.value());
        let mut out = x.to_vec();
        for (row, s) in out.chunks_mut(inner.max(1)).zip(s.iter()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.tape.push(
            shape,
            Rc::new(out),
            &[self, c],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = g.to_vec();
                    for (row, s) in gx.chunks_mut(inner.max(1)).zip(s.iter()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    gx
                });
                let gc = needs[1].then(|| {
                    g.chunks(inner.max(1))
                        .zip(x.chunks(inner.max(1)))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect()
                });
                vec![gx, gc]
            }),
        ))
    }

    fn matmul_impl(self, other: Var<'t>, b_t: bool, op: &'static str) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, b_t, &mut out, 0.0);
        Ok(self.tape.push(
            vec![m, n],
            Rc::new(out),
            &[self, other],
            Box::new(move |g, needs| {
                // dA = G · op(B)^T
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b, !b_t, &mut ga, 0.0);
                    ga
                });
                // dB = A^T · G, or G^T · A when B was used transposed
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    if b_t {
                        gemm(n, m, k, g, true, &a, false, &mut gb, 0.0);
                    } else {
                        gemm(k, m, n, &a, true, g, false, &mut gb, 0.0);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false, "matmul")
    }

    /// `[m,k] · [n,k]^T`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true, "matmul_nt")
    }

    fn bmm_impl(self, other: Var<'t>, b_t: bool, op: &'static str) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a[i * m * k..],
                false,
                &b[i * k * n..],
                b_t,
                &mut out[i * m * n..],
                0.0,
            );
        }
        Ok(self.tape.push(
            vec![batch, m, n],
            Rc::new(out),
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], !b_t, &mut ga[i * m * k..], 0.0);
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (gi, ai, gbi) = (&g[i * m * n..], &a[i * m * k..], &mut gb[i * k * n..]);
                        if b_t {
                            gemm(n, m, k, gi, true, ai, false, gbi, 0.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, gbi, 0.0);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched `[g,m,k] · [g,k,n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(other, false, "bmm")
    }

    /// Batched `[g,m,k] · [g,n,k]^T`.
    pub fn bmm_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.bmm_impl(other, true, "bmm_nt")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "transpose expects a matrix, got shape {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let (out, out_shape) = permute_data(&self.value(), &shape, axes);
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let gshape = out_shape.clone();
        Ok(self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| vec![Some(permute_data(g, &gshape, &inverse).0)]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let numel = self.numel();
        if shape.iter().product::<usize>() != numel {
            return Err(Error::shape("reshape", &self.shape(), shape));
        }
        Ok(self.tape.push(
            shape.to_vec(),
            self.value(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.numel();
        let s = self.value().iter().sum();
        self.tape.push(
            vec![1],
            Rc::new(vec![s]),
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums along the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let shape = self.shape();
        let (outer, last) = split_last(&shape);
        let out: Vec<f64> = self.value().chunks(last.max(1)).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        debug_assert_eq!(out.len(), outer);
        self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(outer * last);
                for &gi in g {
                    gx.extend(std::iter::repeat(gi).take(last));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_axis0(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let rows = shape[0];
        if rows == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        let inner = self.numel() / rows;
        let x = self.value();
        let mut out = vec![0.0; inner];
        for row in x.chunks(inner) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let out_shape = if shape.len() > 1 { shape[1..].to_vec() } else { vec![1] };
        Ok(self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(rows * inner);
                for _ in 0..rows {
                    gx.extend(g.iter().map(|v| v * inv));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax of `x / tau` along the last axis (max-subtracted).
    pub fn softmax(self, tau: f64) -> Result<Var<'t>> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {tau}")));
        }
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(last).zip(y.chunks_mut(last)) {
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = ((v - mx) / tau).exp();
                z += *o;
            }
            yr.iter_mut().for_each(|o| *o /= z);
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        Ok(self.tape.push(
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(last).zip(yc.chunks(last)).zip(gx.chunks_mut(last)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot) / tau;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `log softmax(x / tau)` along the last axis.
    pub fn log_softmax(self, tau: f64) -> Result<Var<'t>> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {tau}")));
        }
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        for (xr, yr) in x.chunks(last).zip(y.chunks_mut(last)) {
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = xr.iter().map(|&v| ((v - mx) / tau).exp()).sum::<f64>().ln();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mx) / tau - lse;
            }
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        Ok(self.tape.push(
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(last).zip(yc.chunks(last)).zip(gx.chunks_mut(last)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi.exp() * gsum) / tau;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `log Σ exp(x / tau)` along the last axis, dropping it.
    pub fn logsumexp(self, tau: f64) -> Result<Var<'t>> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!("logsumexp temperature must be > 0, got {tau}")));
        }
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        let x = self.value();
        let mut out = Vec::with_capacity(x.len() / last.max(1));
        let mut soft = vec![0.0; x.len()];
        for (xr, sr) in x.chunks(last).zip(soft.chunks_mut(last)) {
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (s, &v) in sr.iter_mut().zip(xr) {
                *s = ((v - mx) / tau).exp();
                z += *s;
            }
            sr.iter_mut().for_each(|s| *s /= z);
            out.push(mx / tau + z.ln());
        }
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        Ok(self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = soft.clone();
                for (row, &gi) in gx.chunks_mut(last).zip(g) {
                    row.iter_mut().for_each(|v| *v *= gi / tau);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Zero-mean, unit-variance normalization along the last axis (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / last.max(1));
        for (xr, yr) in x.chunks(last).zip(y.chunks_mut(last)) {
            let mean = xr.iter().sum::<f64>() / last as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        self.tape.push(
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                let n = last as f64;
                for (((gr, yr), out), &is) in g.chunks(last).zip(yc.chunks(last)).zip(gx.chunks_mut(last)).zip(&inv_std) {
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = is * (gi - gmean - yi * gy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Unit-L2 rows along the last axis; norms below `floor` are replaced by it.
    pub fn l2_normalize(self, floor: f64) -> Var<'t> {
        let shape = self.shape();
        let (_, last) = split_last(&shape);
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        let mut norms = Vec::with_capacity(x.len() / last.max(1));
        for (xr, yr) in x.chunks(last).zip(y.chunks_mut(last)) {
            let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = raw.max(floor);
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = v / n;
            }
            norms.push((n, raw >= floor));
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        self.tape.push(
            shape,
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), out), &(n, active)) in g.chunks(last).zip(yc.chunks(last)).zip(gx.chunks_mut(last)).zip(&norms) {
                    let dot = if active { gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() } else { 0.0 };
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / n;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape: &'t Tape = first.tape;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let values: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(tape.push(
            shape,
            Rc::new(out),
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Option<Vec<f64>>> = needs
                    .iter()
                    .zip(&lens)
                    .map(|(&n, &len)| n.then(|| Vec::with_capacity(outer * len * inner)))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        if let Some(gp) = gp {
                            gp.extend_from_slice(&g[offset..offset + len * inner]);
                        }
                        offset += len * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {end}) on axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let len = end - start;
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers entries of the leading axis; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("index {bad} out of range for leading axis {rows}")));
        }
        let inner = self.numel() / rows.max(1);
        let x = self.value();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(self.tape.push(
            out_shape,
            Rc::new(out),
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * inner];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g[k * inner..(k + 1) * inner];
                    gx[i * inner..(i + 1) * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Same value, detached from the graph.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape
            .constant_from(&self.shape(), self.value().to_vec())
            .expect("shape of existing node")
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(self) -> Var<'t> {
        self.tape.push(
            self.shape(),
            self.value(),
            &[self],
            Box::new(|g, _| vec![Some(g.iter().map(|v| -v).collect())]),
        )
    }
}

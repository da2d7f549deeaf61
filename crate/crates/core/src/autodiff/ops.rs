use super::conv;
use super::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output shape for a binary elementwise op: equal shapes, or one side holding a single element.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b || (numel(b) == 1 && a.len() >= b.len()) {
        Ok(a.to_vec())
    } else if numel(a) == 1 && b.len() >= a.len() {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

/// Sums `g` down to `shape` when `shape` was broadcast from a single element.
fn reduce_like(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::from_parts_unchecked(shape.to_vec(), vec![g.data().iter().sum()])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Tensor {
    match axis {
        None => Tensor::scalar(t.data().iter().sum()),
        Some(axis) => {
            let (outer, n, inner) = axis_split(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = t.data();
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    let row = &mut out[o * inner..(o + 1) * inner];
                    for (acc, v) in row.iter_mut().zip(&d[base..base + inner]) {
                        *acc += v;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts_unchecked(shape, out)
        }
    }
}

/// Broadcasts a reduced gradient back over `axis` of `shape`, scaled by `factor`.
fn expand_axis(g: &Tensor, shape: &[usize], axis: Option<usize>, factor: f64) -> Tensor {
    match axis {
        None => {
            let v = g.data()[0] * factor;
            Tensor::from_parts_unchecked(shape.to_vec(), vec![v; shape.iter().product()])
        }
        Some(axis) => {
            let (outer, n, inner) = axis_split(shape, axis);
            let mut out = Vec::with_capacity(outer * n * inner);
            let gd = g.data();
            for o in 0..outer {
                for _ in 0..n {
                    out.extend(gd[o * inner..(o + 1) * inner].iter().map(|v| v * factor));
                }
            }
            Tensor::from_parts_unchecked(shape.to_vec(), out)
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        Ok(Tensor::from_parts_unchecked(shape, data))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| -x);
        self.push(t, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.unary(a, |x| x * factor);
        self.push(t, Op::Scale(a, factor))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.add(a, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    /// Natural log. Non-positive inputs are an error; NaN passes through so that
    /// callers can report where a computation diverged.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let t = self.unary(a, f64::ln);
        Ok(self.push(t, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::from_parts_unchecked(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[r, c] = ta.shape() else {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", ta.shape())));
        };
        let data = transpose_raw(ta.data(), r, c);
        Ok(self.push(Tensor::from_parts_unchecked(vec![c, r], data), Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    fn check_axis(&self, a: Var, axis: Option<usize>) -> Result<()> {
        match axis {
            Some(ax) if ax >= self.value(a).rank() => Err(Error::dim(format!(
                "axis {ax} out of range for shape {:?}",
                self.shape(a)
            ))),
            _ => Ok(()),
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = reduce_sum(self.value(a), axis);
        Ok(self.push(t, Op::Sum(a, axis)))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let ta = self.value(a);
        let n = match axis {
            None => ta.numel(),
            Some(ax) => ta.shape()[ax],
        } as f64;
        let t = reduce_sum(ta, axis).map(|v| v / n);
        Ok(self.push(t, Op::Mean(a, axis)))
    }

    /// Valid cross-correlation. `input` is `[C,H,W]` or `[N,C,H,W]`, `kernels` is `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        let geom = conv::Geometry::forward(self.shape(input), self.shape(kernels), stride)?;
        let out = conv::conv2d(self.value(input).data(), self.value(kernels).data(), &geom);
        let shape = geom.output_shape(self.value(input).rank());
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Conv2d {
                input,
                kernels,
                stride,
            },
        ))
    }

    /// Transposed convolution. `input` is `[C,H,W]` or `[N,C,H,W]`, `kernels` is `[C,O,kh,kw]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        self.conv_transpose2d_padded(input, kernels, stride, (0, 0))
    }

    /// Transposed convolution with extra trailing rows/columns (`output_padding < stride`),
    /// used to land exactly on a target extent that a strided `conv2d` floored away.
    pub fn conv_transpose2d_padded(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let geom = conv::Geometry::transpose(
            self.shape(input),
            self.shape(kernels),
            stride,
            output_padding,
        )?;
        let out = conv::conv_transpose2d(self.value(input).data(), self.value(kernels).data(), &geom);
        let shape = geom.input_shape(self.value(input).rank());
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::ConvTranspose2d {
                input,
                kernels,
                stride,
            },
        ))
    }

    /// Row `r` of the result is row `r` of `candidates[choice[r]]`.
    ///
    /// Gradient reaches only the chosen rows; a candidate that is never chosen
    /// receives none.
    pub fn pick_rows(&mut self, choice: &[usize], candidates: &[Var]) -> Result<Var> {
        let first = *candidates
            .first()
            .ok_or_else(|| Error::contract("pick_rows needs at least one candidate"))?;
        let shape = self.shape(first).to_vec();
        if shape.first() != Some(&choice.len()) {
            return Err(Error::dim(format!(
                "pick_rows: {} choices for leading extent {:?}",
                choice.len(),
                shape.first()
            )));
        }
        if candidates.iter().any(|&c| self.shape(c) != shape.as_slice()) {
            return Err(Error::dim("pick_rows candidates differ in shape"));
        }
        if let Some(bad) = choice.iter().find(|&&c| c >= candidates.len()) {
            return Err(Error::contract(format!("pick_rows choice {bad} out of range")));
        }
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(choice.len() * width);
        for (r, &c) in choice.iter().enumerate() {
            data.extend_from_slice(&self.value(candidates[c]).data()[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, data),
            Op::PickRows {
                choice: choice.to_vec(),
                candidates: candidates.to_vec(),
            },
        ))
    }

    /// Gradients of node `i`'s inputs given the upstream gradient `g`.
    pub(crate) fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> (Var, Tensor) {
            // f(input, output, upstream)
            let x = self.value(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            (a, Tensor::from_parts_unchecked(x.shape().to_vec(), data))
        };
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_like(g.clone(), self.shape(*a))),
                (*b, reduce_like(g.clone(), self.shape(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_like(g.clone(), self.shape(*a))),
                (*b, reduce_like(g.map(|v| -v), self.shape(*b))),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = g.numel();
                let ga: Vec<f64> = (0..n).map(|i| g.data()[i] * at(tb, i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| g.data()[i] * at(ta, i)).collect();
                vec![
                    (
                        *a,
                        reduce_like(Tensor::from_parts_unchecked(g.shape().to_vec(), ga), ta.shape()),
                    ),
                    (
                        *b,
                        reduce_like(Tensor::from_parts_unchecked(g.shape().to_vec(), gb), tb.shape()),
                    ),
                ]
            }
            Op::Neg(a) => vec![(*a, g.map(|v| -v))],
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
            Op::Exp(a) => vec![elementwise(*a, &|_, y, gi| gi * y)],
            Op::Log(a) => vec![elementwise(*a, &|x, _, gi| gi / x)],
            Op::Relu(a) => vec![elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 })],
            Op::Sigmoid(a) => vec![elementwise(*a, &|_, y, gi| gi * y * (1.0 - y))],
            Op::Clamp(a, lo, hi) => vec![elementwise(*a, &|x, _, gi| {
                if x >= *lo && x <= *hi {
                    gi
                } else {
                    0.0
                }
            })],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose_raw(tb.data(), k, n);
                let at_ = transpose_raw(ta.data(), m, k);
                vec![
                    (
                        *a,
                        Tensor::from_parts_unchecked(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)),
                    ),
                    (
                        *b,
                        Tensor::from_parts_unchecked(vec![k, n], matmul_raw(&at_, g.data(), k, m, n)),
                    ),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                vec![(
                    *a,
                    Tensor::from_parts_unchecked(vec![c, r], transpose_raw(g.data(), r, c)),
                )]
            }
            Op::Reshape(a) => vec![(
                *a,
                Tensor::from_parts_unchecked(self.shape(*a).to_vec(), g.data().to_vec()),
            )],
            Op::Sum(a, axis) => vec![(*a, expand_axis(g, self.shape(*a), *axis, 1.0))],
            Op::Mean(a, axis) => {
                let shape = self.shape(*a);
                let n = match axis {
                    None => shape.iter().product::<usize>(),
                    Some(ax) => shape[*ax],
                } as f64;
                vec![(*a, expand_axis(g, shape, *axis, 1.0 / n))]
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
            } => {
                let geom = conv::Geometry::forward(self.shape(*input), self.shape(*kernels), *stride)?;
                let (gi, gk) = conv::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    &geom,
                );
                vec![
                    (*input, Tensor::from_parts_unchecked(self.shape(*input).to_vec(), gi)),
                    (*kernels, Tensor::from_parts_unchecked(self.shape(*kernels).to_vec(), gk)),
                ]
            }
            Op::ConvTranspose2d {
                input,
                kernels,
                stride,
            } => {
                let in_shape = self.shape(*input);
                let out_shape = out.shape();
                let r = out_shape.len();
                let geom = conv::Geometry::transpose_with_output(
                    in_shape,
                    self.shape(*kernels),
                    *stride,
                    (out_shape[r - 2], out_shape[r - 1]),
                )?;
                // The transposed conv is the adjoint of conv2d with the same geometry.
                let (gi, gk) = conv::conv_transpose2d_backward(
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    &geom,
                );
                vec![
                    (*input, Tensor::from_parts_unchecked(in_shape.to_vec(), gi)),
                    (*kernels, Tensor::from_parts_unchecked(self.shape(*kernels).to_vec(), gk)),
                ]
            }
            Op::PickRows { choice, candidates } => {
                let width = g.numel() / choice.len();
                let mut out = Vec::new();
                for (c, &cand) in candidates.iter().enumerate() {
                    if !choice.contains(&c) {
                        continue;
                    }
                    let mut data = vec![0.0; g.numel()];
                    for (r, _) in choice.iter().enumerate().filter(|(_, &ch)| ch == c) {
                        data[r * width..(r + 1) * width]
                            .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                    }
                    out.push((cand, Tensor::from_parts_unchecked(g.shape().to_vec(), data)));
                }
                out
            }
        };
        Ok(grads)
    }
}

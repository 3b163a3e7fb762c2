use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix2, IxDyn, Zip};

use super::{BatchStats, CustomOp, Graph, NormMode, Op, Tensor, Var, BN_EPS};
use crate::error::{invalid, Error, Result};

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// Rows of length `last` over a standard-layout tensor.
pub(crate) fn rows(t: &Tensor) -> ArrayView2<'_, f64> {
    let last = *t.shape().last().unwrap_or(&1);
    let n = t.len().checked_div(last).unwrap_or(0);
    t.view().into_shape_with_order((n, last)).expect("standard layout")
}

pub(crate) fn im2col(x: ArrayView2<'_, f64>, k: usize, padding: usize, out_len: usize) -> Array2<f64> {
    let (cin, len) = x.dim();
    let mut cols = Array2::zeros((cin * k, out_len));
    for c in 0..cin {
        for j in 0..k {
            let mut row = cols.row_mut(c * k + j);
            for t in 0..out_len {
                let src = t + j;
                if src >= padding && src - padding < len {
                    row[t] = x[[c, src - padding]];
                }
            }
        }
    }
    cols
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
    let (va, vb) = (g.value(a), g.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::Shape {
            op,
            shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
        });
    }
    Ok((va, vb))
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Shape {
            op,
            shapes: vec![t.shape().to_vec()],
        });
    }
    Ok(())
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = same_shape(self, "add", a, b)?;
        Ok(self.push(&*va + &*vb, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = same_shape(self, "sub", a, b)?;
        Ok(self.push(&*va - &*vb, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = same_shape(self, "mul", a, b)?;
        Ok(self.push(&*va * &*vb, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        self.push(&*v * factor, Op::Scale(a, factor), &[a])
    }

    /// Adds a scalar to every element.
    pub fn shift(&self, a: Var, offset: f64) -> Var {
        let v = self.value(a);
        self.push(&*v + offset, Op::Shift(a), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let out = view2(&va).dot(&view2(&vb)).into_dyn();
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation with stride 1: input `[n, c_in, len]`, weight
    /// `[c_out, c_in, k]`, optional bias `[c_out]`, zero padding on both ends.
    pub fn conv1d(&self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let mut shapes = vec![x.shape().to_vec(), w.shape().to_vec()];
        if let Some(b) = bias {
            shapes.push(self.shape(b));
        }
        let mismatch = || Error::Shape {
            op: "conv1d",
            shapes: shapes.clone(),
        };
        if x.ndim() != 3 || w.ndim() != 3 || x.shape()[1] != w.shape()[1] {
            return Err(mismatch());
        }
        let (n, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        if len + 2 * padding < k || k == 0 {
            return Err(mismatch());
        }
        let bias_value = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(mismatch());
                }
                Some(bv)
            }
            None => None,
        };
        let out_len = len + 2 * padding - k + 1;
        let w2 = w
            .view()
            .into_shape_with_order((cout, cin * k))
            .expect("standard layout");
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((n, cout, out_len));
        for i in 0..n {
            let cols = im2col(x3.index_axis(Axis(0), i), k, padding, out_len);
            let mut yi = out.index_axis_mut(Axis(0), i);
            yi.assign(&w2.dot(&cols));
            if let Some(bv) = &bias_value {
                for (o, mut row) in yi.axis_iter_mut(Axis(0)).enumerate() {
                    row += bv[[o]];
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out.into_dyn(),
            Op::Conv1d {
                input,
                weight,
                bias,
                padding,
            },
            &inputs,
        ))
    }

    /// Non-overlapping max pooling over the last axis. Trailing elements that
    /// do not fill a window are dropped; ties go to the lowest index.
    pub fn max_pool1d(&self, input: Var, width: usize) -> Result<Var> {
        let x = self.value(input);
        let len = *x.shape().last().unwrap_or(&0);
        if width == 0 || len < width {
            return Err(Error::Shape {
                op: "max_pool1d",
                shapes: vec![x.shape().to_vec()],
            });
        }
        let out_len = len / width;
        let r = rows(&x);
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_len;
        let mut out = Vec::with_capacity(r.nrows() * out_len);
        let mut argmax = Vec::with_capacity(r.nrows() * out_len);
        for (ri, row) in r.outer_iter().enumerate() {
            for t in 0..out_len {
                let mut best = t * width;
                for j in t * width + 1..(t + 1) * width {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(ri * len + best);
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        Ok(self.push(out, Op::MaxPool1d { input, argmax }, &[input]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v.mapv(|x| x.max(0.0)), Op::Relu(a), &[a])
    }

    /// Per-channel normalization of `[n, c]` or `[n, c, len]` followed by the
    /// affine map `gamma * x_hat + beta`.
    pub fn batch_norm(&self, input: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<Var> {
        let x = self.value(input);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let bad = || Error::Shape {
            op: "batch_norm",
            shapes: vec![x.shape().to_vec(), gv.shape().to_vec(), bv.shape().to_vec()],
        };
        if !(x.ndim() == 2 || x.ndim() == 3) {
            return Err(bad());
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let len = if x.ndim() == 3 { x.shape()[2] } else { 1 };
        if gv.shape() != [c] || bv.shape() != [c] || n * len == 0 {
            return Err(bad());
        }
        let x3 = x.view().into_shape_with_order((n, c, len)).unwrap();
        let count = n * len;
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let lane = x3.slice(s![.., ch, ..]);
                    let m = lane.sum() / count as f64;
                    let v = lane.fold(0.0, |acc, &z| acc + (z - m) * (z - m)) / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(bad());
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut normalized = ndarray::Array3::<f64>::zeros((n, c, len));
        let mut out = ndarray::Array3::<f64>::zeros((n, c, len));
        for ch in 0..c {
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gv[[ch]], bv[[ch]]);
            Zip::from(normalized.slice_mut(s![.., ch, ..]))
                .and(out.slice_mut(s![.., ch, ..]))
                .and(x3.slice(s![.., ch, ..]))
                .for_each(|nh, o, &z| {
                    *nh = (z - m) * is;
                    *o = ga * *nh + be;
                });
        }
        let shape = x.shape().to_vec();
        let normalized = normalized.into_shape_with_order(IxDyn(&shape)).unwrap();
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// `x [n, in]`, `weight [out, in]`, `bias [out]` -> `x weight^T + bias`.
    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(Error::Shape {
                op: "linear",
                shapes: vec![x.shape().to_vec(), w.shape().to_vec(), b.shape().to_vec()],
            });
        }
        let mut out = view2(&x).dot(&view2(&w).t());
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in out.outer_iter_mut() {
            row += &b1;
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Linear { input, weight, bias },
            &[input, weight, bias],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = (*v).clone();
        for mut row in out.lanes_mut(Axis(v.ndim().max(1) - 1)) {
            let m = row.fold(f64::NEG_INFINITY, |acc, &z| acc.max(z));
            row.mapv_inplace(|z| (z - m).exp());
            let s = row.sum();
            row.mapv_inplace(|z| z / s);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis, computed with the max shift.
    pub fn log_softmax(&self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = (*v).clone();
        for mut row in out.lanes_mut(Axis(v.ndim().max(1) - 1)) {
            let m = row.fold(f64::NEG_INFINITY, |acc, &z| acc.max(z));
            let lse = m + row.fold(0.0, |acc, &z| acc + (z - m).exp()).ln();
            row.mapv_inplace(|z| z - lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    pub fn log(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v.mapv(f64::ln), Op::Log(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v.mapv(f64::exp), Op::Exp(a), &[a])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(ndarray::arr0(v.sum()).into_dyn(), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        self.push(ndarray::arr0(m).into_dyn(), Op::Mean(a), &[a])
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() {
            return Err(invalid(format!("sum_axis: axis {axis} on rank {}", v.ndim())));
        }
        Ok(self.push(v.sum_axis(Axis(axis)), Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() || v.shape()[axis] == 0 {
            return Err(invalid(format!("mean_axis: axis {axis} on shape {:?}", v.shape())));
        }
        let out = v.sum_axis(Axis(axis)) / v.shape()[axis] as f64;
        Ok(self.push(out, Op::MeanAxis(a, axis), &[a]))
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient flows only strictly inside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(invalid(format!("clamp bounds [{lo}, {hi}]")));
        }
        let v = self.value(a);
        Ok(self.push(v.mapv(|z| z.clamp(lo, hi)), Op::Clamp { input: a, lo, hi }, &[a]))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() == 0 {
            return Err(Error::Shape {
                op: "l2_norm",
                shapes: vec![vec![]],
            });
        }
        let out = v.map_axis(Axis(v.ndim() - 1), |lane| lane.dot(&lane).sqrt());
        Ok(self.push(out, Op::L2Norm(a), &[a]))
    }

    /// Pairwise cosine similarity between the rows of `a [n, d]` and `b [m, d]`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(Error::Shape {
                op: "cosine_similarity",
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let unit = |t: &Tensor, which: &str| -> Result<(Tensor, Array1<f64>)> {
            let t2 = view2(t);
            let norms = t2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
            if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
                return Err(invalid(format!(
                    "cosine_similarity: row {i} of {which} has zero or non-finite norm"
                )));
            }
            let mut u = t2.to_owned();
            for (mut row, &n) in u.outer_iter_mut().zip(norms.iter()) {
                row /= n;
            }
            Ok((u.into_dyn(), norms))
        };
        let (a_unit, a_norm) = unit(&va, "a")?;
        let (b_unit, b_norm) = unit(&vb, "b")?;
        let out = view2(&a_unit).dot(&view2(&b_unit).t()).into_dyn();
        Ok(self.push(
            out,
            Op::Cosine {
                a,
                b,
                a_unit,
                b_unit,
                a_norm,
                b_norm,
            },
            &[a, b],
        ))
    }

    /// Slices `[n, t]` into overlapping windows `[n, frames, window]`.
    pub fn frames(&self, input: Var, window: usize, hop: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("frames", &x, 2)?;
        if window == 0 || hop == 0 {
            return Err(invalid("frames: window and hop must be positive"));
        }
        let (n, t) = (x.shape()[0], x.shape()[1]);
        if t < window {
            return Err(Error::InputTooShort {
                len: t,
                required: window,
            });
        }
        let count = (t - window) / hop + 1;
        let x2 = view2(&x);
        let mut out = ndarray::Array3::<f64>::zeros((n, count, window));
        for i in 0..n {
            for f in 0..count {
                out.slice_mut(s![i, f, ..])
                    .assign(&x2.slice(s![i, f * hop..f * hop + window]));
            }
        }
        Ok(self.push(out.into_dyn(), Op::Frames { input, window, hop }, &[input]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Shape {
                op: "reshape",
                shapes: vec![v.shape().to_vec(), shape.to_vec()],
            });
        }
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if axes.len() != v.ndim() || seen.iter().enumerate().any(|(i, &x)| i != x) {
            return Err(invalid(format!("permute: axes {axes:?} for rank {}", v.ndim())));
        }
        let out = v.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        Ok(self.push(
            out,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Selects `x[i, index[i]]` from `x [n, k]`.
    pub fn pick(&self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        expect_rank("pick", &v, 2)?;
        let (n, k) = (v.shape()[0], v.shape()[1]);
        if index.len() != n {
            return Err(Error::Shape {
                op: "pick",
                shapes: vec![v.shape().to_vec(), vec![index.len()]],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let v2 = view2(&v);
        let out: Array1<f64> = index.iter().enumerate().map(|(i, &j)| v2[[i, j]]).collect();
        Ok(self.push(
            out.into_dyn(),
            Op::Pick {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// Row-wise `max_{j != index[i]} x[i, j]`, ties to the lowest index.
    pub fn max_except(&self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        expect_rank("max_except", &v, 2)?;
        let (n, k) = (v.shape()[0], v.shape()[1]);
        if k < 2 {
            return Err(invalid("max_except needs at least two columns"));
        }
        if index.len() != n {
            return Err(Error::Shape {
                op: "max_except",
                shapes: vec![v.shape().to_vec(), vec![index.len()]],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let v2 = view2(&v);
        let mut argmax = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for (i, &skip) in index.iter().enumerate() {
            let mut best = usize::MAX;
            for j in 0..k {
                if j != skip && (best == usize::MAX || v2[[i, j]] > v2[[i, best]]) {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(v2[[i, best]]);
        }
        Ok(self.push(Array1::from(out).into_dyn(), Op::MaxExcept { input: a, argmax }, &[a]))
    }

    pub fn custom(&self, a: Var, op: Rc<dyn CustomOp>) -> Var {
        let v = self.value(a);
        let out = op.forward(&v);
        self.push(out, Op::Custom { input: a, op }, &[a])
    }
}

use ndarray::{s, Array2, Axis, Ix1, Ix3, IxDyn, Zip};

use super::ops::{im2col, view2};
use super::{Graph, Node, Op, Tensor, Var};
use crate::error::{Error, Result};

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: Vec<Option<Tensor>>,
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

impl Graph {
    /// Reverse pass from a single-element `loss`.
    ///
    /// Afterwards [`Graph::grad`] returns `d loss / d v` for every node that
    /// depends on a `requires_grad` leaf. Calling it again recomputes from scratch.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut acc = Accumulator {
            nodes: &nodes,
            grads: vec![None; nodes.len()],
        };
        if nodes[loss.0].requires_grad {
            acc.grads[loss.0] = Some(Tensor::ones(loss_value.raw_dim()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = acc.grads[idx].clone() else {
                continue;
            };
            propagate(&mut acc, idx, gy);
        }
        *self.grads.borrow_mut() = acc.grads;
        Ok(())
    }
}

fn propagate(acc: &mut Accumulator<'_>, idx: usize, gy: Tensor) {
    let node = &acc.nodes[idx];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(*b, gy.clone());
            acc.add(*a, gy);
        }
        Op::Sub(a, b) => {
            acc.add(*b, -&gy);
            acc.add(*a, gy);
        }
        Op::Mul(a, b) => {
            let ga = acc.wants(*a).then(|| &gy * acc.value(*b));
            let gb = acc.wants(*b).then(|| &gy * acc.value(*a));
            if let Some(g) = ga {
                acc.add(*a, g);
            }
            if let Some(g) = gb {
                acc.add(*b, g);
            }
        }
        Op::Scale(a, f) => acc.add(*a, gy * *f),
        Op::Shift(a) => acc.add(*a, gy),
        Op::MatMul(a, b) => {
            let g2 = view2(&gy);
            if acc.wants(*a) {
                let ga = g2.dot(&view2(acc.value(*b)).t()).into_dyn();
                acc.add(*a, ga);
            }
            if acc.wants(*b) {
                let gb = view2(acc.value(*a)).t().dot(&g2).into_dyn();
                acc.add(*b, gb);
            }
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            padding,
        } => conv1d_backward(acc, &gy, *input, *weight, *bias, *padding),
        Op::MaxPool1d { input, argmax } => {
            let x = acc.value(*input);
            let mut gx = vec![0.0; x.len()];
            for (&src, &g) in argmax.iter().zip(gy.iter()) {
                gx[src] += g;
            }
            let gx = Tensor::from_shape_vec(x.raw_dim(), gx).unwrap();
            acc.add(*input, gx);
        }
        Op::Relu(a) => {
            let mut gx = gy;
            Zip::from(&mut gx).and(acc.value(*a)).for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0;
                }
            });
            acc.add(*a, gx);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
            stats,
        } => {
            let shape = gy.shape().to_vec();
            let (n, c) = (shape[0], shape[1]);
            let len = if shape.len() == 3 { shape[2] } else { 1 };
            let g3 = gy.view().into_shape_with_order((n, c, len)).unwrap();
            let xh = normalized.view().into_shape_with_order((n, c, len)).unwrap();
            let gamma_v = acc.value(*gamma).clone();
            let mut dgamma = ndarray::Array1::<f64>::zeros(c);
            let mut dbeta = ndarray::Array1::<f64>::zeros(c);
            for ch in 0..c {
                let gl = g3.slice(s![.., ch, ..]);
                dbeta[ch] = gl.sum();
                dgamma[ch] = Zip::from(gl)
                    .and(xh.slice(s![.., ch, ..]))
                    .fold(0.0, |a, &g, &h| a + g * h);
            }
            if acc.wants(*input) {
                let mut gx = ndarray::Array3::<f64>::zeros((n, c, len));
                for ch in 0..c {
                    let scale = gamma_v[[ch]] * inv_std[ch];
                    let gl = g3.slice(s![.., ch, ..]);
                    let hl = xh.slice(s![.., ch, ..]);
                    match stats {
                        Some(st) => {
                            let m = st.count as f64;
                            let (sg, sgh) = (dbeta[ch], dgamma[ch]);
                            Zip::from(gx.slice_mut(s![.., ch, ..]))
                                .and(gl)
                                .and(hl)
                                .for_each(|o, &g, &h| {
                                    *o = scale / m * (m * g - sg - h * sgh);
                                });
                        }
                        None => {
                            Zip::from(gx.slice_mut(s![.., ch, ..]))
                                .and(gl)
                                .for_each(|o, &g| *o = scale * g);
                        }
                    }
                }
                acc.add(*input, gx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }
            acc.add(*gamma, dgamma.into_dyn());
            acc.add(*beta, dbeta.into_dyn());
        }
        Op::Linear { input, weight, bias } => {
            let g2 = view2(&gy);
            if acc.wants(*input) {
                let gx = g2.dot(&view2(acc.value(*weight))).into_dyn();
                acc.add(*input, gx);
            }
            if acc.wants(*weight) {
                let gw = g2.t().dot(&view2(acc.value(*input))).into_dyn();
                acc.add(*weight, gw);
            }
            acc.add(*bias, g2.sum_axis(Axis(0)).into_dyn());
        }
        Op::Softmax(a) => {
            let mut gx = gy;
            let last = Axis(y.ndim().max(1) - 1);
            for (mut g, p) in gx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                let dot = g.dot(&p);
                Zip::from(&mut g).and(&p).for_each(|gi, &pi| *gi = pi * (*gi - dot));
            }
            acc.add(*a, gx);
        }
        Op::LogSoftmax(a) => {
            let mut gx = gy;
            let last = Axis(y.ndim().max(1) - 1);
            for (mut g, ly) in gx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                let total = g.sum();
                Zip::from(&mut g).and(&ly).for_each(|gi, &l| *gi -= l.exp() * total);
            }
            acc.add(*a, gx);
        }
        Op::Log(a) => {
            let gx = &gy / acc.value(*a);
            acc.add(*a, gx);
        }
        Op::Exp(a) => acc.add(*a, gy * &**y),
        Op::Sum(a) => {
            let g = *gy.iter().next().unwrap();
            let gx = Tensor::from_elem(acc.value(*a).raw_dim(), g);
            acc.add(*a, gx);
        }
        Op::Mean(a) => {
            let x = acc.value(*a);
            let g = *gy.iter().next().unwrap() / x.len() as f64;
            acc.add(*a, Tensor::from_elem(x.raw_dim(), g));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = acc.value(*a);
            let mut g = gy.insert_axis(Axis(*axis));
            if matches!(node.op, Op::MeanAxis(..)) {
                g /= x.shape()[*axis] as f64;
            }
            let gx = g.broadcast(x.raw_dim()).unwrap().to_owned();
            acc.add(*a, gx);
        }
        Op::Clamp { input, lo, hi } => {
            let mut gx = gy;
            Zip::from(&mut gx).and(acc.value(*input)).for_each(|g, &x| {
                if !(x > *lo && x < *hi) {
                    *g = 0.0;
                }
            });
            acc.add(*input, gx);
        }
        Op::L2Norm(a) => {
            let x = acc.value(*a);
            let last = Axis(x.ndim() - 1);
            let mut gx = x.clone();
            for ((mut lane, &n), &g) in gx.lanes_mut(last).into_iter().zip(y.iter()).zip(gy.iter()) {
                if n == 0.0 {
                    lane.fill(0.0);
                } else {
                    lane.mapv_inplace(|v| g * v / n);
                }
            }
            acc.add(*a, gx);
        }
        Op::Cosine {
            a,
            b,
            a_unit,
            b_unit,
            a_norm,
            b_norm,
        } => {
            let g2 = view2(&gy);
            let (au, bu) = (view2(a_unit), view2(b_unit));
            let unit_grad = |g_unit: Array2<f64>, unit: ndarray::ArrayView2<'_, f64>, norm: &ndarray::Array1<f64>| {
                let mut out = g_unit;
                for ((mut row, u), &n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norm.iter()) {
                    let radial = row.dot(&u);
                    Zip::from(&mut row)
                        .and(&u)
                        .for_each(|r, &ui| *r = (*r - radial * ui) / n);
                }
                out.into_dyn()
            };
            if acc.wants(*a) {
                let ga = unit_grad(g2.dot(&bu), au, a_norm);
                acc.add(*a, ga);
            }
            if acc.wants(*b) {
                let gb = unit_grad(g2.t().dot(&au), bu, b_norm);
                acc.add(*b, gb);
            }
        }
        Op::Frames { input, window, hop } => {
            let x = acc.value(*input);
            let mut gx = Array2::<f64>::zeros((x.shape()[0], x.shape()[1]));
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            for i in 0..g3.shape()[0] {
                for f in 0..g3.shape()[1] {
                    let mut dst = gx.slice_mut(s![i, f * hop..f * hop + window]);
                    dst += &g3.slice(s![i, f, ..]);
                }
            }
            acc.add(*input, gx.into_dyn());
        }
        Op::Reshape(a) => {
            let shape = acc.value(*a).shape().to_vec();
            acc.add(*a, gy.into_shape_with_order(IxDyn(&shape)).unwrap());
        }
        Op::Permute { input, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let gx = gy.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            acc.add(*input, gx);
        }
        Op::Pick { input, index } => {
            let mut gx = Tensor::zeros(acc.value(*input).raw_dim());
            for (i, (&j, &g)) in index.iter().zip(gy.iter()).enumerate() {
                gx[[i, j]] += g;
            }
            acc.add(*input, gx);
        }
        Op::MaxExcept { input, argmax } => {
            let mut gx = Tensor::zeros(acc.value(*input).raw_dim());
            for (i, (&j, &g)) in argmax.iter().zip(gy.iter()).enumerate() {
                gx[[i, j]] += g;
            }
            acc.add(*input, gx);
        }
        Op::Custom { input, op } => {
            let gx = op.backward(acc.value(*input), y, &gy);
            acc.add(*input, gx);
        }
    }
}

fn conv1d_backward(acc: &mut Accumulator<'_>, gy: &Tensor, input: Var, weight: Var, bias: Option<Var>, padding: usize) {
    let x = acc.value(input).view().into_dimensionality::<Ix3>().unwrap();
    let w = acc.value(weight);
    let (n, cin, len) = x.dim();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
    let out_len = g3.shape()[2];
    let w2 = w.view().into_shape_with_order((cout, cin * k)).unwrap();
    let want_x = acc.wants(input);
    let want_w = acc.wants(weight);
    let mut gw = Array2::<f64>::zeros((cout, cin * k));
    let mut gx = ndarray::Array3::<f64>::zeros((n, cin, len));
    for i in 0..n {
        let gi = g3.index_axis(Axis(0), i);
        if want_w {
            let cols = im2col(x.index_axis(Axis(0), i), k, padding, out_len);
            gw += &gi.dot(&cols.t());
        }
        if want_x {
            let gcols = w2.t().dot(&gi);
            let mut dst = gx.index_axis_mut(Axis(0), i);
            for c in 0..cin {
                for j in 0..k {
                    let row = gcols.row(c * k + j);
                    for t in 0..out_len {
                        let src = t + j;
                        if src >= padding && src - padding < len {
                            dst[[c, src - padding]] += row[t];
                        }
                    }
                }
            }
        }
    }
    if want_x {
        acc.add(input, gx.into_dyn());
    }
    if want_w {
        acc.add(weight, gw.into_shape_with_order(IxDyn(&[cout, cin, k])).unwrap());
    }
    if let Some(b) = bias {
        let gb = g3.sum_axis(Axis(2)).sum_axis(Axis(0));
        acc.add(b, gb.into_dimensionality::<Ix1>().unwrap().into_dyn());
    }
}

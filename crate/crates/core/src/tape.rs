//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node that
//! requires them. All training in this workspace — captioner, editor,
//! diffusion, bridge, perception — runs through this one engine, which keeps
//! the finite-difference gradient checks meaningful end to end.
//!
//! Gradients flow to intermediate nodes as well as leaves; the editor module
//! relies on that to read gradients of edited weight matrices that are
//! themselves tape products.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads[var.id].as_ref()
    }

    /// Gradient for `var`, or zeros of its shape when the node was never
    /// reached (e.g. a parameter unused by the loss).
    pub fn get_or_zeros(&self, var: Var<'_>) -> ArrayD<f64> {
        match self.grads[var.id].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(var.value().raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient computation (frozen weights, data).
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a 0-d loss node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        assert!(
            loss.value().ndim() == 0,
            "backward seed must be a 0-d scalar"
        );
        let n = self.nodes.borrow().len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let nodes = self.nodes.borrow();
            let node = &nodes[id];
            if let Some(back) = &node.back {
                back(&grad_out, &mut |parent, contrib| {
                    if !nodes[parent].requires_grad {
                        return;
                    }
                    match &mut grads[parent] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            grads[id] = Some(grad_out);
        }
        Grads { grads }
    }
}

fn unary<'t>(
    x: Var<'t>,
    value: ArrayD<f64>,
    back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
) -> Var<'t> {
    let req = x.tape.requires(x.id);
    let id = x.id;
    let back_fn: Option<BackFn> = if req {
        Some(Box::new(move |g, acc| acc(id, back(g))))
    } else {
        None
    };
    x.tape.push(value, req, back_fn)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert!(v.ndim() == 0, "scalar_value on non-scalar");
        *v.first().unwrap()
    }

    fn binary(
        self,
        rhs: Var<'t>,
        value: ArrayD<f64>,
        back_l: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
        back_r: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var<'t> {
        let (req_l, req_r) = (self.tape.requires(self.id), self.tape.requires(rhs.id));
        let (lid, rid) = (self.id, rhs.id);
        let back_fn: Option<BackFn> = if req_l || req_r {
            Some(Box::new(move |g, acc| {
                if req_l {
                    acc(lid, back_l(g));
                }
                if req_r {
                    acc(rid, back_r(g));
                }
            }))
        } else {
            None
        };
        self.tape.push(value, req_l || req_r, back_fn)
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = &*self.value() + &*rhs.value();
        self.binary(rhs, value, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = &*self.value() - &*rhs.value();
        self.binary(rhs, value, |g| g.clone(), |g| -g)
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let (lv, rv) = (self.value(), rhs.value());
        let value = &*lv * &*rv;
        let (lv2, rv2) = (Rc::clone(&lv), Rc::clone(&rv));
        self.binary(rhs, value, move |g| g * &*rv2, move |g| g * &*lv2)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let (lv, rv) = (self.value(), rhs.value());
        let value = &*lv / &*rv;
        let (lv2, rv2, rv3) = (Rc::clone(&lv), Rc::clone(&rv), Rc::clone(&rv));
        self.binary(
            rhs,
            value,
            move |g| g / &*rv2,
            move |g| -(g * &*lv2) / (&*rv3 * &*rv3),
        )
    }

    pub fn neg(self) -> Var<'t> {
        let value = -&*self.value();
        unary(self, value, |g| -g)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let value = &*self.value() + s;
        unary(self, value, |g| g.clone())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let value = &*self.value() * s;
        unary(self, value, move |g| g * s)
    }

    /// Multiply a tensor by a 0-d scalar node (gradients flow to both).
    pub fn scale(self, s: Var<'t>) -> Var<'t> {
        assert!(s.value().ndim() == 0, "scale: rhs must be 0-d");
        let (xv, sv) = (self.value(), s.scalar_value());
        let value = &*xv * sv;
        let xv2 = Rc::clone(&xv);
        self.binary(
            s,
            value,
            move |g| g * sv,
            move |g| ArrayD::from_elem(IxDyn(&[]), (g * &*xv2).sum()),
        )
    }

    /// Row-broadcast add: `(n, d) + (d,)`.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let bv = bias.value();
        assert_eq!(xv.ndim(), 2, "add_row: lhs must be 2-d");
        assert_eq!(bv.ndim(), 1, "add_row: rhs must be 1-d");
        assert_eq!(xv.shape()[1], bv.shape()[0], "add_row: dim mismatch");
        let b1 = bv.view().into_shape_with_order((1, bv.shape()[0])).unwrap();
        let value = (&xv.view().into_dimensionality::<ndarray::Ix2>().unwrap() + &b1).into_dyn();
        self.binary(
            bias,
            value,
            |g| g.clone(),
            |g| g.sum_axis(Axis(0)).into_dyn(),
        )
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (lv, rv) = (self.value(), rhs.value());
        assert_eq!(lv.ndim(), 2, "matmul: lhs must be 2-d");
        assert_eq!(rv.ndim(), 2, "matmul: rhs must be 2-d");
        assert_eq!(
            lv.shape()[1],
            rv.shape()[0],
            "matmul: inner dims {:?} x {:?}",
            lv.shape(),
            rv.shape()
        );
        let a = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = rv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let value = a.dot(&b).into_dyn();
        let (lv2, rv2) = (Rc::clone(&lv), Rc::clone(&rv));
        self.binary(
            rhs,
            value,
            move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b = rv2.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                g2.dot(&b.t()).into_dyn()
            },
            move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a = lv2.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                a.t().dot(&g2).into_dyn()
            },
        )
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "t: input must be 2-d");
        let value = v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .t()
            .to_owned()
            .into_dyn();
        unary(self, value, |g| {
            g.view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .t()
                .to_owned()
                .into_dyn()
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old_shape: Vec<usize> = v.shape().to_vec();
        let value = v
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        unary(self, value, move |g| {
            g.to_owned()
                .into_shape_with_order(IxDyn(&old_shape))
                .unwrap()
        })
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape: Vec<usize> = v.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), v.sum());
        unary(self, value, move |g| {
            ArrayD::from_elem(IxDyn(&shape), *g.first().unwrap())
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Mean over rows of a 2-d tensor: `(n, d) -> (d,)`.
    pub fn mean_rows(self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "mean_rows: input must be 2-d");
        let n = v.shape()[0];
        let value = (v.sum_axis(Axis(0)) / n as f64).into_dyn();
        unary(self, value, move |g| {
            let d = g.shape()[0];
            let mut out = ArrayD::zeros(IxDyn(&[n, d]));
            let row = g / n as f64;
            for mut r in out.rows_mut() {
                r.assign(&row.view().into_dimensionality::<ndarray::Ix1>().unwrap());
            }
            out
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().mapv(f64::tanh);
        let y = Rc::new(value.clone());
        unary(self, value, move |g| g * &(1.0 - &*y * &*y))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y = Rc::new(value.clone());
        unary(self, value, move |g| g * &(&*y * &(1.0 - &*y)))
    }

    pub fn silu(self) -> Var<'t> {
        let xv = self.value();
        let sig = xv.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let value = &*xv * &sig;
        let (xv2, sig2) = (Rc::clone(&xv), Rc::new(sig));
        unary(self, value, move |g| {
            g * &(&*sig2 * &(1.0 + &*xv2 * &(1.0 - &*sig2)))
        })
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().mapv(f64::exp);
        let y = Rc::new(value.clone());
        unary(self, value, move |g| g * &*y)
    }

    pub fn ln(self) -> Var<'t> {
        let xv = self.value();
        let value = xv.mapv(f64::ln);
        let xv2 = Rc::clone(&xv);
        unary(self, value, move |g| g / &*xv2)
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().mapv(f64::sqrt);
        let y = Rc::new(value.clone());
        unary(self, value, move |g| g / &(&*y * 2.0))
    }

    /// Row-wise softmax of a 2-d tensor.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "softmax_rows: input must be 2-d");
        let mut value = v.to_owned();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(value.clone());
        unary(self, value, move |g| {
            let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = g2.to_owned();
            for (mut orow, (yrow, grow)) in
                out.rows_mut().into_iter().zip(y2.rows().into_iter().zip(g2.rows()))
            {
                let dot = yrow.dot(&grow);
                for (o, (&yv, &gv)) in orow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                    *o = yv * (gv - dot);
                }
            }
            out.into_dyn()
        })
    }

    /// Row-wise log-softmax of a 2-d tensor.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "log_softmax_rows: input must be 2-d");
        let mut value = v.to_owned();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let y = Rc::new(value.clone());
        unary(self, value, move |g| {
            let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = g2.to_owned();
            for (mut orow, (yrow, grow)) in
                out.rows_mut().into_iter().zip(y2.rows().into_iter().zip(g2.rows()))
            {
                let gsum: f64 = grow.sum();
                for (o, (&yv, &gv)) in orow.iter_mut().zip(yrow.iter().zip(grow.iter())) {
                    *o = gv - yv.exp() * gsum;
                }
            }
            out.into_dyn()
        })
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax
    /// of `self` (logits, one row per position).
    pub fn nll_rows(self, targets: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "nll_rows: logits must be 2-d");
        assert_eq!(v.shape()[0], targets.len(), "nll_rows: row count mismatch");
        let logits = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut soft = logits.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            loss -= row[targets[i]] - lse;
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let soft = Rc::new(soft);
        let targets: Vec<usize> = targets.to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), loss);
        unary(self, value, move |g| {
            let scale = *g.first().unwrap();
            let mut out = soft.to_owned();
            for (i, &t) in targets.iter().enumerate() {
                out[(i, t)] -= 1.0;
            }
            (out * scale).into_dyn()
        })
    }

    /// Embedding lookup: rows of `self` (a `(vocab, d)` table) at `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "gather_rows: table must be 2-d");
        let (vocab, d) = (v.shape()[0], v.shape()[1]);
        let table = v.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (mut row, &id) in value.rows_mut().into_iter().zip(ids.iter()) {
            assert!(id < vocab, "gather_rows: id out of range");
            row.assign(&table.row(id));
        }
        let ids: Vec<usize> = ids.to_vec();
        unary(self, value.into_dyn(), move |g| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = ndarray::Array2::<f64>::zeros((vocab, d));
            for (grow, &id) in g2.rows().into_iter().zip(ids.iter()) {
                let mut orow = out.row_mut(id);
                orow += &grow;
            }
            out.into_dyn()
        })
    }

    /// Concatenate 2-d tensors along rows.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let tape = parts[0].tape;
        let values: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|p| p.value()).collect();
        let d = values[0].shape()[1];
        let total: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut value = ndarray::Array2::<f64>::zeros((total, d));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for v in &values {
            let rows = v.shape()[0];
            value
                .slice_mut(ndarray::s![offset..offset + rows, ..])
                .assign(&v.view().into_dimensionality::<ndarray::Ix2>().unwrap());
            spans.push((offset, rows));
            offset += rows;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let reqs: Vec<bool> = ids.iter().map(|&i| tape.requires(i)).collect();
        let any = reqs.iter().any(|&r| r);
        let back: Option<BackFn> = if any {
            let spans2 = spans.clone();
            Some(Box::new(move |g, acc| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                for (k, &(off, rows)) in spans2.iter().enumerate() {
                    if reqs[k] {
                        acc(
                            ids[k],
                            g2.slice(ndarray::s![off..off + rows, ..]).to_owned().into_dyn(),
                        );
                    }
                }
            }))
        } else {
            None
        };
        tape.push(value.into_dyn(), any, back)
    }

    /// Rows `range` of a 2-d tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "slice_rows: input must be 2-d");
        let (n, d) = (v.shape()[0], v.shape()[1]);
        assert!(start <= end && end <= n, "slice_rows: range out of bounds");
        let value = v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .slice(ndarray::s![start..end, ..])
            .to_owned()
            .into_dyn();
        unary(self, value, move |g| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = ndarray::Array2::<f64>::zeros((n, d));
            out.slice_mut(ndarray::s![start..end, ..]).assign(&g2);
            out.into_dyn()
        })
    }

    /// Columns `range` of a 2-d tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2, "slice_cols: input must be 2-d");
        let (n, d) = (v.shape()[0], v.shape()[1]);
        assert!(start <= end && end <= d, "slice_cols: range out of bounds");
        let value = v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .slice(ndarray::s![.., start..end])
            .to_owned()
            .into_dyn();
        unary(self, value, move |g| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut out = ndarray::Array2::<f64>::zeros((n, d));
            out.slice_mut(ndarray::s![.., start..end]).assign(&g2);
            out.into_dyn()
        })
    }

    /// Layer normalization over the last axis of a 2-d tensor, with affine
    /// parameters `gamma` and `beta` of shape `(d,)`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 2, "layer_norm: input must be 2-d");
        let x = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), &[d], "layer_norm: gamma shape");
        assert_eq!(bv.shape(), &[d], "layer_norm: beta shape");

        let mut xhat = ndarray::Array2::<f64>::zeros((n, d));
        let mut inv_std = vec![0.0; n];
        for (i, row) in x.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mu) * istd;
            }
        }
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                value[(i, j)] = xhat[(i, j)] * g1[j] + b1[j];
            }
        }

        let xhat = Rc::new(xhat);
        let gv2 = Rc::clone(&gv);
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        let reqs = [
            self.tape.requires(xid),
            self.tape.requires(gid),
            self.tape.requires(bid),
        ];
        let any = reqs.iter().any(|&r| r);
        let back: Option<BackFn> = if any {
            Some(Box::new(move |g, acc| {
                let gy = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gvec = gv2.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if reqs[0] {
                    let mut dx = ndarray::Array2::<f64>::zeros((n, d));
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gy[(i, j)] * gvec[j];
                            m1 += dxh;
                            m2 += dxh * xhat[(i, j)];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gy[(i, j)] * gvec[j];
                            dx[(i, j)] = (dxh - m1 - xhat[(i, j)] * m2) * inv_std[i];
                        }
                    }
                    acc(xid, dx.into_dyn());
                }
                if reqs[1] {
                    let mut dg = ndarray::Array1::<f64>::zeros(d);
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gy[(i, j)] * xhat[(i, j)];
                        }
                    }
                    acc(gid, dg.into_dyn());
                }
                if reqs[2] {
                    acc(bid, gy.sum_axis(Axis(0)).into_dyn());
                }
            }))
        } else {
            None
        };
        self.tape.push(value.into_dyn(), any, back)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite differences of a scalar function of one flat input.
    fn finite_diff(
        f: &dyn Fn(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        eps: f64,
    ) -> ArrayD<f64> {
        let mut grad = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        grad
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // f(X) = sum(tanh(X W + b) * silu(X)) with softmax mixed in
        let x0 = arr2(&[[0.3, -0.7, 0.2], [0.1, 0.5, -0.4]]).into_dyn();
        let w0 = arr2(&[[0.2, -0.1, 0.4], [0.7, 0.3, -0.5], [-0.2, 0.6, 0.1]]).into_dyn();
        let f = |x: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let wv = tape.constant(w0.clone());
            let h = xv.matmul(wv).tanh();
            let s = h.softmax_rows();
            let y = s.mul(xv.silu());
            y.sum().scalar_value()
        };
        let tape = Tape::new();
        let xv = tape.var(x0.clone());
        let wv = tape.constant(w0.clone());
        let h = xv.matmul(wv).tanh();
        let s = h.softmax_rows();
        let loss = s.mul(xv.silu()).sum();
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).unwrap();
        let numeric = finite_diff(&f, &x0, 1e-6);
        assert!(
            max_rel_err(analytic, &numeric) < 1e-7,
            "rel err {}",
            max_rel_err(analytic, &numeric)
        );
    }

    #[test]
    fn nll_and_gather_gradients_match_finite_differences() {
        let table0 = arr2(&[
            [0.1, -0.2, 0.3, 0.0],
            [0.5, 0.4, -0.6, 0.2],
            [-0.3, 0.2, 0.1, -0.1],
        ])
        .into_dyn();
        let proj0 = arr2(&[
            [0.2, -0.4, 0.1],
            [0.3, 0.2, -0.2],
            [0.7, -0.1, 0.5],
            [-0.6, 0.4, 0.3],
        ])
        .into_dyn();
        let ids = [0usize, 2, 1, 1];
        let targets = [2usize, 0, 1, 2];
        let f = |t: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let tv = tape.var(t.clone());
            let pv = tape.constant(proj0.clone());
            let e = tv.gather_rows(&ids);
            let logits = e.matmul(pv);
            logits.nll_rows(&targets).scalar_value()
        };
        let tape = Tape::new();
        let tv = tape.var(table0.clone());
        let pv = tape.constant(proj0.clone());
        let loss = tv.gather_rows(&ids).matmul(pv).nll_rows(&targets);
        let grads = tape.backward(loss);
        let numeric = finite_diff(&f, &table0, 1e-6);
        assert!(max_rel_err(grads.get(tv).unwrap(), &numeric) < 1e-7);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x0 = arr2(&[[0.3, -0.7, 0.2, 1.1], [0.1, 0.5, -0.4, -0.2]]).into_dyn();
        let gamma0 = ndarray::arr1(&[1.1, 0.9, 1.0, 0.8]).into_dyn();
        let beta0 = ndarray::arr1(&[0.0, 0.1, -0.1, 0.2]).into_dyn();
        let f = |x: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let g = tape.var(gamma0.clone());
            let b = tape.var(beta0.clone());
            xv.layer_norm(g, b, 1e-5).tanh().sum().scalar_value()
        };
        let tape = Tape::new();
        let xv = tape.var(x0.clone());
        let g = tape.var(gamma0.clone());
        let b = tape.var(beta0.clone());
        let loss = xv.layer_norm(g, b, 1e-5).tanh().sum();
        let grads = tape.backward(loss);
        let numeric = finite_diff(&f, &x0, 1e-6);
        assert!(max_rel_err(grads.get(xv).unwrap(), &numeric) < 1e-6);

        // gamma gradient too
        let fg = |gm: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let xv = tape.var(x0.clone());
            let g = tape.var(gm.clone());
            let b = tape.var(beta0.clone());
            xv.layer_norm(g, b, 1e-5).tanh().sum().scalar_value()
        };
        let numeric_g = finite_diff(&fg, &gamma0, 1e-6);
        assert!(max_rel_err(grads.get(g).unwrap(), &numeric_g) < 1e-6);
    }

    #[test]
    fn slicing_concat_scale_roundtrip_gradients() {
        let x0 = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).into_dyn();
        let f = |x: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let a = xv.slice_rows(0, 2);
            let b = xv.slice_rows(1, 3);
            let c = Var::concat_rows(&[a, b]).slice_cols(1, 3);
            let s = tape.var(ArrayD::from_elem(IxDyn(&[]), 0.5));
            c.scale(s).mul(c).sum().scalar_value()
        };
        let tape = Tape::new();
        let xv = tape.var(x0.clone());
        let a = xv.slice_rows(0, 2);
        let b = xv.slice_rows(1, 3);
        let c = Var::concat_rows(&[a, b]).slice_cols(1, 3);
        let s = tape.var(ArrayD::from_elem(IxDyn(&[]), 0.5));
        let loss = c.scale(s).mul(c).sum();
        let grads = tape.backward(loss);
        let numeric = finite_diff(&f, &x0, 1e-6);
        assert!(max_rel_err(grads.get(xv).unwrap(), &numeric) < 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(arr2(&[[1.0, 2.0]]).into_dyn());
        let c = tape.constant(arr2(&[[3.0], [4.0]]).into_dyn());
        let loss = x.matmul(c).sum();
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}

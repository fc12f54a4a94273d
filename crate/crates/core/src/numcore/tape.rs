//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter the tape
//! through [`Tape::param`], which consults the store's `requires_grad` flag at
//! that moment, so freeze masks may change between passes without touching the
//! model code. Nodes whose inputs never require gradients carry no backward
//! closure at all.
//!
//! Shape mismatches inside tape ops are programming errors and panic; layer
//! entry points validate user-facing shapes and return `Result`.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{gemm, log_softmax_in_place, logsumexp, softmax_in_place};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Box<BackwardFn>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that records no backward closures; parameters enter as constants.
    pub fn no_grad() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let p = store.get(id);
        let requires_grad = self.grad_enabled.get() && p.requires_grad;
        let v = self.push_node(Node {
            value: Rc::new(p.value.clone()),
            parents: vec![],
            backward: None,
            requires_grad,
            param: Some(id),
        });
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an op with a caller-supplied vector-Jacobian product.
    ///
    /// `backward(grad_out, needs)` returns one entry per parent; entries for
    /// parents with `needs[i] == false` may be `None`.
    pub fn custom(
        &self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let backward: Option<Box<BackwardFn>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            param: None,
        })
    }

    /// Gradients of a scalar `root` with respect to every bound parameter
    /// that requires them.
    pub fn gradients(&self, root: Var) -> Result<Grads> {
        let shape = self.shape(root);
        if self.nodes.borrow()[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        self.gradients_seeded(&[(root, Tensor::full(&shape, 1.0))])
    }

    /// Backpropagates from several nodes at once with explicit output gradients.
    pub fn gradients_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if nodes[v.0].value.len() != g.len() {
                return Err(Error::shape("gradients_seeded", "seed shape mismatch"));
            }
            accumulate(&mut grads[v.0], g.clone());
            start = start.max(v.0 + 1);
        }
        let mut out = Grads::new();
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out.insert_or_add(pid, g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if let (Some(pg), true) = (pg, *need) {
                    debug_assert_eq!(pg.len(), nodes[p].value.len());
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates from a scalar root and adds the result into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        store.accumulate(&grads);
        Ok(())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: {:?} vs {:?}", va.shape(), vb.shape());
        let out = va.zip_map(&vb, |x, y| x + y);
        self.custom(&[a, b], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "sub: {:?} vs {:?}", va.shape(), vb.shape());
        let out = va.zip_map(&vb, |x, y| x - y);
        self.custom(&[a, b], out, |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.map(|x| -x))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul: {:?} vs {:?}", va.shape(), vb.shape());
        let out = va.zip_map(&vb, |x, y| x * y);
        self.custom(&[a, b], out, move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&vb, |x, y| x * y)),
                need[1].then(|| g.zip_map(&va, |x, y| x * y)),
            ]
        })
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let first = self.value(vars[0]);
        let mut out = (*first).clone();
        for v in &vars[1..] {
            let t = self.value(*v);
            assert_eq!(t.len(), out.len(), "add_n shape mismatch");
            out.add_assign(&t);
        }
        let n = vars.len();
        self.custom(vars, out, move |g, need| {
            (0..n).map(|i| need[i].then(|| g.clone())).collect()
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.custom(&[a], out, move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.custom(&[a], out, |g, _| vec![Some(g.clone())])
    }

    /// Adds a constant tensor (masks, positional tables).
    pub fn add_const(&self, a: Var, c: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "add_const: {:?} vs {:?}", va.shape(), c.shape());
        let out = va.zip_map(c, |x, y| x + y);
        self.custom(&[a], out, |g, _| vec![Some(g.clone())])
    }

    /// Multiplies by a constant tensor (dropout masks).
    pub fn mul_const(&self, a: Var, c: Rc<Tensor>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const shape mismatch");
        let out = va.zip_map(&c, |x, y| x * y);
        self.custom(&[a], out, move |g, _| vec![Some(g.zip_map(&c, |x, y| x * y))])
    }

    /// Adds a row vector `b` (length `cols`) to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        assert_eq!(vb.len(), cols, "add_row: {:?} + {:?}", va.shape(), vb.shape());
        let mut out = (*va).clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let b_shape = vb.shape().to_vec();
        self.custom(&[a, b], out, move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (s, x) in acc.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                Tensor::from_parts(b_shape.clone(), acc)
            });
            vec![need[0].then(|| g.clone()), gb]
        })
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        let y = Rc::new(out.clone());
        self.custom(&[a], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(va.data())
                .zip(y.data())
                .map(|((&gi, &x), &yi)| gi * df(x, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    /// Gated linear unit over columns: `a[:, :n] * sigmoid(a[:, n:])`.
    pub fn glu(&self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(cols % 2 == 0, "glu needs an even column count");
        let half = cols / 2;
        let mut out = vec![0.0; rows * half];
        for r in 0..rows {
            let row = va.row(r);
            for j in 0..half {
                out[r * half + j] = row[j] * sigmoid(row[half + j]);
            }
        }
        self.custom(&[a], Tensor::from_parts(vec![rows, half], out), move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = va.row(r);
                for j in 0..half {
                    let s = sigmoid(row[half + j]);
                    let gj = g.data()[r * half + j];
                    ga[r * cols + j] = gj * s;
                    ga[r * cols + half + j] = gj * row[j] * s * (1.0 - s);
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], ga))]
        })
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm(va.data(), m, k, false, vb.data(), n, false, &mut out, false);
        let b_shape = vb.shape().to_vec();
        self.custom(&[a, b], Tensor::from_parts(vec![m, n], out), move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), m, n, false, vb.data(), k, true, &mut ga, false);
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(va.data(), k, m, true, g.data(), n, false, &mut gb, false);
                Tensor::from_parts(b_shape.clone(), gb)
            });
            vec![ga, gb]
        })
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_nt: {:?} x {:?}^T", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm(va.data(), m, k, false, vb.data(), n, true, &mut out, false);
        let b_shape = vb.shape().to_vec();
        self.custom(&[a, b], Tensor::from_parts(vec![m, n], out), move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), m, n, false, vb.data(), k, false, &mut ga, false);
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; n * k];
                gemm(g.data(), n, m, true, va.data(), k, false, &mut gb, false);
                Tensor::from_parts(b_shape.clone(), gb)
            });
            vec![ga, gb]
        })
    }

    // ---- indexing and layout ----------------------------------------------

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather_rows: id {i} >= {v}");
            out.extend_from_slice(vt.row(i));
        }
        let ids = ids.to_vec();
        let t_shape = vt.shape().to_vec();
        self.custom(
            &[table],
            Tensor::from_parts(vec![ids.len(), d], out),
            move |g, _| {
                let mut gt = Tensor::zeros(&t_shape);
                for (r, &i) in ids.iter().enumerate() {
                    for (x, y) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                vec![Some(gt)]
            },
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(start <= end && end <= cols, "slice_cols {start}..{end} of {cols}");
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&va.row(r)[start..end]);
        }
        self.custom(&[a], Tensor::from_parts(vec![rows, w], out), move |g, _| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + end].copy_from_slice(g.row(r));
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], ga))]
        })
    }

    pub fn concat_cols(&self, vars: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| self.value(*v)).collect();
        let rows = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|t| t.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for t in &vals {
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        self.custom(vars, Tensor::from_parts(vec![rows, total], out), move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let res = need[i].then(|| {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        Tensor::from_parts(vec![rows, w], part)
                    });
                    offset += w;
                    res
                })
                .collect()
        })
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(start <= end && end <= rows, "slice_rows {start}..{end} of {rows}");
        let out = va.data()[start * cols..end * cols].to_vec();
        self.custom(
            &[a],
            Tensor::from_parts(vec![end - start, cols], out),
            move |g, _| {
                let mut ga = vec![0.0; rows * cols];
                ga[start * cols..end * cols].copy_from_slice(g.data());
                vec![Some(Tensor::from_parts(vec![rows, cols], ga))]
            },
        )
    }

    /// Stacks rank-2 (or rank-1, treated as a single row) nodes vertically.
    pub fn concat_rows(&self, vars: &[Var]) -> Var {
        let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| self.value(*v)).collect();
        let cols = vals[0].cols();
        let heights: Vec<usize> = vals.iter().map(|t| t.rows()).collect();
        let mut out = Vec::new();
        for t in &vals {
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            out.extend_from_slice(t.data());
        }
        let rows: usize = heights.iter().sum();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|t| t.shape().to_vec()).collect();
        self.custom(vars, Tensor::from_parts(vec![rows, cols], out), move |g, need| {
            let mut offset = 0;
            heights
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let res = need[i].then(|| {
                        Tensor::from_parts(
                            shapes[i].clone(),
                            g.data()[offset * cols..(offset + h) * cols].to_vec(),
                        )
                    });
                    offset += h;
                    res
                })
                .collect()
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape.to_vec()).expect("reshape size");
        self.custom(&[a], out, move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("reshape size"))]
        })
    }

    /// Picks elements `a[r, c]` into a vector.
    pub fn pick(&self, a: Var, idx: &[(usize, usize)]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let out: Vec<f64> = idx.iter().map(|&(r, c)| va.data()[r * cols + c]).collect();
        let idx = idx.to_vec();
        let shape = va.shape().to_vec();
        self.custom(&[a], Tensor::vector(out), move |g, _| {
            let mut ga = Tensor::zeros(&shape);
            for (k, &(r, c)) in idx.iter().enumerate() {
                ga.data_mut()[r * cols + c] += g.data()[k];
            }
            vec![Some(ga)]
        })
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        self.custom(&[a], Tensor::scalar(va.sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `rows x cols -> 1 x cols`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (s, x) in out.iter_mut().zip(va.row(r)) {
                *s += x;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        self.custom(&[a], Tensor::from_parts(vec![1, cols], out), move |g, _| {
            let mut ga = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                ga.extend(g.data().iter().map(|x| x * inv));
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], ga))]
        })
    }

    /// Row means: `rows x cols -> [rows]`.
    pub fn mean_cols(&self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let inv = 1.0 / cols as f64;
        let out: Vec<f64> = (0..rows).map(|r| va.row(r).iter().sum::<f64>() * inv).collect();
        self.custom(&[a], Tensor::vector(out), move |g, _| {
            let mut ga = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                ga.extend(std::iter::repeat_n(g.data()[r] * inv, cols));
            }
            vec![Some(Tensor::from_parts(vec![rows, cols], ga))]
        })
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let y = Rc::new(out.clone());
        self.custom(&[a], out, move |g, _| {
            let mut ga = (*y).clone();
            for r in 0..ga.rows() {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                for (x, gi) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                    *x *= gi - dot;
                }
            }
            vec![Some(ga)]
        })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        let y = Rc::new(out.clone());
        self.custom(&[a], out, move |g, _| {
            let mut ga = g.clone();
            for r in 0..ga.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for (x, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                    *x -= yi.exp() * gsum;
                }
            }
            vec![Some(ga)]
        })
    }

    /// Row-wise log-sum-exp: `rows x cols -> [rows]`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let rows = va.rows();
        let out: Vec<f64> = (0..rows).map(|r| logsumexp(va.row(r))).collect();
        let lse = out.clone();
        self.custom(&[a], Tensor::vector(out), move |g, _| {
            let mut ga = (*va).clone();
            for (r, &l) in lse.iter().enumerate() {
                let gr = g.data()[r];
                for x in ga.row_mut(r) {
                    *x = if *x == f64::NEG_INFINITY {
                        0.0
                    } else {
                        gr * (*x - l).exp()
                    };
                }
            }
            vec![Some(ga)]
        })
    }

    /// Divides each row by `max(norm, floor)`.
    pub fn normalize_rows(&self, a: Var, floor: f64) -> Var {
        let va = self.value(a);
        let rows = va.rows();
        let norms: Vec<f64> = (0..rows)
            .map(|r| va.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut out = (*va).clone();
        for (r, &n) in norms.iter().enumerate() {
            let d = n.max(floor);
            out.row_mut(r).iter_mut().for_each(|x| *x /= d);
        }
        let y = Rc::new(out.clone());
        self.custom(&[a], out, move |g, _| {
            let mut ga = g.clone();
            for (r, &n) in norms.iter().enumerate() {
                if n < floor {
                    ga.row_mut(r).iter_mut().for_each(|x| *x /= floor);
                } else {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (x, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *x = (*x - dot * yi) / n;
                    }
                }
            }
            vec![Some(ga)]
        })
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(vg.len(), cols, "layer_norm gamma size");
        assert_eq!(vb.len(), cols, "layer_norm beta size");
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let (g_shape, b_shape) = (vg.shape().to_vec(), vb.shape().to_vec());
        self.custom(
            &[x, gamma, beta],
            Tensor::from_parts(shape.clone(), out),
            move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dh = gd[r * cols + j] * vg.data()[j];
                            m1 += dh;
                            m2 += dh * xhat[r * cols + j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let dh = gd[r * cols + j] * vg.data()[j];
                            gx[r * cols + j] = inv_std[r] * (dh - m1 - xhat[r * cols + j] * m2);
                        }
                    }
                    Tensor::from_parts(shape.clone(), gx)
                });
                let gg = need[1].then(|| {
                    let mut acc = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            acc[j] += gd[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    Tensor::from_parts(g_shape.clone(), acc)
                });
                let gb = need[2].then(|| {
                    let mut acc = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            acc[j] += gd[r * cols + j];
                        }
                    }
                    Tensor::from_parts(b_shape.clone(), acc)
                });
                vec![gx, gg, gb]
            },
        )
    }

    // ---- convolution -----------------------------------------------------

    /// 1-D convolution over time.
    ///
    /// `x: T x C_in`, `w: K x C_in x C_out`, `b: C_out`. Output row `t` reads
    /// input rows `t*stride + k - pad_left` for `k in 0..K`, zero outside.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
        out_len: usize,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (t_in, c_in) = (vx.rows(), vx.cols());
        let ws = vw.shape().to_vec();
        assert_eq!(ws.len(), 3, "conv1d weight must be K x C_in x C_out");
        let (k, c_out) = (ws[0], ws[2]);
        assert_eq!(ws[1], c_in, "conv1d input channels");
        let kc = k * c_in;
        let mut cols = vec![0.0; out_len * kc];
        for t in 0..out_len {
            for kk in 0..k {
                let src = (t * stride + kk) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    cols[t * kc + kk * c_in..t * kc + (kk + 1) * c_in]
                        .copy_from_slice(vx.row(s));
                }
            }
        }
        let mut out = vec![0.0; out_len * c_out];
        gemm(&cols, out_len, kc, false, vw.data(), c_out, false, &mut out, false);
        let out = Tensor::from_parts(vec![out_len, c_out], out);
        let biased_var = self.custom(&[x, w], out, move |g, need| {
            let gx = need[0].then(|| {
                let mut gcols = vec![0.0; out_len * kc];
                gemm(g.data(), out_len, c_out, false, vw.data(), kc, true, &mut gcols, false);
                let mut gx = vec![0.0; t_in * c_in];
                for t in 0..out_len {
                    for kk in 0..k {
                        let src = (t * stride + kk) as isize - pad_left as isize;
                        if src >= 0 && (src as usize) < t_in {
                            let s = src as usize;
                            for c in 0..c_in {
                                gx[s * c_in + c] += gcols[t * kc + kk * c_in + c];
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![t_in, c_in], gx)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; kc * c_out];
                gemm(&cols, kc, out_len, true, g.data(), c_out, false, &mut gw, false);
                Tensor::from_parts(ws.clone(), gw)
            });
            vec![gx, gw]
        });
        self.add_row(biased_var, b)
    }

    /// Depthwise 1-D convolution, stride 1, "same" padding.
    ///
    /// `x: T x C`, `w: K x C`, `b: C`, `K` odd.
    pub fn depthwise_conv1d(&self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (t_len, c) = (vx.rows(), vx.cols());
        let k = vw.rows();
        assert_eq!(vw.cols(), c, "depthwise weight channels");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let pad = k / 2;
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for kk in 0..k {
                let src = (t + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t_len {
                    continue;
                }
                let xr = vx.row(src as usize);
                let wr = vw.row(kk);
                for ch in 0..c {
                    out[t * c + ch] += xr[ch] * wr[ch];
                }
            }
        }
        let w_shape = vw.shape().to_vec();
        let conv = self.custom(
            &[x, w],
            Tensor::from_parts(vec![t_len, c], out),
            move |g, need| {
                let mut gx = need[0].then(|| vec![0.0; t_len * c]);
                let mut gw = need[1].then(|| vec![0.0; k * c]);
                for t in 0..t_len {
                    let gr = g.row(t);
                    for kk in 0..k {
                        let src = (t + kk) as isize - pad as isize;
                        if src < 0 || src as usize >= t_len {
                            continue;
                        }
                        let s = src as usize;
                        if let Some(gx) = gx.as_mut() {
                            let wr = vw.row(kk);
                            for ch in 0..c {
                                gx[s * c + ch] += gr[ch] * wr[ch];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xr = vx.row(s);
                            for ch in 0..c {
                                gw[kk * c + ch] += gr[ch] * xr[ch];
                            }
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_parts(vec![t_len, c], d)),
                    gw.map(|d| Tensor::from_parts(w_shape.clone(), d)),
                ]
            },
        );
        self.add_row(conv, b)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

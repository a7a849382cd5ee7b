//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse, applying each node's
//! vector-Jacobian product. The op set is exactly what the model needs —
//! dense linear algebra, per-row softmax/normalization, small convolutions,
//! bilinear resampling — rather than a general framework.
//!
//! Gradient flow control is structural: [`Tape::leaf`] marks a tensor as
//! wanting gradients, [`Tape::constant`] does not, and any node none of whose
//! ancestors is a leaf stores no backward closure at all. Running a forward
//! pass with every parameter bound as a constant is therefore a cheap
//! inference mode (used for the momentum teacher and evaluation).
//!
//! Everything is generic over [`Scalar`] so the same code runs at `f32` for
//! training and at `f64` for finite-difference verification.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use crate::image_ops::bilinear_taps;
use crate::scalar::{c, Scalar};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type VjpFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    parents: Vec<Var>,
    vjp: Option<VjpFn<T>>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by [`Var`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the backward root with respect to `v`, if any was produced.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Remove and return the gradient for `v`, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected a rank-2 tensor")
}

/// Reshape that tolerates non-contiguous inputs (gradients often are).
fn reshaped<T: Scalar>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape element count mismatch: {:?} -> {:?}", a.shape(), shape);
    let std = a.as_standard_layout().into_owned();
    std.into_shape_with_order(IxDyn(shape)).expect("reshape")
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor that wants a gradient.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Record a tensor that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Value of a recorded tensor.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<Var>,
        vjp: Option<VjpFn<T>>,
        leaf_grad: bool,
    ) -> Var {
        let needs_grad =
            leaf_grad || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        // Drop the backward closure when nothing upstream wants gradients;
        // this is what makes constant-parameter forwards cheap.
        let vjp = if needs_grad { vjp } else { None };
        self.nodes.push(Node { value: Rc::new(value), parents, vjp, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Reverse pass from a scalar root. Gradients are retained only for nodes
    /// without a backward closure (leaves and constants' positions), which is
    /// all callers consume.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut by_node: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        by_node.resize_with(self.nodes.len(), || None);
        by_node[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            if by_node[i].is_none() || self.nodes[i].vjp.is_none() {
                continue;
            }
            let gi = by_node[i].take().expect("checked above");
            let node = &self.nodes[i];
            let parent_grads = (node.vjp.as_ref().expect("checked above"))(&gi);
            assert_eq!(parent_grads.len(), node.parents.len(), "vjp arity mismatch");
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut by_node[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { by_node }
    }

    // ---- elementwise arithmetic ------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &*self.val(a) + &*self.val(b);
        self.push(out, vec![a, b], Some(Box::new(|g| vec![g.clone(), g.clone()])), false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = &*self.val(a) - &*self.val(b);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.mapv(|x| -x)])),
            false,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (av, bv) = (self.val(a), self.val(b));
        let out = &*av * &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &*bv, g * &*av])),
            false,
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let (av, bv) = (self.val(a), self.val(b));
        let out = &*av / &*bv;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = g / &*bv;
                let gb = -(g * &*av) / (&*bv * &*bv);
                vec![ga, gb]
            })),
            false,
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(|x| -x);
        self.push(out, vec![a], Some(Box::new(|g| vec![g.mapv(|x| -x)])), false)
    }

    /// Multiply by a compile-time-known constant factor.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = c::<T>(k);
        let out = self.val(a).mapv(|x| x * kt);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.mapv(|x| x * kt)])), false)
    }

    /// Add a constant offset elementwise.
    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let kt = c::<T>(k);
        let out = self.val(a).mapv(|x| x + kt);
        self.push(out, vec![a], Some(Box::new(|g| vec![g.clone()])), false)
    }

    /// Elementwise multiply by a constant tensor (dropout masks, fixed
    /// per-element weights). The constant is not a tape node.
    pub fn mul_const(&mut self, a: Var, k: Rc<ArrayD<T>>) -> Var {
        assert_eq!(self.shape(a), k.shape(), "mul_const shape mismatch");
        let out = &*self.val(a) * &*k;
        self.push(out, vec![a], Some(Box::new(move |g| vec![g * &*k])), false)
    }

    /// Broadcast-add a single scalar variable (shape `[1]`) to every element.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "add_scalar_var: rhs must be scalar");
        let sv = self.val(s)[0];
        let out = self.val(a).mapv(|x| x + sv);
        self.push(
            out,
            vec![a, s],
            Some(Box::new(|g| {
                let total = g.sum();
                vec![g.clone(), ArrayD::from_elem(IxDyn(&[1]), total)]
            })),
            false,
        )
    }

    /// Add a rank-1 vector to every row of a rank-2 matrix (bias terms,
    /// per-slice position rows).
    pub fn add_rowvec(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("add_rowvec: rhs must be rank-1");
        let a2 = as2(&av);
        assert_eq!(a2.ncols(), b1.len(), "add_rowvec width mismatch");
        let out = (&a2 + &b1).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
            false,
        )
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.val(a), self.val(b));
        let (a2, b2) = (as2(&av), as2(&bv));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let ga = g2.dot(&as2(&bv).t()).into_dyn();
                let gb = as2(&av).t().dot(&g2).into_dyn();
                vec![ga, gb]
            })),
            false,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let out = as2(&av).t().to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(|g| vec![as2(g).t().to_owned().into_dyn()])),
            false,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let out = reshaped(&self.val(a), shape);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![reshaped(g, &old_shape)])),
            false,
        )
    }

    // ---- concatenation / slicing (rank-2) ----------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let views: Vec<Rc<ArrayD<T>>> = parts.iter().map(|v| self.val(*v)).collect();
        let rows: Vec<usize> = views.iter().map(|v| as2(v).nrows()).collect();
        let twod: Vec<ArrayView2<T>> = views.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(Axis(0), &twod).expect("concat_rows").into_dyn();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(rows.len());
                let mut r = 0;
                for &n in &rows {
                    out.push(g2.slice(ndarray::s![r..r + n, ..]).to_owned().into_dyn());
                    r += n;
                }
                out
            })),
            false,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let views: Vec<Rc<ArrayD<T>>> = parts.iter().map(|v| self.val(*v)).collect();
        let cols: Vec<usize> = views.iter().map(|v| as2(v).ncols()).collect();
        let twod: Vec<ArrayView2<T>> = views.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(Axis(1), &twod).expect("concat_cols").into_dyn();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut out = Vec::with_capacity(cols.len());
                let mut cstart = 0;
                for &n in &cols {
                    out.push(g2.slice(ndarray::s![.., cstart..cstart + n]).to_owned().into_dyn());
                    cstart += n;
                }
                out
            })),
            false,
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        assert!(r0 < r1 && r1 <= a2.nrows(), "slice_rows out of range");
        let full = (a2.nrows(), a2.ncols());
        let out = a2.slice(ndarray::s![r0..r1, ..]).to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Array2::<T>::zeros(full);
                ga.slice_mut(ndarray::s![r0..r1, ..]).assign(&as2(g));
                vec![ga.into_dyn()]
            })),
            false,
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        assert!(c0 < c1 && c1 <= a2.ncols(), "slice_cols out of range");
        let full = (a2.nrows(), a2.ncols());
        let out = a2.slice(ndarray::s![.., c0..c1]).to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut ga = Array2::<T>::zeros(full);
                ga.slice_mut(ndarray::s![.., c0..c1]).assign(&as2(g));
                vec![ga.into_dyn()]
            })),
            false,
        )
    }

    // ---- nonlinearities -----------------------------------------------------

    /// GELU, tanh approximation (smooth everywhere, self-consistent gradient).
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let k = c::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a3 = c::<T>(0.044_715);
        let half = c::<T>(0.5);
        let one = T::one();
        let three = c::<T>(3.0);
        let out = av.mapv(|x| {
            let u = k * (x + a3 * x * x * x);
            half * x * (one + u.tanh())
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let d = av.mapv(|x| {
                    let u = k * (x + a3 * x * x * x);
                    let t = u.tanh();
                    let du = k * (one + three * a3 * x * x);
                    half * (one + t) + half * x * (one - t * t) * du
                });
                vec![g * &d]
            })),
            false,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let out = av.mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mask = av.mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                vec![g * &mask]
            })),
            false,
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(|x| x.exp());
        let out_rc = Rc::new(out);
        let captured = Rc::clone(&out_rc);
        let v = self.push_rc(out_rc, vec![a], Some(Box::new(move |g| vec![g * &*captured])));
        v
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let out = av.mapv(|x| x.ln());
        self.push(out, vec![a], Some(Box::new(move |g| vec![g / &*av])), false)
    }

    fn push_rc(&mut self, value: Rc<ArrayD<T>>, parents: Vec<Var>, vjp: Option<VjpFn<T>>) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let vjp = if needs_grad { vjp } else { None };
        self.nodes.push(Node { value, parents, vjp, needs_grad });
        Var(self.nodes.len() - 1)
    }

    // ---- rows-wise normalizations -------------------------------------------

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        let mut out = Array2::<T>::zeros((a2.nrows(), a2.ncols()));
        for (i, row) in a2.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let ex = row.mapv(|x| (x - m).exp());
            let s = ex.sum();
            out.row_mut(i).assign(&(&ex / s));
        }
        let out_rc = Rc::new(out.into_dyn());
        let s_cap = Rc::clone(&out_rc);
        self.push_rc(
            out_rc,
            vec![a],
            Some(Box::new(move |g| {
                let s2 = as2(&s_cap);
                let g2 = as2(g);
                let mut ga = Array2::<T>::zeros((s2.nrows(), s2.ncols()));
                for i in 0..s2.nrows() {
                    let srow = s2.row(i);
                    let grow = g2.row(i);
                    let dot = srow.dot(&grow);
                    let gi = &srow * &grow.mapv(|x| x) - &srow.mapv(|x| x * dot);
                    ga.row_mut(i).assign(&gi);
                }
                vec![ga.into_dyn()]
            })),
        )
    }

    /// Row-wise log-softmax (stable).
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        let mut out = Array2::<T>::zeros((a2.nrows(), a2.ncols()));
        for (i, row) in a2.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row.mapv(|x| (x - m).exp()).sum().ln() + m;
            out.row_mut(i).assign(&row.mapv(|x| x - lse));
        }
        let out_rc = Rc::new(out.into_dyn());
        let cap = Rc::clone(&out_rc);
        self.push_rc(
            out_rc,
            vec![a],
            Some(Box::new(move |g| {
                let l2 = as2(&cap);
                let g2 = as2(g);
                let mut ga = Array2::<T>::zeros((l2.nrows(), l2.ncols()));
                for i in 0..l2.nrows() {
                    let p = l2.row(i).mapv(|x| x.exp());
                    let gsum = g2.row(i).sum();
                    let gi = &g2.row(i) - &p.mapv(|x| x * gsum);
                    ga.row_mut(i).assign(&gi);
                }
                vec![ga.into_dyn()]
            })),
        )
    }

    /// Row-wise layer normalization with learned gain/bias (both rank-1).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.val(x);
        let gv = self.val(gain);
        let bv = self.val(bias);
        let x2 = as2(&xv);
        let g1 = gv.view().into_dimensionality::<Ix1>().expect("layer_norm gain rank-1");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("layer_norm bias rank-1");
        let (r, cdim) = (x2.nrows(), x2.ncols());
        assert_eq!(g1.len(), cdim, "layer_norm gain width");
        assert_eq!(b1.len(), cdim, "layer_norm bias width");
        let epst = c::<T>(eps);
        let nt = c::<T>(cdim as f64);

        let mut xhat = Array2::<T>::zeros((r, cdim));
        let mut inv_std = Array1::<T>::zeros(r);
        for i in 0..r {
            let row = x2.row(i);
            let mean = row.sum() / nt;
            let var = row.mapv(|v| (v - mean) * (v - mean)).sum() / nt;
            let inv = T::one() / (var + epst).sqrt();
            inv_std[i] = inv;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * inv));
        }
        let mut out = Array2::<T>::zeros((r, cdim));
        for i in 0..r {
            let xr = xhat.row(i);
            out.row_mut(i).assign(&(&(&xr * &g1) + &b1));
        }
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let xhat_c = Rc::clone(&xhat);
        let inv_c = Rc::clone(&inv_std);
        let gv_c = Rc::clone(&gv);
        self.push(
            out.into_dyn(),
            vec![x, gain, bias],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let gain1 = gv_c.view().into_dimensionality::<Ix1>().expect("gain");
                let (r, cdim) = (g2.nrows(), g2.ncols());
                let nt = c::<T>(cdim as f64);
                let mut dx = Array2::<T>::zeros((r, cdim));
                let mut dgain = Array1::<T>::zeros(cdim);
                let mut dbias = Array1::<T>::zeros(cdim);
                for i in 0..r {
                    let grow = g2.row(i);
                    let xr = xhat_c.row(i);
                    dgain += &(&grow * &xr);
                    dbias += &grow;
                    let dxhat = &grow * &gain1;
                    let m1 = dxhat.sum() / nt;
                    let m2 = (&dxhat * &xr).sum() / nt;
                    let inv = inv_c[i];
                    let dxi = (&dxhat - &xr.mapv(|v| v * m2)).mapv(|v| v * inv)
                        - &Array1::from_elem(cdim, m1 * inv);
                    dx.row_mut(i).assign(&dxi);
                }
                vec![dx.into_dyn(), dgain.into_dyn(), dbias.into_dyn()]
            })),
            false,
        )
    }

    /// Normalize each row of a rank-2 tensor to unit L2 length.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        let (r, cd) = (a2.nrows(), a2.ncols());
        let mut out = Array2::<T>::zeros((r, cd));
        let mut norms = Array1::<T>::zeros(r);
        for i in 0..r {
            let row = a2.row(i);
            let n = row.dot(&row).sqrt();
            norms[i] = n;
            out.row_mut(i).assign(&row.mapv(|x| x / n));
        }
        let out_rc = Rc::new(out.into_dyn());
        let y_cap = Rc::clone(&out_rc);
        let n_cap = Rc::new(norms);
        self.push_rc(
            out_rc,
            vec![a],
            Some(Box::new(move |g| {
                let y2 = as2(&y_cap);
                let g2 = as2(g);
                let (r, cd) = (y2.nrows(), y2.ncols());
                let mut ga = Array2::<T>::zeros((r, cd));
                for i in 0..r {
                    let y = y2.row(i);
                    let gr = g2.row(i);
                    let dot = y.dot(&gr);
                    let gi = (&gr - &y.mapv(|v| v * dot)).mapv(|v| v / n_cap[i]);
                    ga.row_mut(i).assign(&gi);
                }
                vec![ga.into_dyn()]
            })),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let s = av.sum();
        let shape: Vec<usize> = av.shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a],
            Some(Box::new(move |g| {
                vec![ArrayD::from_elem(IxDyn(&shape), g[0])]
            })),
            false,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Pick one column entry per row: `out[i, 0] = a[i, idx[i]]`.
    pub fn gather_target(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.val(a);
        let a2 = as2(&av);
        let (r, cd) = (a2.nrows(), a2.ncols());
        assert_eq!(idx.len(), r, "gather_target index count");
        let mut out = Array2::<T>::zeros((r, 1));
        for i in 0..r {
            assert!(idx[i] < cd, "gather_target index out of range");
            out[(i, 0)] = a2[(i, idx[i])];
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut ga = Array2::<T>::zeros((r, cd));
                for i in 0..r {
                    ga[(i, idx[i])] = g2[(i, 0)];
                }
                vec![ga.into_dyn()]
            })),
            false,
        )
    }

    // ---- token/grid structural ops -------------------------------------------

    /// Cut an `(H, W)` plane into non-overlapping `s x s` patches, flattened
    /// row-major: `out[r*gw + c, py*s + px] = x[r*s + py, c*s + px]`.
    pub fn patchify(&mut self, x: Var, s: usize) -> Var {
        let xv = self.val(x);
        let xs = xv.shape().to_vec();
        assert_eq!(xs.len(), 2, "patchify input must be (H, W)");
        let (h, w) = (xs[0], xs[1]);
        assert!(h % s == 0 && w % s == 0, "patchify: {h}x{w} not divisible by {s}");
        let (gh, gw) = (h / s, w / s);
        let mut out = Array2::<T>::zeros((gh * gw, s * s));
        for r in 0..gh {
            for cc in 0..gw {
                for py in 0..s {
                    for px in 0..s {
                        out[(r * gw + cc, py * s + px)] = xv[[r * s + py, cc * s + px]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gx = Array2::<T>::zeros((h, w));
                for r in 0..gh {
                    for cc in 0..gw {
                        for py in 0..s {
                            for px in 0..s {
                                gx[(r * s + py, cc * s + px)] = g2[(r * gw + cc, py * s + px)];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
            false,
        )
    }

    /// Combine factorized positional tables into one row per grid cell:
    /// `out[r*w_cols + c] = rows[r] + cols[c]`, with `rows (h, C)`, `cols (w, C)`.
    pub fn grid_positions(&mut self, rows: Var, cols: Var) -> Var {
        let rv = self.val(rows);
        let cv = self.val(cols);
        let r2 = as2(&rv);
        let c2 = as2(&cv);
        assert_eq!(r2.ncols(), c2.ncols(), "grid_positions width mismatch");
        let (h, w, cdim) = (r2.nrows(), c2.nrows(), r2.ncols());
        let mut out = Array2::<T>::zeros((h * w, cdim));
        for r in 0..h {
            for cc in 0..w {
                let sum = &r2.row(r) + &c2.row(cc);
                out.row_mut(r * w + cc).assign(&sum);
            }
        }
        self.push(
            out.into_dyn(),
            vec![rows, cols],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut gr = Array2::<T>::zeros((h, cdim));
                let mut gc = Array2::<T>::zeros((w, cdim));
                for r in 0..h {
                    for cc in 0..w {
                        let grow = g2.row(r * w + cc);
                        gr.row_mut(r).zip_mut_with(&grow, |a, b| *a += *b);
                        gc.row_mut(cc).zip_mut_with(&grow, |a, b| *a += *b);
                    }
                }
                vec![gr.into_dyn(), gc.into_dyn()]
            })),
            false,
        )
    }

    /// Rearrange row-major grid tokens `(h*w, C)` into an image `(C, h, w)`.
    pub fn tokens_to_image(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.val(x);
        let x2 = as2(&xv);
        assert_eq!(x2.nrows(), h * w, "tokens_to_image row count");
        let cdim = x2.ncols();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[cdim, h, w]));
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..cdim {
                    out[[ch, y, xx]] = x2[(y * w + xx, ch)];
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = Array2::<T>::zeros((h * w, cdim));
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..cdim {
                            gx[(y * w + xx, ch)] = g[[ch, y, xx]];
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
            false,
        )
    }

    // ---- spatial ops (rank-3: channels x height x width) ---------------------

    /// Same-padded 2D convolution with an odd square kernel (1x1 or 3x3 here).
    /// Input `(C_in, h, w)`, weight `(C_out, C_in, k, k)`, bias `(C_out,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.val(x);
        let wv = self.val(w);
        let bv = self.val(b);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be (C,h,w)");
        assert_eq!(ws.len(), 4, "conv2d weight must be (Cout,Cin,k,k)");
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        assert_eq!(ws[3], k, "conv2d kernel must be square");
        assert_eq!(k % 2, 1, "conv2d kernel must be odd");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("conv2d bias rank-1");
        assert_eq!(b1.len(), cout, "conv2d bias length");

        let cols = Rc::new(im2col(&xv, cin, h, wdt, k));
        let wmat = reshaped(&wv, &[cout, cin * k * k]);
        let wmat2 = as2(&wmat).to_owned();
        let mut flat = cols.dot(&wmat2.t()); // (h*w, Cout)
        flat += &b1;
        let out = reshaped(&flat.t().to_owned().into_dyn(), &[cout, h, wdt]);

        let cols_c = Rc::clone(&cols);
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g| {
                let gflat2 = as2(&reshaped(g, &[cout, h * wdt])).t().to_owned(); // (h*w, Cout)
                let dw = gflat2.t().dot(&*cols_c); // (Cout, Cin*k*k)
                let db = gflat2.sum_axis(Axis(0));
                let dcols = gflat2.dot(&wmat2); // (h*w, Cin*k*k)
                let dx = col2im(&dcols, cin, h, wdt, k);
                vec![
                    dx.into_dyn(),
                    reshaped(&dw.into_dyn(), &[cout, cin, k, k]),
                    db.into_dyn(),
                ]
            })),
            false,
        )
    }

    /// Bilinear resample of a `(C, h, w)` tensor to `(C, oh, ow)` under the
    /// half-pixel convention. Downscaling by exactly 2 equals 2x2 mean pooling.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.val(x);
        let xs = xv.shape().to_vec();
        assert_eq!(xs.len(), 3, "resize_bilinear input must be (C,h,w)");
        let (cdim, h, w) = (xs[0], xs[1], xs[2]);
        let row_taps = bilinear_taps(h, oh);
        let col_taps = bilinear_taps(w, ow);

        let mut out = ArrayD::<T>::zeros(IxDyn(&[cdim, oh, ow]));
        for ch in 0..cdim {
            for oy in 0..oh {
                let (y0, y1, ty) = row_taps[oy];
                let ty = c::<T>(ty);
                for ox in 0..ow {
                    let (x0, x1, tx) = col_taps[ox];
                    let tx = c::<T>(tx);
                    let one = T::one();
                    let v = (one - ty) * ((one - tx) * xv[[ch, y0, x0]] + tx * xv[[ch, y0, x1]])
                        + ty * ((one - tx) * xv[[ch, y1, x0]] + tx * xv[[ch, y1, x1]]);
                    out[[ch, oy, ox]] = v;
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[cdim, h, w]));
                for ch in 0..cdim {
                    for oy in 0..oh {
                        let (y0, y1, ty) = row_taps[oy];
                        let ty = c::<T>(ty);
                        for ox in 0..ow {
                            let (x0, x1, tx) = col_taps[ox];
                            let tx = c::<T>(tx);
                            let one = T::one();
                            let gv = g[[ch, oy, ox]];
                            gx[[ch, y0, x0]] += (one - ty) * (one - tx) * gv;
                            gx[[ch, y0, x1]] += (one - ty) * tx * gv;
                            gx[[ch, y1, x0]] += ty * (one - tx) * gv;
                            gx[[ch, y1, x1]] += ty * tx * gv;
                        }
                    }
                }
                vec![gx]
            })),
            false,
        )
    }

    /// Training-time dropout as multiplication by a pre-drawn inverted mask.
    /// Identity when `rate == 0`.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut rand_chacha::ChaCha12Rng,
    ) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let inv = c::<T>(1.0 / keep);
        let shape = self.shape(a).to_vec();
        let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            if f64::sample_uniform(rng) < keep {
                inv
            } else {
                T::zero()
            }
        });
        self.mul_const(a, Rc::new(mask))
    }
}

/// Unfold a same-padded `(C, h, w)` tensor into `(h*w, C*k*k)` patch rows.
fn im2col<T: Scalar>(x: &ArrayD<T>, cin: usize, h: usize, w: usize, k: usize) -> Array2<T> {
    let pad = k / 2;
    let mut cols = Array2::<T>::zeros((h * w, cin * k * k));
    for y in 0..h {
        for xp in 0..w {
            let row = y * w + xp;
            for ci in 0..cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xp as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[(row, ci * k * k + ky * k + kx)] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter patch-row gradients back onto the image.
fn col2im<T: Scalar>(cols: &Array2<T>, cin: usize, h: usize, w: usize, k: usize) -> ndarray::Array3<T> {
    let pad = k / 2;
    let mut x = ndarray::Array3::<T>::zeros((cin, h, w));
    for y in 0..h {
        for xp in 0..w {
            let row = y * w + xp;
            for ci in 0..cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xp as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += cols[(row, ci * k * k + ky * k + kx)];
                    }
                }
            }
        }
    }
    x
}

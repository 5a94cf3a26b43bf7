//! Minimal reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! Covers exactly the ops the inpainting networks and losses need: elementwise
//! math, reductions, 2D/3D convolutions (plus transposed), instance norm,
//! spectral weight scaling, pooling, padding, slicing, and Gram matrices.
//! Graphs are built eagerly; [`Tensor::backward`] walks nodes in reverse
//! creation order (every parent predates its children), so gradient
//! accumulation is deterministic.
//!
//! Not thread-safe by design: one training graph lives on one thread, while
//! the convolution kernels parallelize internally with deterministic
//! reductions.

mod conv;

pub use conv::{
    conv2d, conv3d, conv_transpose3d, instance_norm3d, maxpool2d, power_iteration, reflect_pad3d,
    spectral_scale,
};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording backward closures; forward results are detached.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD.with(|flag| {
        let prev = flag.get();
        flag.set(true);
        let out = f();
        flag.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf; gradients accumulate here during [`Tensor::backward`].
    pub fn parameter(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if !track {
            return Tensor::constant(data);
        }
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.data.borrow().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let d = self.node.data.borrow();
        debug_assert_eq!(d.len(), 1, "scalar_value on non-scalar tensor");
        *d.iter().next().expect("nonempty tensor")
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values (optimizer updates, checkpoint loads).
    pub fn set_data(&self, data: ArrayD<f64>) {
        debug_assert_eq!(self.shape(), data.shape().to_vec());
        *self.node.data.borrow_mut() = data;
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.node.data.borrow())
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Parents always have smaller
    /// node ids than children, so a reverse id ordering of the reachable set
    /// is a valid topological order.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward requires a scalar loss");
        let mut reachable: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                if p.node.requires_grad {
                    stack.push(p.clone());
                }
            }
            reachable.push(t);
        }
        reachable.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        self.accumulate_grad(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for t in reachable {
            let Some(backward) = t.node.backward.as_ref() else {
                continue;
            };
            let g = t.node.grad.borrow().clone();
            let Some(g) = g else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                if let (true, Some(pg)) = (p.node.requires_grad, pg) {
                    p.accumulate_grad(pg);
                }
            }
            // free intermediate gradients eagerly; leaves keep theirs
            if t.node.backward.is_some() {
                *t.node.grad.borrow_mut() = None;
            }
        }
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        let data = &*self.node.data.borrow() + &*other.node.data.borrow();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        let data = &*self.node.data.borrow() - &*other.node.data.borrow();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.mapv(|x| -x))]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        let data = &*self.node.data.borrow() * &*other.node.data.borrow();
        let a = self.clone();
        let b = other.clone();
        Tensor::from_op(
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g * &*b.node.data.borrow();
                let gb = g * &*a.node.data.borrow();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add_const(&self, c: &ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), c.shape().to_vec());
        let data = &*self.node.data.borrow() + c;
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.clone())]),
        )
    }

    pub fn mul_const(&self, c: &ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), c.shape().to_vec());
        let data = &*self.node.data.borrow() * c;
        let c = c.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &c)]),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.node.data.borrow().mapv(|x| x * s);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.mapv(|x| x * s))]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.node.data.borrow().mapv(|x| x + s);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.clone())]),
        )
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        let x = self.to_array();
        let data = x.mapv(f64::abs);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&x)
                        .map_collect(|&gv, &xv| gv * sign(xv)),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_array();
        let data = x.mapv(|v| v.max(0.0));
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(ndarray::Zip::from(g).and(&x).map_collect(|&gv, &xv| {
                    if xv > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = self.to_array();
        let data = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(ndarray::Zip::from(g).and(&x).map_collect(|&gv, &xv| {
                    if xv > 0.0 {
                        gv
                    } else {
                        slope * gv
                    }
                }))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let y = self.node.data.borrow().mapv(stable_sigmoid);
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&y_saved)
                        .map_collect(|&gv, &yv| gv * yv * (1.0 - yv)),
                )]
            }),
        )
    }

    /// log(1 + exp(x)), numerically stable.
    pub fn softplus(&self) -> Tensor {
        let x = self.to_array();
        let data = x.mapv(stable_softplus);
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&x)
                        .map_collect(|&gv, &xv| gv * stable_sigmoid(xv)),
                )]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let shape = IxDyn(self.node.data.borrow().shape());
        let s = self.node.data.borrow().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = g[[0]];
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig: Vec<usize> = self.shape();
        let data = self
            .node
            .data
            .borrow()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape backward"),
                )]
            }),
        )
    }

    /// Concatenate along axis 0; inputs must agree on the remaining axes.
    pub fn concat0(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.node.data.borrow()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let data = ndarray::concatenate(ndarray::Axis(0), &view_refs).expect("concat0 shapes");
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
        drop(views);
        Tensor::from_op(
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for &s in &sizes {
                    out.push(Some(
                        g.slice_axis(ndarray::Axis(0), ndarray::Slice::from(offset..offset + s))
                            .to_owned(),
                    ));
                    offset += s;
                }
                out
            }),
        )
    }

    /// Extract axial slice k of a `(H, W, D)` tensor as `(1, H, W)`.
    pub fn axial_slice(&self, k: usize) -> Tensor {
        let d = self.node.data.borrow();
        assert_eq!(d.ndim(), 3, "axial_slice expects (H,W,D)");
        let (h, w, depth) = (d.shape()[0], d.shape()[1], d.shape()[2]);
        assert!(k < depth);
        let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
        for i in 0..h {
            for j in 0..w {
                out[[0, i, j]] = d[[i, j, k]];
            }
        }
        drop(d);
        let full_shape = [h, w, depth];
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = ArrayD::zeros(IxDyn(&full_shape));
                for i in 0..full_shape[0] {
                    for j in 0..full_shape[1] {
                        gx[[i, j, k]] = g[[0, i, j]];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalized Gram matrix of a `(C, H, W)` activation:
    /// `G = A A^T / (C*H*W)` with `A = reshape(x, (C, H*W))`.
    pub fn gram(&self) -> Tensor {
        let d = self.node.data.borrow();
        assert_eq!(d.ndim(), 3, "gram expects (C,H,W)");
        let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
        let norm = (c * h * w) as f64;
        let a = d
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("gram reshape");
        drop(d);
        let mut g_out = ndarray::Array2::<f64>::zeros((c, c));
        ndarray::linalg::general_mat_mul(1.0 / norm, &a, &a.t(), 0.0, &mut g_out);
        let a_saved = a;
        Tensor::from_op(
            g_out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g
                    .to_owned()
                    .into_shape_with_order((c, c))
                    .expect("gram grad shape");
                // dA = (G + G^T) A / norm
                let sym = &g2 + &g2.t();
                let mut da = ndarray::Array2::<f64>::zeros((c, h * w));
                ndarray::linalg::general_mat_mul(1.0 / norm, &sym, &a_saved, 0.0, &mut da);
                vec![Some(
                    da.into_shape_with_order(IxDyn(&[c, h, w]))
                        .expect("gram grad reshape")
                        .into_dyn(),
                )]
            }),
        )
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Adam with bias correction. Parameter order is fixed at construction and
/// updates run in that order, keeping training bit-reproducible.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params
                .iter()
                .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
                .collect(),
            v: params
                .iter()
                .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
                .collect(),
        }
    }

    /// Apply one update using the gradients accumulated on `params`.
    /// `grad_scale` rescales accumulated sums into means (1 / batch size).
    pub fn step(&mut self, params: &[Tensor], grad_scale: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let g = g.mapv(|x| x * grad_scale);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let mut data = p.to_array();
            ndarray::Zip::from(&mut data)
                .and(&*m)
                .and(&*v)
                .for_each(|dv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *dv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.set_data(data);
        }
    }
}

pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

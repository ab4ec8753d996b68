//! Reverse-mode autodiff tape over `f64` ndarrays.
//!
//! Values are computed eagerly as ops are recorded, so a graph doubles as a
//! forward evaluator. Calling [`Graph::backward`] on a scalar node fills
//! gradients for every node that `requires_grad`.
//!
//! Tensor rank conventions: feature maps are (C,H,W), matrices (rows,cols),
//! vectors (n,), scalars 0-d.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use super::kernels;

pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    InstanceNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        mean: Array1<f64>,
        istd: Array1<f64>,
    },
    Relu { x: Id },
    LeakyRelu { x: Id, slope: f64 },
    Tanh { x: Id },
    Upsample2 { x: Id },
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Affine { x: Id, scale: f64 },
    Linear { x: Id, w: Id, b: Id },
    L2NormRows { x: Id, norms: Array1<f64> },
    GatherSites { x: Id, idx: Vec<usize> },
    MatmulNT { a: Id, b: Id },
    ConcatCols { a: Id, b: Id },
    ConcatRows { parts: Vec<Id> },
    MaskDiag { x: Id },
    RowLse { x: Id },
    Diag { x: Id },
    Abs { x: Id },
    Square { x: Id },
    MeanAll { x: Id },
    SumAll { x: Id },
    MulConst { x: Id, c: Arr },
    BlurDecimate { x: Id },
    GatherRows { x: Id, idx: Vec<usize> },
}

struct Node {
    value: Arr,
    requires_grad: bool,
    op: Op,
}

/// An autodiff tape. Create one per optimization step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Arr>>,
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}
fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}
fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}
fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, requires_grad: bool, op: Op) -> Id {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Id(self.nodes.len() - 1)
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> Id {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a constant (no gradient tracking).
    pub fn constant(&mut self, value: Arr) -> Id {
        self.leaf(value, false)
    }

    pub fn value(&self, id: Id) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, id: Id) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn grad(&self, id: Id) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ----

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        let (y, cols) = kernels::conv2d_forward(
            as3(self.value(x)),
            as4(self.value(w)),
            as1(self.value(b)),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        // the column matrix is only needed again if backward will run
        let cols = if rg { cols } else { Array2::zeros((0, 0)) };
        self.push(
            y.into_dyn(),
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn instance_norm(&mut self, x: Id, gamma: Id, beta: Id) -> Id {
        const EPS: f64 = 1e-5;
        let (y, mean, istd) = kernels::instance_norm_forward(
            as3(self.value(x)),
            as1(self.value(gamma)),
            as1(self.value(beta)),
            EPS,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            y.into_dyn(),
            rg,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                istd,
            },
        )
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(y, rg, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Id, slope: f64) -> Id {
        let y = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(y, rg, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Id) -> Id {
        let y = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(y, rg, Op::Tanh { x })
    }

    pub fn upsample2(&mut self, x: Id) -> Id {
        let y = kernels::upsample2_forward(as3(self.value(x)));
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::Upsample2 { x })
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let y = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let y = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, rg, Op::Sub { a, b })
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Id, scale: f64, shift: f64) -> Id {
        let y = self.value(x).mapv(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(y, rg, Op::Affine { x, scale })
    }

    /// `x (M,C) . w (C,D) + b (D,)`.
    pub fn linear(&mut self, x: Id, w: Id, b: Id) -> Id {
        let y2 = as2(self.value(x)).dot(&as2(self.value(w)));
        let mut y = y2.into_dyn();
        let bv = as1(self.value(b)).to_owned();
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (o, bi) in row.iter_mut().zip(bv.iter()) {
                *o += bi;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y, rg, Op::Linear { x, w, b })
    }

    /// Normalize each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Id) -> Id {
        let xv = as2(self.value(x));
        let norms = kernels::row_norms(xv);
        let mut y = xv.to_owned();
        for (mut row, n) in y.outer_iter_mut().zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::L2NormRows { x, norms })
    }

    /// Gather flat spatial sites from a (C,H,W) map into an (M,C) matrix.
    pub fn gather_sites(&mut self, x: Id, idx: &[usize]) -> Id {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let hw = h * w;
        let mut y = Array2::<f64>::zeros((idx.len(), c));
        for (m, &site) in idx.iter().enumerate() {
            debug_assert!(site < hw, "site index out of range");
            let (i, j) = (site / w, site % w);
            for ci in 0..c {
                y[[m, ci]] = xv[[ci, i, j]];
            }
        }
        let rg = self.rg(x);
        self.push(
            y.into_dyn(),
            rg,
            Op::GatherSites {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// `a (M,D) . b (N,D)^T -> (M,N)`.
    pub fn matmul_nt(&mut self, a: Id, b: Id) -> Id {
        let y = as2(self.value(a)).dot(&as2(self.value(b)).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(y.into_dyn(), rg, Op::MatmulNT { a, b })
    }

    /// Horizontally stack two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Id, b: Id) -> Id {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let y = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat_cols shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(y.into_dyn(), rg, Op::ConcatCols { a, b })
    }

    /// Vertically stack matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Id]) -> Id {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            y.into_dyn(),
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Copy of a square matrix with the diagonal set to -inf (softmax mask).
    pub fn mask_diag_neg_inf(&mut self, x: Id) -> Id {
        let mut y = as2(self.value(x)).to_owned();
        let m = y.nrows().min(y.ncols());
        for i in 0..m {
            y[[i, i]] = f64::NEG_INFINITY;
        }
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::MaskDiag { x })
    }

    /// Row-wise stabilized log-sum-exp: (M,K) -> (M,).
    pub fn row_logsumexp(&mut self, x: Id) -> Id {
        let y = kernels::row_logsumexp(as2(self.value(x)));
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::RowLse { x })
    }

    /// Diagonal of a square matrix: (M,M) -> (M,).
    pub fn diag(&mut self, x: Id) -> Id {
        let xv = as2(self.value(x));
        let m = xv.nrows();
        let y: Array1<f64> = (0..m).map(|i| xv[[i, i]]).collect();
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::Diag { x })
    }

    pub fn abs(&mut self, x: Id) -> Id {
        let y = self.value(x).mapv(f64::abs);
        let rg = self.rg(x);
        self.push(y, rg, Op::Abs { x })
    }

    pub fn square(&mut self, x: Id) -> Id {
        let y = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(y, rg, Op::Square { x })
    }

    /// Mean over all elements -> 0-d scalar.
    pub fn mean_all(&mut self, x: Id) -> Id {
        let v = self.value(x);
        let y = ndarray::arr0(v.sum() / v.len() as f64).into_dyn();
        let rg = self.rg(x);
        self.push(y, rg, Op::MeanAll { x })
    }

    /// Sum over all elements -> 0-d scalar.
    pub fn sum_all(&mut self, x: Id) -> Id {
        let y = ndarray::arr0(self.value(x).sum()).into_dyn();
        let rg = self.rg(x);
        self.push(y, rg, Op::SumAll { x })
    }

    /// Elementwise product with a constant array of identical shape.
    pub fn mul_const(&mut self, x: Id, c: Arr) -> Id {
        debug_assert_eq!(self.value(x).shape(), c.shape());
        let y = self.value(x) * &c;
        let rg = self.rg(x);
        self.push(y, rg, Op::MulConst { x, c })
    }

    pub fn blur_decimate(&mut self, x: Id) -> Id {
        let y = kernels::blur_decimate_forward(as3(self.value(x)));
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::BlurDecimate { x })
    }

    /// Select rows of a matrix: `y[k,:] = x[idx[k],:]`.
    pub fn gather_rows(&mut self, x: Id, idx: &[usize]) -> Id {
        let xv = as2(self.value(x));
        let mut y = Array2::<f64>::zeros((idx.len(), xv.ncols()));
        for (k, &r) in idx.iter().enumerate() {
            y.row_mut(k).assign(&xv.row(r));
        }
        let rg = self.rg(x);
        self.push(
            y.into_dyn(),
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    // ---- backward ----

    fn accum(&mut self, id: Id, g: Arr) {
        if !self.rg(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Run backprop from a scalar node. Gradients accumulate into every node
    /// reachable from `root` that requires grad.
    pub fn backward(&mut self, root: Id) {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Arr::ones(IxDyn(self.value(root).shape()));
        self.grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.step_backward(i, &g);
            // leaves keep their gradient for the caller
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
    }

    fn step_backward(&mut self, i: usize, g: &Arr) {
        // Ops only reference earlier nodes, so reverse index order is a
        // valid topological order.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let x_dim = as3(self.value(x)).dim();
                let (gx, gw, gb) = kernels::conv2d_backward(
                    as3(g),
                    cols,
                    as4(self.value(w)),
                    x_dim,
                    stride,
                    pad,
                );
                self.accum(x, gx.into_dyn());
                self.accum(w, gw.into_dyn());
                self.accum(b, gb.into_dyn());
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                istd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (gx, gg, gb) = kernels::instance_norm_backward(
                    as3(g),
                    as3(self.value(x)),
                    as1(self.value(gamma)),
                    mean.view(),
                    istd.view(),
                );
                self.accum(x, gx.into_dyn());
                self.accum(gamma, gg.into_dyn());
                self.accum(beta, gb.into_dyn());
            }
            Op::Relu { x } => {
                let x = *x;
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accum(x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                });
                self.accum(x, gx);
            }
            Op::Tanh { x } => {
                let x = *x;
                let mut gx = g.clone();
                gx.zip_mut_with(&self.nodes[i].value, |gv, &yv| *gv *= 1.0 - yv * yv);
                self.accum(x, gx);
            }
            Op::Upsample2 { x } => {
                let x = *x;
                let gx = kernels::upsample2_backward(as3(g));
                self.accum(x, gx.into_dyn());
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.mapv(|v| -v));
            }
            Op::Affine { x, scale } => {
                let (x, scale) = (*x, *scale);
                self.accum(x, g.mapv(|v| scale * v));
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let gm = as2(g);
                let gx = gm.dot(&as2(self.value(w)).t());
                let gw = as2(self.value(x)).t().dot(&gm);
                let gb = gm.sum_axis(Axis(0));
                self.accum(x, gx.into_dyn());
                self.accum(w, gw.into_dyn());
                self.accum(b, gb.into_dyn());
            }
            Op::L2NormRows { x, norms } => {
                let x = *x;
                let y = as2(&self.nodes[i].value);
                let gm = as2(g);
                let mut gx = Array2::<f64>::zeros(y.dim());
                for (r, n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = gm.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter())) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accum(x, gx.into_dyn());
            }
            Op::GatherSites { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let xv = as3(self.value(x));
                let (c, h, w) = xv.dim();
                let gm = as2(g);
                let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
                for (m, &site) in idx.iter().enumerate() {
                    let (ii, jj) = (site / w, site % w);
                    for ci in 0..c {
                        gx[[ci, ii, jj]] += gm[[m, ci]];
                    }
                }
                self.accum(x, gx.into_dyn());
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let gm = as2(g);
                let ga = gm.dot(&as2(self.value(b)));
                let gb = gm.t().dot(&as2(self.value(a)));
                self.accum(a, ga.into_dyn());
                self.accum(b, gb.into_dyn());
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let ka = as2(self.value(a)).ncols();
                let gm = as2(g);
                let ga = gm.slice(ndarray::s![.., ..ka]).to_owned();
                let gb = gm.slice(ndarray::s![.., ka..]).to_owned();
                self.accum(a, ga.into_dyn());
                self.accum(b, gb.into_dyn());
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let gm = as2(g);
                let mut row = 0;
                for p in parts {
                    let n = as2(self.value(p)).nrows();
                    let gp = gm.slice(ndarray::s![row..row + n, ..]).to_owned();
                    row += n;
                    self.accum(p, gp.into_dyn());
                }
            }
            Op::MaskDiag { x } => {
                let x = *x;
                let mut gx = as2(g).to_owned();
                let m = gx.nrows().min(gx.ncols());
                for r in 0..m {
                    gx[[r, r]] = 0.0;
                }
                self.accum(x, gx.into_dyn());
            }
            Op::RowLse { x } => {
                let x = *x;
                let lse = as1(&self.nodes[i].value);
                let gv = as1(g);
                let xv = as2(self.value(x));
                let mut gx = Array2::<f64>::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let (l, gr) = (lse[r], gv[r]);
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(xv.row(r).iter()) {
                        // exp(-inf - l) = 0 handles masked entries
                        *o = gr * (v - l).exp();
                    }
                }
                self.accum(x, gx.into_dyn());
            }
            Op::Diag { x } => {
                let x = *x;
                let gv = as1(g);
                let m = gv.len();
                let mut gx = Array2::<f64>::zeros((m, m));
                for r in 0..m {
                    gx[[r, r]] = gv[r];
                }
                self.accum(x, gx.into_dyn());
            }
            Op::Abs { x } => {
                let x = *x;
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(x), |gv, &xv| {
                    *gv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(x, gx);
            }
            Op::Square { x } => {
                let x = *x;
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(x), |gv, &xv| *gv *= 2.0 * xv);
                self.accum(x, gx);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.value(x).len() as f64;
                let gs = g.iter().next().copied().unwrap() / n;
                let gx = Arr::from_elem(IxDyn(self.value(x).shape()), gs);
                self.accum(x, gx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let gs = g.iter().next().copied().unwrap();
                let gx = Arr::from_elem(IxDyn(self.value(x).shape()), gs);
                self.accum(x, gx);
            }
            Op::MulConst { x, c } => {
                let x = *x;
                let gx = g * c;
                self.accum(x, gx);
            }
            Op::BlurDecimate { x } => {
                let x = *x;
                let dim = as3(self.value(x)).dim();
                let gx = kernels::blur_decimate_backward(as3(g), dim);
                self.accum(x, gx.into_dyn());
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let gm = as2(g);
                let mut gx = Array2::<f64>::zeros(as2(self.value(x)).dim());
                for (k, &r) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(r);
                    row += &gm.row(k);
                }
                self.accum(x, gx.into_dyn());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn_like(shape: &[usize], rng: &mut ChaCha12Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central finite-difference check of `grad(inputs[check])` for a scalar
    /// function built by `f` over leaf nodes.
    fn fd_check(
        shapes: &[&[usize]],
        check: usize,
        f: impl Fn(&mut Graph, &[Id]) -> Id,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let inputs: Vec<Arr> = shapes.iter().map(|s| randn_like(s, &mut rng)).collect();

        let mut g = Graph::new();
        let ids: Vec<Id> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let out = f(&mut g, &ids);
        g.backward(out);
        let analytic = g.grad(ids[check]).expect("grad missing").clone();

        let eps = 1e-5;
        let mut fd = inputs[check].clone();
        for idx in 0..fd.len() {
            let eval = |delta: f64| -> f64 {
                let mut mod_inputs = inputs.clone();
                mod_inputs[check].as_slice_mut().unwrap()[idx] += delta;
                let mut gg = Graph::new();
                let ids: Vec<Id> = mod_inputs.iter().map(|v| gg.leaf(v.clone(), false)).collect();
                let out = f(&mut gg, &ids);
                gg.scalar(out)
            };
            let d = (eval(eps) - eval(-eps)) / (2.0 * eps);
            fd.as_slice_mut().unwrap()[idx] = d;
        }
        let denom = analytic
            .iter()
            .chain(fd.iter())
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        let max_err = analytic
            .iter()
            .zip(fd.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(
            max_err / denom < tol,
            "fd mismatch: max abs err {max_err:.3e}, scale {denom:.3e}"
        );
    }

    #[test]
    fn conv_instance_norm_tanh_gradients() {
        for check in 0..3 {
            fd_check(
                &[&[2, 6, 6], &[3, 2, 3, 3], &[3]],
                check,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1);
                    let t = g.tanh(y);
                    g.mean_all(t)
                },
                7 + check as u64,
                1e-6,
            );
        }
    }

    #[test]
    fn strided_conv_and_upsample_gradients() {
        fd_check(
            &[&[1, 6, 6], &[2, 1, 3, 3], &[2]],
            0,
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                let u = g.upsample2(y);
                let r = g.leaky_relu(u, 0.2);
                g.sum_all(r)
            },
            11,
            1e-6,
        );
    }

    #[test]
    fn instance_norm_gradients() {
        for check in 0..3 {
            fd_check(
                &[&[2, 5, 5], &[2], &[2]],
                check,
                |g, ids| {
                    let y = g.instance_norm(ids[0], ids[1], ids[2]);
                    // tanh breaks the normalization symmetry so the input
                    // gradient does not vanish identically
                    let t = g.tanh(y);
                    g.mean_all(t)
                },
                23 + check as u64,
                1e-5,
            );
        }
    }

    #[test]
    fn linear_l2norm_matmul_lse_gradients() {
        for check in 0..2 {
            fd_check(
                &[&[4, 3], &[4, 3]],
                check,
                |g, ids| {
                    let a = g.l2_normalize_rows(ids[0]);
                    let b = g.l2_normalize_rows(ids[1]);
                    let s = g.matmul_nt(a, b);
                    let masked = g.mask_diag_neg_inf(s);
                    let cat = g.concat_cols(s, masked);
                    let lse = g.row_logsumexp(cat);
                    let d = g.diag(s);
                    let diff = g.sub(lse, d);
                    g.sum_all(diff)
                },
                31 + check as u64,
                1e-6,
            );
        }
    }

    #[test]
    fn gather_blur_abs_gradients() {
        fd_check(
            &[&[2, 8, 8]],
            0,
            |g, ids| {
                let p = g.blur_decimate(ids[0]);
                let a = g.abs(p);
                let m = g.mean_all(a);
                let sites = g.gather_sites(ids[0], &[0, 5, 63, 17]);
                let sm = g.mean_all(sites);
                let tot = g.add(m, sm);
                g.affine(tot, 3.0, 1.0)
            },
            41,
            1e-6,
        );
    }

    #[test]
    fn concat_rows_and_mulconst_gradients() {
        fd_check(
            &[&[2, 3], &[3, 3]],
            0,
            |g, ids| {
                let cat = g.concat_rows(&[ids[0], ids[1]]);
                let w = Arr::from_shape_fn(IxDyn(&[5, 3]), |ix| (ix[0] + ix[1]) as f64 * 0.1 + 0.3);
                let ww = g.mul_const(cat, w);
                g.sum_all(ww)
            },
            43,
            1e-7,
        );
    }

    #[test]
    fn values_match_plain_math() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn_like(&[3, 4, 4], &mut rng);
        let w = randn_like(&[2, 3, 3, 3], &mut rng);
        let b = randn_like(&[2], &mut rng);
        let mut g = Graph::new();
        let (xi, wi, bi) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xi, wi, bi, 1, 1);
        let (expect, _) = kernels::conv2d_forward(
            x.view().into_dimensionality().unwrap(),
            w.view().into_dimensionality().unwrap(),
            b.view().into_dimensionality().unwrap(),
            1,
            1,
        );
        assert_eq!(g.value(y), &expect.into_dyn());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Arr::zeros(IxDyn(&[2, 2])), true);
        let y = g.relu(x);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut g2 = Graph::new();
            let x2 = g2.leaf(Arr::zeros(IxDyn(&[2, 2])), true);
            let y2 = g2.relu(x2);
            g2.backward(y2);
        }));
        assert!(result.is_err());
        let s = g.mean_all(y);
        g.backward(s);
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn no_grad_leaves_receive_nothing() {
        let mut g = Graph::new();
        let a = g.leaf(Arr::ones(IxDyn(&[3])), true);
        let b = g.constant(Arr::ones(IxDyn(&[3])));
        let y = g.add(a, b);
        let s = g.sum_all(y);
        g.backward(s);
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn conv_shapes() {
        let x = Array3::<f64>::zeros((3, 64, 64)).into_dyn();
        let w = Array4::<f64>::zeros((8, 3, 7, 7)).into_dyn();
        let b = Array1::<f64>::zeros(8).into_dyn();
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv2d(xi, wi, bi, 1, 3);
        assert_eq!(g.value(y).shape(), &[8, 64, 64]);

        let w2 = Array4::<f64>::zeros((4, 8, 3, 3)).into_dyn();
        let b2 = Array1::<f64>::zeros(4).into_dyn();
        let (wi2, bi2) = (g.constant(w2), g.constant(b2));
        let y2 = g.conv2d(y, wi2, bi2, 2, 1);
        assert_eq!(g.value(y2).shape(), &[4, 32, 32]);
    }
}

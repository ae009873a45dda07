//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward evaluation is eager: every operation computes its value when
//! recorded. `backward` then replays the tape in reverse, accumulating
//! vector-Jacobian products into per-node gradients. Values are dynamic-rank
//! `f64` arrays; rank and shape conventions are documented per operation.
//!
//! Discrete choices (neighbor selection) happen outside the tape: callers
//! read forward values, pick indices, and record gathers with the indices
//! frozen, so gradients flow through the selected entries only.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// Elementwise a + b, identical shapes.
    Add(NodeId, NodeId),
    /// Elementwise a − b, identical shapes.
    Sub(NodeId, NodeId),
    /// c · a.
    Scale(NodeId, f64),
    /// Elementwise a ⊙ b, identical shapes.
    MulElem(NodeId, NodeId),
    /// Σ over all elements → rank-0 scalar.
    SumAll(NodeId),
    /// (m×k)·(k×n) matrix product.
    MatMul(NodeId, NodeId),
    /// (m×k)·(n×k)ᵀ matrix product.
    MatMulNT(NodeId, NodeId),
    /// Row-wise softmax of a 2-D array.
    SoftmaxRows(NodeId),
    /// 3×3 convolution, zero padding 1: x (Ci,H,W), w (Co,Ci,3,3), b (Co).
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    /// Pointwise channel map: x (Ci,H,W), w (Co,Ci), no bias.
    Conv1x1 { x: NodeId, w: NodeId },
    /// (C·s², H, W) → (C, sH, sW) depth-to-space.
    PixelShuffle { x: NodeId, s: usize },
    /// Stride-2 phase subset (pr, pc) of a 3-D map.
    PhaseExtract { x: NodeId, pr: usize, pc: usize },
    /// Interleave four equal-shape subsets back to full resolution, phase
    /// order (0,0),(0,1),(1,0),(1,1). The same node may appear repeatedly.
    PhaseRecompose { subsets: [NodeId; 4] },
    /// 2×2 mean pooling of a 3-D map.
    MeanPool2(NodeId),
    /// Flatten patch windows to rows: (C,H,W) → (N, C·patch²).
    ExtractPatches { x: NodeId, patch: usize, stride: usize },
    /// Overlap-averaging scatter of patch rows onto a (c,h,w) grid.
    FoldAverage { x: NodeId, coords: Vec<(usize, usize)>, c: usize, h: usize, w: usize, patch: usize },
    /// Each row repeated `times` consecutive times.
    RepeatRows { x: NodeId, times: usize },
    /// Row gather by frozen indices.
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Row-wise squared norm: (n,d) → (n,1).
    SqRowNorm(NodeId),
    /// Same data, new shape.
    Reshape { x: NodeId },
    /// Column-wise concatenation of 2-D arrays with equal row counts.
    ConcatCols(Vec<NodeId>),
    /// Σₖ alpha[k]·inputs[k]; alpha is a rank-1 node of matching length.
    AlphaCombine { inputs: Vec<NodeId>, alpha: NodeId },
    /// factor · alpha[index] · x.
    ScaleByElement { x: NodeId, alpha: NodeId, index: usize, factor: f64 },
    /// (C,h,w) → (h·w, C), node order row-major.
    FlattenSpatial(NodeId),
    /// (h·w, C) → (C,h,w), inverse of FlattenSpatial.
    UnflattenSpatial { x: NodeId, c: usize, h: usize, w: usize },
    /// Reflect-pad a 3-D map on the bottom/right edges only.
    ReflectPad { x: NodeId },
    /// Keep the top-left h×w window of a 3-D map.
    Crop { x: NodeId, h: usize, w: usize },
    /// Mean absolute difference → rank-0 scalar.
    L1Loss(NodeId, NodeId),
    /// Grouped weighted sum: weights (Nq,K), values (Nq·K,D) → (Nq,D),
    /// out[i] = Σₛ weights[i,s]·values[i·K+s].
    WeightedGroupSum { weights: NodeId, values: NodeId },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of one scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`; zeros-shaped None means the node does not
    /// influence the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }
}

/// Reflection of index `i` into [0, n) with the edge-repeat-free convention
/// (period 2n−2).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Unrolls zero-padded 3×3 neighborhoods into a (ci·9) × (h·w) matrix so the
/// convolution becomes one matrix product; row (c·3+di)·3+dj of column
/// i·w+j holds x[c, i+di−1, j+dj−1].
fn im2col3(x: &Array3<f64>) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let mut col = Array2::zeros((ci * 9, h * w));
    for c in 0..ci {
        for di in 0..3 {
            let lo = 1usize.saturating_sub(di);
            let hi = (h + 1 - di).min(h);
            for dj in 0..3 {
                let r = (c * 3 + di) * 3 + dj;
                for i in lo..hi {
                    let y = i + di - 1;
                    let jlo = 1usize.saturating_sub(dj);
                    let jhi = (w + 1 - dj).min(w);
                    for j in jlo..jhi {
                        col[[r, i * w + j]] = x[[c, y, j + dj - 1]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: folds a (ci·9) × (h·w) matrix back onto the
/// (ci, h, w) grid, summing the overlapping taps.
fn col2im3(col: &Array2<f64>, ci: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((ci, h, w));
    for c in 0..ci {
        for di in 0..3 {
            let lo = 1usize.saturating_sub(di);
            let hi = (h + 1 - di).min(h);
            for dj in 0..3 {
                let r = (c * 3 + di) * 3 + dj;
                for i in lo..hi {
                    let y = i + di - 1;
                    let jlo = 1usize.saturating_sub(dj);
                    let jhi = (w + 1 - dj).min(w);
                    for j in jlo..jhi {
                        x[[c, y, j + dj - 1]] += col[[r, i * w + j]];
                    }
                }
            }
        }
    }
    x
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul_elem")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::MulElem(a, b)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    fn as2(&self, id: NodeId, what: &str) -> Result<Array2<f64>> {
        self.value(id)
            .clone()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape(format!("{what}: rank-2 array expected, got {:?}", self.value(id).shape())))
    }

    fn as3(&self, id: NodeId, what: &str) -> Result<Array3<f64>> {
        self.value(id)
            .clone()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape(format!("{what}: rank-3 array expected, got {:?}", self.value(id).shape())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.as2(a, "matmul lhs")?;
        let bv = self.as2(b, "matmul rhs")?;
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                av.nrows(),
                av.ncols(),
                bv.nrows(),
                bv.ncols()
            )));
        }
        Ok(self.push(av.dot(&bv).into_dyn(), Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.as2(a, "matmul_nt lhs")?;
        let bv = self.as2(b, "matmul_nt rhs")?;
        if av.ncols() != bv.ncols() {
            return Err(Error::Shape(format!(
                "matmul_nt: {}x{} times transposed {}x{}",
                av.nrows(),
                av.ncols(),
                bv.nrows(),
                bv.ncols()
            )));
        }
        Ok(self.push(av.dot(&bv.t()).into_dyn(), Op::MatMulNT(a, b)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.as2(a, "softmax_rows")?;
        let mut out = av;
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(out.into_dyn(), Op::SoftmaxRows(a)))
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.as3(x, "conv3x3 input")?;
        let wv = self
            .value(w)
            .clone()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape("conv3x3 weight must be rank 4".into()))?;
        let bv = self
            .value(b)
            .clone()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("conv3x3 bias must be rank 1".into()))?;
        let (ci, h, wd) = xv.dim();
        let (co, wci, kh, kw) = wv.dim();
        if wci != ci || kh != 3 || kw != 3 || bv.len() != co {
            return Err(Error::Shape(format!(
                "conv3x3: input {}ch, weight {:?}, bias {}",
                ci,
                wv.dim(),
                bv.len()
            )));
        }
        let col = im2col3(&xv);
        let w_mat = wv
            .into_shape_with_order((co, ci * 9))
            .expect("conv weight is contiguous");
        let mut out = w_mat.dot(&col);
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bv[o];
        }
        let out = out
            .into_shape_with_order((co, h, wd))
            .expect("matmul output is contiguous");
        Ok(self.push(out.into_dyn(), Op::Conv3x3 { x, w, b }))
    }

    pub fn conv1x1(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = self.as3(x, "conv1x1 input")?;
        let wv = self.as2(w, "conv1x1 weight")?;
        let (ci, h, wd) = xv.dim();
        if wv.ncols() != ci {
            return Err(Error::Shape(format!(
                "conv1x1: weight {}x{} against {} input channels",
                wv.nrows(),
                wv.ncols(),
                ci
            )));
        }
        let co = wv.nrows();
        let x_mat = xv
            .into_shape_with_order((ci, h * wd))
            .expect("conv1x1 input is contiguous");
        let out = wv
            .dot(&x_mat)
            .into_shape_with_order((co, h, wd))
            .expect("matmul output is contiguous");
        Ok(self.push(out.into_dyn(), Op::Conv1x1 { x, w }))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, s: usize) -> Result<NodeId> {
        let xv = self.as3(x, "pixel_shuffle input")?;
        let (c_in, h, w) = xv.dim();
        if s == 0 || c_in % (s * s) != 0 {
            return Err(Error::Shape(format!(
                "pixel_shuffle: {} channels not divisible by {}²",
                c_in, s
            )));
        }
        let c = c_in / (s * s);
        let mut out = Array3::zeros((c, h * s, w * s));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for di in 0..s {
                        for dj in 0..s {
                            out[[ch, i * s + di, j * s + dj]] = xv[[ch * s * s + di * s + dj, i, j]];
                        }
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::PixelShuffle { x, s }))
    }

    pub fn phase_extract(&mut self, x: NodeId, pr: usize, pc: usize) -> Result<NodeId> {
        let xv = self.as3(x, "phase_extract input")?;
        let (c, h, w) = xv.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "phase extraction needs even dimensions, got {}x{}",
                h, w
            )));
        }
        let out = Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, col)| xv[[ci, 2 * r + pr, 2 * col + pc]]);
        Ok(self.push(out.into_dyn(), Op::PhaseExtract { x, pr, pc }))
    }

    pub fn phase_recompose(&mut self, subsets: [NodeId; 4]) -> Result<NodeId> {
        let first = self.as3(subsets[0], "phase_recompose subset")?;
        let (c, sh, sw) = first.dim();
        for &s in &subsets[1..] {
            if self.value(s).shape() != [c, sh, sw] {
                return Err(Error::Shape(format!(
                    "phase_recompose: subset shape {:?} differs from {:?}",
                    self.value(s).shape(),
                    [c, sh, sw]
                )));
            }
        }
        const PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let mut out = Array3::zeros((c, 2 * sh, 2 * sw));
        for (q, &(pr, pc)) in PHASES.iter().enumerate() {
            let sv = self.as3(subsets[q], "phase_recompose subset")?;
            for ci in 0..c {
                for r in 0..sh {
                    for col in 0..sw {
                        out[[ci, 2 * r + pr, 2 * col + pc]] = sv[[ci, r, col]];
                    }
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::PhaseRecompose { subsets }))
    }

    pub fn mean_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.as3(x, "mean_pool2 input")?;
        let (c, h, w) = xv.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "2x2 pooling needs even dimensions, got {}x{}",
                h, w
            )));
        }
        let out = Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, col)| {
            (xv[[ci, 2 * r, 2 * col]]
                + xv[[ci, 2 * r, 2 * col + 1]]
                + xv[[ci, 2 * r + 1, 2 * col]]
                + xv[[ci, 2 * r + 1, 2 * col + 1]])
                / 4.0
        });
        Ok(self.push(out.into_dyn(), Op::MeanPool2(x)))
    }

    /// Patch corners step by `stride` from (0,0); rows come out in row-major
    /// corner order, each a channel-major flattening, matching the eager
    /// patch extraction.
    pub fn extract_patches(&mut self, x: NodeId, patch: usize, stride: usize) -> Result<NodeId> {
        let xv = self.as3(x, "extract_patches input")?;
        let (c, h, w) = xv.dim();
        if patch == 0 || stride == 0 {
            return Err(Error::Parameter("patch and stride must be positive".into()));
        }
        if patch > h || patch > w {
            return Err(Error::Dimension(format!(
                "patch {} does not fit in a {}x{} map",
                patch, h, w
            )));
        }
        let rows: Vec<usize> = (0..=h - patch).step_by(stride).collect();
        let cols: Vec<usize> = (0..=w - patch).step_by(stride).collect();
        let mut out = Array2::zeros((rows.len() * cols.len(), c * patch * patch));
        let mut i = 0;
        for &r in &rows {
            for &col in &cols {
                let mut t = 0;
                for ci in 0..c {
                    for pr in 0..patch {
                        for pc in 0..patch {
                            out[[i, t]] = xv[[ci, r + pr, col + pc]];
                            t += 1;
                        }
                    }
                }
                i += 1;
            }
        }
        Ok(self.push(out.into_dyn(), Op::ExtractPatches { x, patch, stride }))
    }

    /// Corner list for the patch grid of [`Tape::extract_patches`].
    pub fn patch_coords(h: usize, w: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut coords = Vec::new();
        for r in (0..=h - patch).step_by(stride) {
            for c in (0..=w - patch).step_by(stride) {
                coords.push((r, c));
            }
        }
        coords
    }

    pub fn fold_average(
        &mut self,
        x: NodeId,
        coords: Vec<(usize, usize)>,
        c: usize,
        h: usize,
        w: usize,
        patch: usize,
    ) -> Result<NodeId> {
        let xv = self.as2(x, "fold_average input")?;
        if xv.nrows() != coords.len() || xv.ncols() != c * patch * patch {
            return Err(Error::Shape(format!(
                "fold_average: {} rows x {} cols against {} coords and dim {}",
                xv.nrows(),
                xv.ncols(),
                coords.len(),
                c * patch * patch
            )));
        }
        let mut acc = Array3::<f64>::zeros((c, h, w));
        let mut count = Array2::<f64>::zeros((h, w));
        for (i, &(r, col)) in coords.iter().enumerate() {
            let mut t = 0;
            for ci in 0..c {
                for pr in 0..patch {
                    for pc in 0..patch {
                        acc[[ci, r + pr, col + pc]] += xv[[i, t]];
                        t += 1;
                    }
                }
            }
            for pr in 0..patch {
                for pc in 0..patch {
                    count[[r + pr, col + pc]] += 1.0;
                }
            }
        }
        if count.iter().any(|&v| v == 0.0) {
            return Err(Error::Shape("fold_average: grid not fully covered".into()));
        }
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    acc[[ci, r, col]] /= count[[r, col]];
                }
            }
        }
        Ok(self.push(acc.into_dyn(), Op::FoldAverage { x, coords, c, h, w, patch }))
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let xv = self.as2(x, "repeat_rows input")?;
        let (n, d) = xv.dim();
        let out = Array2::from_shape_fn((n * times, d), |(i, j)| xv[[i / times, j]]);
        Ok(self.push(out.into_dyn(), Op::RepeatRows { x, times }))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.as2(x, "gather_rows input")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.nrows()) {
            return Err(Error::Shape(format!(
                "gather_rows: index {} out of {} rows",
                bad,
                xv.nrows()
            )));
        }
        let out = Array2::from_shape_fn((idx.len(), xv.ncols()), |(i, j)| xv[[idx[i], j]]);
        Ok(self.push(out.into_dyn(), Op::GatherRows { x, idx }))
    }

    pub fn sq_row_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.as2(x, "sq_row_norm input")?;
        let out = Array2::from_shape_fn((xv.nrows(), 1), |(i, _)| {
            let mut s = 0.0;
            for j in 0..xv.ncols() {
                s += xv[[i, j]] * xv[[i, j]];
            }
            s
        });
        Ok(self.push(out.into_dyn(), Op::SqRowNorm(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "reshape: {} elements into {:?}",
                xv.len(),
                shape
            )));
        }
        let flat: Vec<f64> = xv.iter().cloned().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("length checked");
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Shape("concat_cols: nothing to concatenate".into()));
        }
        let mats: Vec<Array2<f64>> = ids
            .iter()
            .map(|&id| self.as2(id, "concat_cols input"))
            .collect::<Result<_>>()?;
        let n = mats[0].nrows();
        if mats.iter().any(|m| m.nrows() != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out.into_dyn(), Op::ConcatCols(ids.to_vec())))
    }

    pub fn alpha_combine(&mut self, inputs: &[NodeId], alpha: NodeId) -> Result<NodeId> {
        let av = self
            .value(alpha)
            .clone()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("alpha_combine: coefficients must be rank 1".into()))?;
        if av.len() != inputs.len() {
            return Err(Error::Shape(format!(
                "alpha_combine: {} coefficients for {} inputs",
                av.len(),
                inputs.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Shape("alpha_combine: no inputs".into()));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for &id in inputs {
            if self.value(id).shape() != shape.as_slice() {
                return Err(Error::Shape("alpha_combine: input shapes differ".into()));
            }
        }
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (k, &id) in inputs.iter().enumerate() {
            out.scaled_add(av[k], self.value(id));
        }
        Ok(self.push(out, Op::AlphaCombine { inputs: inputs.to_vec(), alpha }))
    }

    pub fn scale_by_element(&mut self, x: NodeId, alpha: NodeId, index: usize, factor: f64) -> Result<NodeId> {
        let av = self
            .value(alpha)
            .clone()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("scale_by_element: coefficients must be rank 1".into()))?;
        if index >= av.len() {
            return Err(Error::Shape(format!(
                "scale_by_element: index {} out of {}",
                index,
                av.len()
            )));
        }
        let v = self.value(x).mapv(|t| factor * av[index] * t);
        Ok(self.push(v, Op::ScaleByElement { x, alpha, index, factor }))
    }

    pub fn flatten_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.as3(x, "flatten_spatial input")?;
        let (c, h, w) = xv.dim();
        let out = Array2::from_shape_fn((h * w, c), |(n, ci)| xv[[ci, n / w, n % w]]);
        Ok(self.push(out.into_dyn(), Op::FlattenSpatial(x)))
    }

    pub fn unflatten_spatial(&mut self, x: NodeId, c: usize, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.as2(x, "unflatten_spatial input")?;
        if xv.nrows() != h * w || xv.ncols() != c {
            return Err(Error::Shape(format!(
                "unflatten_spatial: {}x{} into ({},{},{})",
                xv.nrows(),
                xv.ncols(),
                c,
                h,
                w
            )));
        }
        let out = Array3::from_shape_fn((c, h, w), |(ci, r, col)| xv[[r * w + col, ci]]);
        Ok(self.push(out.into_dyn(), Op::UnflattenSpatial { x, c, h, w }))
    }

    pub fn reflect_pad(&mut self, x: NodeId, pad_b: usize, pad_r: usize) -> Result<NodeId> {
        let xv = self.as3(x, "reflect_pad input")?;
        let (c, h, w) = xv.dim();
        let out = Array3::from_shape_fn((c, h + pad_b, w + pad_r), |(ci, r, col)| {
            xv[[ci, reflect_index(r as isize, h), reflect_index(col as isize, w)]]
        });
        Ok(self.push(out.into_dyn(), Op::ReflectPad { x }))
    }

    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.as3(x, "crop input")?;
        let (c, xh, xw) = xv.dim();
        if h > xh || w > xw {
            return Err(Error::Shape(format!(
                "crop: {}x{} out of {}x{}",
                h, w, xh, xw
            )));
        }
        let out = Array3::from_shape_fn((c, h, w), |(ci, r, col)| xv[[ci, r, col]]);
        Ok(self.push(out.into_dyn(), Op::Crop { x, h, w }))
    }

    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), s / n), Op::L1Loss(a, b)))
    }

    pub fn weighted_group_sum(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        let wv = self.as2(weights, "weighted_group_sum weights")?;
        let vv = self.as2(values, "weighted_group_sum values")?;
        let (nq, k) = wv.dim();
        if vv.nrows() != nq * k {
            return Err(Error::Shape(format!(
                "weighted_group_sum: {} value rows for {}x{} weights",
                vv.nrows(),
                nq,
                k
            )));
        }
        let d = vv.ncols();
        let mut out = Array2::zeros((nq, d));
        for i in 0..nq {
            for s in 0..k {
                let w = wv[[i, s]];
                for t in 0..d {
                    out[[i, t]] += w * vv[[i * k + s, t]];
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::WeightedGroupSum { weights, values }))
    }

    /// Reverse pass from a rank-0 loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).shape().is_empty() {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_vjp(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_vjp(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.mapv(|v| -v));
            }
            Op::Scale(a, c) => {
                Self::add_grad(grads, *a, g.mapv(|v| c * v));
            }
            Op::MulElem(a, b) => {
                Self::add_grad(grads, *a, g * &self.nodes[b.0].value);
                Self::add_grad(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::SumAll(a) => {
                let gs = g[[]];
                let shape = self.nodes[a.0].value.shape().to_vec();
                Self::add_grad(grads, *a, ArrayD::from_elem(IxDyn(&shape), gs));
            }
            Op::MatMul(a, b) => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("matmul grad rank");
                let av = self.as2(*a, "matmul lhs")?;
                let bv = self.as2(*b, "matmul rhs")?;
                Self::add_grad(grads, *a, gv.dot(&bv.t()).into_dyn());
                Self::add_grad(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::MatMulNT(a, b) => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("matmul_nt grad rank");
                let av = self.as2(*a, "matmul_nt lhs")?;
                let bv = self.as2(*b, "matmul_nt rhs")?;
                Self::add_grad(grads, *a, gv.dot(&bv).into_dyn());
                Self::add_grad(grads, *b, gv.t().dot(&av).into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let y = self.as2(NodeId(id), "softmax value")?;
                let gv = g.clone().into_dimensionality::<Ix2>().expect("softmax grad rank");
                let mut dx = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let mut dot = 0.0;
                    for j in 0..y.ncols() {
                        dot += y[[i, j]] * gv[[i, j]];
                    }
                    for j in 0..y.ncols() {
                        dx[[i, j]] = y[[i, j]] * (gv[[i, j]] - dot);
                    }
                }
                Self::add_grad(grads, *a, dx.into_dyn());
            }
            Op::Conv3x3 { x, w, b } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("conv grad rank");
                let xv = self.as3(*x, "conv3x3 input")?;
                let wv = self
                    .value(*w)
                    .clone()
                    .into_dimensionality::<Ix4>()
                    .expect("conv weight rank");
                let (ci, h, wd) = xv.dim();
                let co = wv.dim().0;

                let g_mat = gv
                    .into_shape_with_order((co, h * wd))
                    .expect("conv grad is contiguous");
                let w_mat = wv
                    .into_shape_with_order((co, ci * 9))
                    .expect("conv weight is contiguous");
                let col = im2col3(&xv);

                let db = g_mat.sum_axis(Axis(1));
                let dw = g_mat
                    .dot(&col.t())
                    .into_shape_with_order((co, ci, 3, 3))
                    .expect("weight grad is contiguous");
                let dx = col2im3(&w_mat.t().dot(&g_mat), ci, h, wd);

                Self::add_grad(grads, *x, dx.into_dyn());
                Self::add_grad(grads, *w, dw.into_dyn());
                Self::add_grad(grads, *b, db.into_dyn());
            }
            Op::Conv1x1 { x, w } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("conv1x1 grad rank");
                let xv = self.as3(*x, "conv1x1 input")?;
                let wv = self.as2(*w, "conv1x1 weight")?;
                let (ci, h, wd) = xv.dim();
                let co = gv.dim().0;
                let g_mat = gv
                    .into_shape_with_order((co, h * wd))
                    .expect("conv1x1 grad is contiguous");
                let x_mat = xv
                    .into_shape_with_order((ci, h * wd))
                    .expect("conv1x1 input is contiguous");
                let dx = wv
                    .t()
                    .dot(&g_mat)
                    .into_shape_with_order((ci, h, wd))
                    .expect("input grad is contiguous");
                let dw = g_mat.dot(&x_mat.t());
                Self::add_grad(grads, *x, dx.into_dyn());
                Self::add_grad(grads, *w, dw.into_dyn());
            }
            Op::PixelShuffle { x, s } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("shuffle grad rank");
                let (c, hs, ws) = gv.dim();
                let s = *s;
                let (h, w) = (hs / s, ws / s);
                let mut dx = Array3::<f64>::zeros((c * s * s, h, w));
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            for di in 0..s {
                                for dj in 0..s {
                                    dx[[ch * s * s + di * s + dj, i, j]] = gv[[ch, i * s + di, j * s + dj]];
                                }
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::PhaseExtract { x, pr, pc } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("phase grad rank");
                let (c, sh, sw) = gv.dim();
                let mut dx = Array3::<f64>::zeros((c, 2 * sh, 2 * sw));
                for ci in 0..c {
                    for r in 0..sh {
                        for col in 0..sw {
                            dx[[ci, 2 * r + pr, 2 * col + pc]] = gv[[ci, r, col]];
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::PhaseRecompose { subsets } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("recompose grad rank");
                let (c, h, w) = gv.dim();
                const PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];
                for (q, &(pr, pc)) in PHASES.iter().enumerate() {
                    let sub = Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, col)| {
                        gv[[ci, 2 * r + pr, 2 * col + pc]]
                    });
                    Self::add_grad(grads, subsets[q], sub.into_dyn());
                }
            }
            Op::MeanPool2(x) => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("pool grad rank");
                let (c, sh, sw) = gv.dim();
                let mut dx = Array3::<f64>::zeros((c, 2 * sh, 2 * sw));
                for ci in 0..c {
                    for r in 0..sh {
                        for col in 0..sw {
                            let v = gv[[ci, r, col]] / 4.0;
                            dx[[ci, 2 * r, 2 * col]] = v;
                            dx[[ci, 2 * r, 2 * col + 1]] = v;
                            dx[[ci, 2 * r + 1, 2 * col]] = v;
                            dx[[ci, 2 * r + 1, 2 * col + 1]] = v;
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::ExtractPatches { x, patch, stride } => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("patches grad rank");
                let xv = self.as3(*x, "extract_patches input")?;
                let (c, h, w) = xv.dim();
                let patch = *patch;
                let coords = Self::patch_coords(h, w, patch, *stride);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for (i, &(r, col)) in coords.iter().enumerate() {
                    let mut t = 0;
                    for ci in 0..c {
                        for pr in 0..patch {
                            for pc in 0..patch {
                                dx[[ci, r + pr, col + pc]] += gv[[i, t]];
                                t += 1;
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::FoldAverage { x, coords, c, h, w, patch } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("fold grad rank");
                let (c, h, w, patch) = (*c, *h, *w, *patch);
                let mut count = Array2::<f64>::zeros((h, w));
                for &(r, col) in coords {
                    for pr in 0..patch {
                        for pc in 0..patch {
                            count[[r + pr, col + pc]] += 1.0;
                        }
                    }
                }
                let mut dx = Array2::<f64>::zeros((coords.len(), c * patch * patch));
                for (i, &(r, col)) in coords.iter().enumerate() {
                    let mut t = 0;
                    for ci in 0..c {
                        for pr in 0..patch {
                            for pc in 0..patch {
                                dx[[i, t]] = gv[[ci, r + pr, col + pc]] / count[[r + pr, col + pc]];
                                t += 1;
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::RepeatRows { x, times } => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("repeat grad rank");
                let times = *times;
                let n = gv.nrows() / times;
                let d = gv.ncols();
                let mut dx = Array2::<f64>::zeros((n, d));
                for i in 0..n {
                    for s in 0..times {
                        for j in 0..d {
                            dx[[i, j]] += gv[[i * times + s, j]];
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::GatherRows { x, idx } => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("gather grad rank");
                let xv = self.as2(*x, "gather_rows input")?;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..gv.ncols() {
                        dx[[src, j]] += gv[[i, j]];
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::SqRowNorm(x) => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("sqnorm grad rank");
                let xv = self.as2(*x, "sq_row_norm input")?;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    for j in 0..xv.ncols() {
                        dx[[i, j]] = 2.0 * xv[[i, j]] * gv[[i, 0]];
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::Reshape { x } => {
                let src_shape = self.nodes[x.0].value.shape().to_vec();
                let flat: Vec<f64> = g.iter().cloned().collect();
                let dx = ArrayD::from_shape_vec(IxDyn(&src_shape), flat).expect("same length");
                Self::add_grad(grads, *x, dx);
            }
            Op::ConcatCols(ids) => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("concat grad rank");
                let mut offset = 0;
                for &cid in ids {
                    let cols = self.value(cid).shape()[1];
                    let slice = gv.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                    Self::add_grad(grads, cid, slice.into_dyn());
                    offset += cols;
                }
            }
            Op::AlphaCombine { inputs, alpha } => {
                let av = self
                    .value(*alpha)
                    .clone()
                    .into_dimensionality::<Ix1>()
                    .expect("alpha rank");
                let mut dalpha = Array1::<f64>::zeros(av.len());
                for (k, &id_in) in inputs.iter().enumerate() {
                    Self::add_grad(grads, id_in, g.mapv(|v| av[k] * v));
                    dalpha[k] = self
                        .value(id_in)
                        .iter()
                        .zip(g.iter())
                        .map(|(x, gg)| x * gg)
                        .sum();
                }
                Self::add_grad(grads, *alpha, dalpha.into_dyn());
            }
            Op::ScaleByElement { x, alpha, index, factor } => {
                let av = self
                    .value(*alpha)
                    .clone()
                    .into_dimensionality::<Ix1>()
                    .expect("alpha rank");
                Self::add_grad(grads, *x, g.mapv(|v| factor * av[*index] * v));
                let mut dalpha = Array1::<f64>::zeros(av.len());
                dalpha[*index] = factor
                    * self
                        .value(*x)
                        .iter()
                        .zip(g.iter())
                        .map(|(xv, gg)| xv * gg)
                        .sum::<f64>();
                Self::add_grad(grads, *alpha, dalpha.into_dyn());
            }
            Op::FlattenSpatial(x) => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("flatten grad rank");
                let xv = self.as3(*x, "flatten_spatial input")?;
                let (c, h, w) = xv.dim();
                let dx = Array3::from_shape_fn((c, h, w), |(ci, r, col)| gv[[r * w + col, ci]]);
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::UnflattenSpatial { x, c, h, w } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("unflatten grad rank");
                let (c, h, w) = (*c, *h, *w);
                let dx = Array2::from_shape_fn((h * w, c), |(n, ci)| gv[[ci, n / w, n % w]]);
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::ReflectPad { x } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("pad grad rank");
                let xv = self.as3(*x, "reflect_pad input")?;
                let (c, h, w) = xv.dim();
                let (_, ph, pw) = gv.dim();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for r in 0..ph {
                        for col in 0..pw {
                            dx[[ci, reflect_index(r as isize, h), reflect_index(col as isize, w)]] +=
                                gv[[ci, r, col]];
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::Crop { x, h, w } => {
                let gv = g.clone().into_dimensionality::<Ix3>().expect("crop grad rank");
                let xv = self.as3(*x, "crop input")?;
                let (c, xh, xw) = xv.dim();
                let mut dx = Array3::<f64>::zeros((c, xh, xw));
                for ci in 0..c {
                    for r in 0..*h {
                        for col in 0..*w {
                            dx[[ci, r, col]] = gv[[ci, r, col]];
                        }
                    }
                }
                Self::add_grad(grads, *x, dx.into_dyn());
            }
            Op::L1Loss(a, b) => {
                let gs = g[[]];
                let n = self.value(*a).len() as f64;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| {
                    gs * (x - y).signum() * if x == y { 0.0 } else { 1.0 } / n
                });
                Self::add_grad(grads, *b, da.mapv(|v| -v));
                Self::add_grad(grads, *a, da);
            }
            Op::WeightedGroupSum { weights, values } => {
                let gv = g.clone().into_dimensionality::<Ix2>().expect("group sum grad rank");
                let wv = self.as2(*weights, "weighted_group_sum weights")?;
                let vv = self.as2(*values, "weighted_group_sum values")?;
                let (nq, k) = wv.dim();
                let d = vv.ncols();
                let mut dw = Array2::<f64>::zeros((nq, k));
                let mut dv = Array2::<f64>::zeros(vv.dim());
                for i in 0..nq {
                    for s in 0..k {
                        let mut dot = 0.0;
                        for t in 0..d {
                            dot += gv[[i, t]] * vv[[i * k + s, t]];
                            dv[[i * k + s, t]] = wv[[i, s]] * gv[[i, t]];
                        }
                        dw[[i, s]] = dot;
                    }
                }
                Self::add_grad(grads, *weights, dw.into_dyn());
                Self::add_grad(grads, *values, dv.into_dyn());
            }
        }
        Ok(())
    }
}

//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in call order on a [`Tape`]; every operation
//! returns a [`Var`] handle. [`Tape::backward`] walks the recorded nodes in
//! reverse index order, so each node is visited exactly once and parents
//! always come after their children in the walk.
//!
//! Broadcasting is deliberately absent apart from [`Tape::add_row`]; shapes
//! must otherwise agree exactly.

use crate::error::{NumericsError, Result};
use crate::tensor::{matmul_raw, softmax_in_place, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Silu(Var),
    ClampMin(Var, T),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    PoolRows(Var, usize),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentLogSoftmax(Var, Vec<usize>),
    SegmentLogSumExp(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f64> {
    adjoints: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_segments(op: &'static str, segments: &[usize], len: usize) -> Result<()> {
    let total: usize = segments.iter().sum();
    if total != len {
        return Err(NumericsError::Segments { op, total, len });
    }
    Ok(())
}

fn segment_bounds(segments: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    segments.iter().scan(0usize, |start, &len| {
        let s = *start;
        *start += len;
        Some((s, s + len))
    })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is treated as a constant; nothing is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(NumericsError::UnknownVar(v.0))
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v)?.item()
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        let value = Tensor::new(shape, data).map_err(|e| match e {
            NumericsError::NonFinite { .. } => NumericsError::NonFiniteResult { op: op_name },
            other => other,
        })?;
        let tracked = self.tracked(parents);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn get(&self, v: Var) -> Result<&Tensor<T>> {
        self.value(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.get(a)?.shape(), self.get(b)?.shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.get(a)?;
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.push(name, shape, data, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        let shape = ta.shape().to_vec();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.get(a)?.transpose()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Adds the `1×c` row `bias` to every row of the `r×c` matrix `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.get(a)?, self.get(bias)?);
        let (r, c) = ta.dims2()?;
        if tb.shape() != [1, c] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + tb.data()[j];
            }
        }
        self.push("add_row", vec![r, c], data, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), T::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), T::abs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(T::zero()))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, Op::Silu(a), |x| x / (T::one() + (-x).exp()))
    }

    /// `max(x, floor)` entrywise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.get(a)?.softmax_rows()?;
        let shape = t.shape().to_vec();
        self.push("softmax_rows", shape, t.into_data(), Op::SoftmaxRows(a), &[a])
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.get(a)?.sum();
        self.push("sum", vec![1, 1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.get(a)?;
        if t.numel() == 0 {
            return Err(NumericsError::EmptyRow);
        }
        let m = t.sum() / T::from_f64(t.numel() as f64);
        self.push("mean", vec![1, 1], vec![m], Op::Mean(a), &[a])
    }

    /// Row sums of an `r×c` matrix as an `r×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.get(a)?;
        let (r, c) = t.dims2()?;
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().copied().sum()).collect();
        self.push("sum_rows", vec![r, 1], data, Op::SumRows(a), &[a])
    }

    /// Averages consecutive blocks of `group` rows: `(g·group)×c → g×c`.
    pub fn pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.get(a)?;
        let (r, c) = t.dims2()?;
        if group == 0 || r % group != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "pool_rows",
                left: t.shape().to_vec(),
                right: vec![group],
            });
        }
        let g = r / group;
        let inv = T::one() / T::from_f64(group as f64);
        let mut data = vec![T::zero(); g * c];
        for i in 0..r {
            let out = &mut data[(i / group) * c..(i / group + 1) * c];
            for (o, &v) in out.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                *o = *o + v;
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        self.push("pool_rows", vec![g, c], data, Op::PoolRows(a, group), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.get(a)?;
        let (r, c) = t.dims2()?;
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::min_positive_value() {
                return Err(NumericsError::ZeroNorm { row: i });
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        self.push("normalize_rows", vec![r, c], data, Op::NormalizeRows(a), &[a])
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.get(*parts.first().ok_or(NumericsError::EmptyRow)?)?;
        let c = first.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.get(p)?;
            let (r, pc) = t.dims2()?;
            if pc != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        self.push("concat_rows", vec![rows, c], data, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.get(*parts.first().ok_or(NumericsError::EmptyRow)?)?;
        let r = first.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.get(p)?;
            let (pr, pc) = t.dims2()?;
            if pr != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r],
                    right: t.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.get(p)?.data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![r, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.get(a)?;
        let (r, c) = t.dims2()?;
        if start > end || end > r {
            return Err(NumericsError::OutOfRange {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let data = t.data()[start * c..end * c].to_vec();
        self.push("slice_rows", vec![end - start, c], data, Op::SliceRows(a, start), &[a])
    }

    /// Picks entries by flat row-major index into a `1×n` row.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.get(a)?;
        let len = t.numel();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= len {
                return Err(NumericsError::OutOfRange { op: "gather", index: i, len });
            }
            data.push(t.data()[i]);
        }
        self.push("gather", vec![1, indices.len()], data, Op::Gather(a, indices.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.get(a)?.reshape(shape)?;
        self.push("reshape", shape.to_vec(), t.into_data(), Op::Reshape(a), &[a])
    }

    /// Softmax applied independently to consecutive segments of the
    /// flattened input. Output keeps the input shape.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let t = self.get(a)?;
        check_segments("segment_softmax", segments, t.numel())?;
        let mut data = t.data().to_vec();
        for (s, e) in segment_bounds(segments) {
            if s == e {
                return Err(NumericsError::EmptyRow);
            }
            softmax_in_place(&mut data[s..e]);
        }
        let shape = t.shape().to_vec();
        self.push("segment_softmax", shape, data, Op::SegmentSoftmax(a, segments.to_vec()), &[a])
    }

    pub fn segment_log_softmax(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let t = self.get(a)?;
        check_segments("segment_log_softmax", segments, t.numel())?;
        let mut data = t.data().to_vec();
        for (s, e) in segment_bounds(segments) {
            if s == e {
                return Err(NumericsError::EmptyRow);
            }
            let lse = log_sum_exp(&data[s..e]);
            for v in &mut data[s..e] {
                *v = *v - lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push("segment_log_softmax", shape, data, Op::SegmentLogSoftmax(a, segments.to_vec()), &[a])
    }

    /// Log-sum-exp of each segment of the flattened input, as a `1×S` row.
    pub fn segment_logsumexp(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let t = self.get(a)?;
        check_segments("segment_logsumexp", segments, t.numel())?;
        let mut data = Vec::with_capacity(segments.len());
        for (s, e) in segment_bounds(segments) {
            if s == e {
                return Err(NumericsError::EmptyRow);
            }
            data.push(log_sum_exp(&t.data()[s..e]));
        }
        self.push("segment_logsumexp", vec![1, segments.len()], data, Op::SegmentLogSumExp(a, segments.to_vec()), &[a])
    }

    /// Sum of each segment of the flattened input, as a `1×S` row. Empty
    /// segments sum to zero.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize]) -> Result<Var> {
        let t = self.get(a)?;
        check_segments("segment_sum", segments, t.numel())?;
        let data = segment_bounds(segments)
            .map(|(s, e)| t.data()[s..e].iter().copied().sum())
            .collect();
        self.push("segment_sum", vec![1, segments.len()], data, Op::SegmentSum(a, segments.to_vec()), &[a])
    }

    /// Propagates adjoints from the scalar `output` back to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.get(output)?;
        if out.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::from_parts(out.shape().to_vec(), vec![T::one()]));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |v: Var, f: &dyn Fn(T, T) -> T| -> Vec<T> {
            val(v).data().iter().zip(gd).map(|(&x, &gi)| f(x, gi)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.cols();
                if self.nodes[a.0].tracked {
                    let bt = tb.transpose()?;
                    let ga = matmul_raw(gd, bt.data(), m, n, k);
                    self.accumulate(adj, *a, ga);
                }
                if self.nodes[b.0].tracked {
                    let at = ta.transpose()?;
                    let gb = matmul_raw(at.data(), gd, k, m, n);
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                self.accumulate(adj, *a, gt.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, gd.to_vec());
                self.accumulate(adj, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, gd.to_vec());
                self.accumulate(adj, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = elementwise(*b, &|y, gi| y * gi);
                let gb = elementwise(*a, &|x, gi| x * gi);
                self.accumulate(adj, *a, ga);
                self.accumulate(adj, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(adj, *a, gd.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(a) => self.accumulate(adj, *a, gd.to_vec()),
            Op::AddRow(a, bias) => {
                self.accumulate(adj, *a, gd.to_vec());
                let (r, c) = g.dims2()?;
                let mut gb = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] = gb[j] + gd[i * c + j];
                    }
                }
                self.accumulate(adj, *bias, gb);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(adj, *a, y.iter().zip(gd).map(|(&yi, &gi)| yi * gi).collect());
            }
            Op::Log(a) => {
                let ga = elementwise(*a, &|x, gi| gi / x);
                self.accumulate(adj, *a, ga);
            }
            Op::Abs(a) => {
                let ga = elementwise(*a, &|x, gi| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(adj, *a, ga);
            }
            Op::Relu(a) => {
                let ga = elementwise(*a, &|x, gi| if x > T::zero() { gi } else { T::zero() });
                self.accumulate(adj, *a, ga);
            }
            Op::Silu(a) => {
                let ga = elementwise(*a, &|x, gi| {
                    let s = T::one() / (T::one() + (-x).exp());
                    gi * (s + x * s * (T::one() - s))
                });
                self.accumulate(adj, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let ga = elementwise(*a, &|x, gi| if x > floor { gi } else { T::zero() });
                self.accumulate(adj, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = node.value.dims2()?;
                let y = node.value.data();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: T = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(&yi, &gi)| yi * gi).sum();
                    for j in row {
                        ga[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                self.accumulate(adj, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let v = gd[0] / T::from_f64(n as f64);
                self.accumulate(adj, *a, vec![v; n]);
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut ga = Vec::with_capacity(r * c);
                for &gi in gd.iter().take(r) {
                    ga.extend(std::iter::repeat_n(gi, c));
                }
                self.accumulate(adj, *a, ga);
            }
            Op::PoolRows(a, group) => {
                let (r, c) = val(*a).dims2()?;
                let inv = T::one() / T::from_f64(*group as f64);
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let src = &gd[(i / group) * c..(i / group + 1) * c];
                    ga.extend(src.iter().map(|&v| v * inv));
                }
                self.accumulate(adj, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let (r, c) = x.dims2()?;
                let y = node.value.data();
                let mut ga = vec![T::zero(); r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let norm = x.data()[row.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(&yi, &gi)| yi * gi).sum();
                    for j in row {
                        ga[j] = (gd[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).rows() * c;
                    self.accumulate(adj, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                    }
                    self.accumulate(adj, p, gp);
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let c = src.cols();
                let mut ga = vec![T::zero(); src.numel()];
                ga[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(adj, *a, ga);
            }
            Op::Gather(a, indices) => {
                let mut ga = vec![T::zero(); val(*a).numel()];
                for (&i, &gi) in indices.iter().zip(gd) {
                    ga[i] = ga[i] + gi;
                }
                self.accumulate(adj, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(adj, *a, gd.to_vec()),
            Op::SegmentSoftmax(a, segments) => {
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for (s, e) in segment_bounds(segments) {
                    let dot: T = (s..e).map(|j| y[j] * gd[j]).sum();
                    for j in s..e {
                        ga[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SegmentLogSoftmax(a, segments) => {
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for (s, e) in segment_bounds(segments) {
                    let total: T = gd[s..e].iter().copied().sum();
                    for j in s..e {
                        ga[j] = gd[j] - y[j].exp() * total;
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SegmentLogSumExp(a, segments) => {
                let x = val(*a).data();
                let y = node.value.data();
                let mut ga = vec![T::zero(); x.len()];
                for (k, (s, e)) in segment_bounds(segments).enumerate() {
                    for j in s..e {
                        ga[j] = gd[k] * (x[j] - y[k]).exp();
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SegmentSum(a, segments) => {
                let mut ga = vec![T::zero(); val(*a).numel()];
                for (k, (s, e)) in segment_bounds(segments).enumerate() {
                    for v in &mut ga[s..e] {
                        *v = gd[k];
                    }
                }
                self.accumulate(adj, *a, ga);
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor<T>>], target: Var, grad: Vec<T>) {
        let node = &self.nodes[target.0];
        if !node.tracked {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => {
                let shape = existing.shape().to_vec();
                let summed = existing.data().iter().zip(&grad).map(|(&a, &b)| a + b).collect();
                *existing = Tensor::from_parts(shape, summed);
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), grad));
            }
        }
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![3.0]]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0]]));
        let c = tape.constant(t(&[vec![3.0, 4.0]]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(c), Tensor::zeros(&[1, 2]));
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.0]]));
        assert!(matches!(
            tape.log(x),
            Err(NumericsError::NonFiniteResult { op: "log" })
        ));
    }

    #[test]
    fn normalize_zero_row_fails() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        assert!(matches!(tape.normalize_rows(x), Err(NumericsError::ZeroNorm { row: 1 })));
    }

    #[test]
    fn segment_checks_lengths() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0, 3.0]]));
        assert!(tape.segment_softmax(x, &[1, 1]).is_err());
        assert!(tape.segment_softmax(x, &[1, 0, 2]).is_err());
        let s = tape.segment_sum(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[1.0, 0.0, 5.0]);
    }

    #[test]
    fn sibling_order_does_not_change_adjoints() {
        // x feeds two independent branches; recording them in either order
        // must produce bit-identical adjoints.
        let base = t(&[vec![0.3, -1.2], vec![0.7, 2.1]]);
        let run = |swap: bool| {
            let mut tape = Tape::new();
            let x = tape.param(base.clone());
            let (a, b) = if swap {
                let b = tape.silu(x).unwrap();
                let a = tape.exp(x).unwrap();
                (a, b)
            } else {
                let a = tape.exp(x).unwrap();
                let b = tape.silu(x).unwrap();
                (a, b)
            };
            let s = tape.add(a, b).unwrap();
            let out = tape.sum(s).unwrap();
            tape.backward(out).unwrap().wrt(x)
        };
        assert_eq!(run(false), run(true));
    }
}

//! Minimal dense-array engine with reverse-mode differentiation.
//!
//! Tensors live on an owning [`Tape`]; handles are indices into it. The
//! primitive set is exactly what the codecs and diffusion blocks need: no
//! broadcasting except scalar ops and last-dim bias, all shape changes
//! explicit. Everything is f64.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Index of a recorded tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorHandle(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    SoftmaxLast(usize),
    LayerNormLast(usize, usize, usize),
    ConcatLast(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    AddBiasLast(usize, usize),
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive applications; owns all tensor storage.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

const LN_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, h: TensorHandle) -> &[usize] {
        &self.nodes[h.0].shape
    }

    pub fn values(&self, h: TensorHandle) -> &[f64] {
        &self.nodes[h.0].values
    }

    pub fn scalar_value(&self, h: TensorHandle) -> f64 {
        debug_assert_eq!(self.nodes[h.0].values.len(), 1);
        self.nodes[h.0].values[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> TensorHandle {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node { shape, values, op });
        TensorHandle(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> TensorHandle {
        assert_eq!(values.len(), numel(shape), "leaf value count must match shape");
        self.push(shape.to_vec(), values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorHandle {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorHandle {
        self.leaf(shape, vec![0.0; numel(shape)])
    }

    fn require_same_shape(
        &self,
        op: &'static str,
        a: TensorHandle,
        b: TensorHandle,
    ) -> Result<(), TapeError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorHandle, b: TensorHandle) -> Result<TensorHandle, TapeError> {
        self.require_same_shape("add", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorHandle, b: TensorHandle) -> Result<TensorHandle, TapeError> {
        self.require_same_shape("sub", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorHandle, b: TensorHandle) -> Result<TensorHandle, TapeError> {
        self.require_same_shape("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a.0, b.0)))
    }

    pub fn mul_scalar(&mut self, a: TensorHandle, s: f64) -> TensorHandle {
        let values = self.nodes[a.0].values.iter().map(|x| x * s).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::MulScalar(a.0, s))
    }

    pub fn relu(&mut self, a: TensorHandle) -> TensorHandle {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: TensorHandle) -> TensorHandle {
        let values = self
            .nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Sigmoid(a.0))
    }

    /// Natural log; inputs are clamped below at a tiny positive floor.
    pub fn ln(&mut self, a: TensorHandle) -> TensorHandle {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(LN_EPS).ln()).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Ln(a.0))
    }

    /// Elementwise clamp; gradient passes through in the open interior only.
    pub fn clamp(&mut self, a: TensorHandle, lo: f64, hi: f64) -> TensorHandle {
        let values = self.nodes[a.0].values.iter().map(|x| x.clamp(lo, hi)).collect();
        self.push(self.nodes[a.0].shape.clone(), values, Op::Clamp(a.0, lo, hi))
    }

    /// 2-D `[m,k]x[k,n]` or batched 3-D `[b,m,k]x[b,k,n]` matrix product.
    pub fn matmul(&mut self, a: TensorHandle, b: TensorHandle) -> Result<TensorHandle, TapeError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1usize, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => {
                return Err(TapeError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
            }
        };
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = bi * k * n;
            let co = bi * m * n;
            for i in 0..m {
                for p in 0..k {
                    let x = av[ao + i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = bo + p * n;
                    let crow = co + i * n;
                    for j in 0..n {
                        values[crow + j] += x * bv[brow + j];
                    }
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(shape, values, Op::Matmul(a.0, b.0)))
    }

    /// Row-wise softmax over the last dimension, numerically stabilized.
    pub fn softmax_lastdim(&mut self, a: TensorHandle) -> TensorHandle {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().expect("softmax needs >=1 dim");
        let rows = numel(&shape) / n;
        let av = &self.nodes[a.0].values;
        let mut values = vec![0.0; av.len()];
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                values[r * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                values[r * n + j] /= sum;
            }
        }
        self.push(shape, values, Op::SoftmaxLast(a.0))
    }

    /// Row-wise layer normalization over the last dimension with per-channel
    /// gain and bias vectors.
    pub fn layer_norm_lastdim(
        &mut self,
        x: TensorHandle,
        gain: TensorHandle,
        bias: TensorHandle,
    ) -> Result<TensorHandle, TapeError> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().expect("layer_norm needs >=1 dim");
        for (name, h) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[h.0].shape;
            if s.as_slice() != [n] {
                return Err(TapeError::BadShape {
                    op: "layer_norm_lastdim",
                    shape: s.clone(),
                    reason: format!("{name} must have shape [{n}]"),
                });
            }
        }
        let rows = numel(&shape) / n;
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut values = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                values[r * n + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        Ok(self.push(shape, values, Op::LayerNormLast(x.0, gain.0, bias.0)))
    }

    pub fn concat_lastdim(
        &mut self,
        a: TensorHandle,
        b: TensorHandle,
    ) -> Result<TensorHandle, TapeError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TapeError::ShapeMismatch { op: "concat_lastdim", lhs: sa, rhs: sb });
        }
        let na = sa[sa.len() - 1];
        let nb = sb[sb.len() - 1];
        let rows = numel(&sa) / na;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            values.extend_from_slice(&av[r * na..(r + 1) * na]);
            values.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        Ok(self.push(shape, values, Op::ConcatLast(a.0, b.0)))
    }

    pub fn reshape(&mut self, a: TensorHandle, dims: &[usize]) -> Result<TensorHandle, TapeError> {
        if numel(dims) != self.nodes[a.0].values.len() {
            return Err(TapeError::BadShape {
                op: "reshape",
                shape: dims.to_vec(),
                reason: format!(
                    "element count {} does not match source {:?}",
                    numel(dims),
                    self.nodes[a.0].shape
                ),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(dims.to_vec(), values, Op::Reshape(a.0)))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, a: TensorHandle, axes: &[usize]) -> Result<TensorHandle, TapeError> {
        let shape = self.nodes[a.0].shape.clone();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(TapeError::BadShape {
                op: "permute",
                shape: axes.to_vec(),
                reason: format!("axes must be a permutation of 0..{nd}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let values = permute_values(&self.nodes[a.0].values, &shape, axes);
        Ok(self.push(out_shape, values, Op::Permute(a.0, axes.to_vec())))
    }

    /// Transpose of the last two axes.
    pub fn transpose_last2(&mut self, a: TensorHandle) -> Result<TensorHandle, TapeError> {
        let nd = self.nodes[a.0].shape.len();
        if nd < 2 {
            return Err(TapeError::BadShape {
                op: "transpose_last2",
                shape: self.nodes[a.0].shape.clone(),
                reason: "needs >=2 dims".into(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Adds a `[n]` bias vector to every row of the last dimension.
    pub fn add_bias_lastdim(
        &mut self,
        a: TensorHandle,
        bias: TensorHandle,
    ) -> Result<TensorHandle, TapeError> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().expect("add_bias needs >=1 dim");
        if self.nodes[bias.0].shape.as_slice() != [n] {
            return Err(TapeError::ShapeMismatch {
                op: "add_bias_lastdim",
                lhs: shape,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let rows = numel(&shape) / n;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut values = vec![0.0; av.len()];
        for r in 0..rows {
            for j in 0..n {
                values[r * n + j] = av[r * n + j] + bv[j];
            }
        }
        Ok(self.push(shape, values, Op::AddBiasLast(a.0, bias.0)))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: TensorHandle) -> TensorHandle {
        let total: f64 = self.nodes[a.0].values.iter().sum();
        self.push(vec![1], vec![total], Op::Sum(a.0))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, a: TensorHandle) -> TensorHandle {
        let n = self.nodes[a.0].values.len().max(1);
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Exact reverse-mode adjoints for every node reachable from `root`.
    /// Returns one gradient buffer per tape node (empty for unreachable ones).
    pub fn backward(&self, root: TensorHandle) -> Result<Vec<Vec<f64>>, TapeError> {
        if self.nodes[root.0].values.len() != 1 {
            return Err(TapeError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];
        for id in (0..=root.0).rev() {
            if grads[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(grads)
    }

    /// Gradient of `root` with respect to `leaf`, zeros if unreachable.
    pub fn gradient(&self, root: TensorHandle, leaf: TensorHandle) -> Result<Vec<f64>, TapeError> {
        let grads = self.backward(root)?;
        let g = &grads[leaf.0];
        if g.is_empty() {
            Ok(vec![0.0; self.nodes[leaf.0].values.len()])
        } else {
            Ok(g.clone())
        }
    }

    fn accum(grads: &mut [Vec<f64>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        if grads[id].is_empty() {
            grads[id] = vec![0.0; len];
        }
        f(&mut grads[id]);
    }

    fn accumulate_parents(&self, id: usize, g: &[f64], grads: &mut Vec<Vec<f64>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(p, _) in [(*a, 0), (*b, 1)].iter() {
                    let len = self.nodes[p].values.len();
                    Self::accum(grads, p, len, |acc| {
                        for (ai, gi) in acc.iter_mut().zip(g) {
                            *ai += gi;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                let len = self.nodes[*a].values.len();
                Self::accum(grads, *a, len, |acc| {
                    for (ai, gi) in acc.iter_mut().zip(g) {
                        *ai += gi;
                    }
                });
                let len = self.nodes[*b].values.len();
                Self::accum(grads, *b, len, |acc| {
                    for (ai, gi) in acc.iter_mut().zip(g) {
                        *ai -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].values.clone();
                let bv = self.nodes[b].values.clone();
                Self::accum(grads, a, av.len(), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * bv[i];
                    }
                });
                Self::accum(grads, b, bv.len(), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                let len = self.nodes[a].values.len();
                Self::accum(grads, a, len, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * s;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = &self.nodes[a].shape;
                let sb = &self.nodes[b].shape;
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1usize, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let av = self.nodes[a].values.clone();
                let bv = self.nodes[b].values.clone();
                // dA = dC * B^T
                Self::accum(grads, a, av.len(), |acc| {
                    for bi in 0..batch {
                        let ao = bi * m * k;
                        let bo = bi * k * n;
                        let co = bi * m * n;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[co + i * n + j] * bv[bo + p * n + j];
                                }
                                acc[ao + i * k + p] += s;
                            }
                        }
                    }
                });
                // dB = A^T * dC
                Self::accum(grads, b, bv.len(), |acc| {
                    for bi in 0..batch {
                        let ao = bi * m * k;
                        let bo = bi * k * n;
                        let co = bi * m * n;
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[ao + i * k + p] * g[co + i * n + j];
                                }
                                acc[bo + p * n + j] += s;
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                Self::accum(grads, a, av.len(), |acc| {
                    for i in 0..acc.len() {
                        if av[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let yv = node.values.clone();
                Self::accum(grads, a, yv.len(), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                Self::accum(grads, a, av.len(), |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] / av[i].max(LN_EPS);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let av = self.nodes[a].values.clone();
                Self::accum(grads, a, av.len(), |acc| {
                    for i in 0..acc.len() {
                        if av[i] > lo && av[i] < hi {
                            acc[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                // Fused Jacobian: dx = y .* (dy - <dy, y>) per row.
                let a = *a;
                let y = node.values.clone();
                let n = *node.shape.last().unwrap();
                let rows = y.len() / n;
                Self::accum(grads, a, y.len(), |acc| {
                    for r in 0..rows {
                        let o = r * n;
                        let dot: f64 = (0..n).map(|j| g[o + j] * y[o + j]).sum();
                        for j in 0..n {
                            acc[o + j] += y[o + j] * (g[o + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormLast(x, gain, bias) => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.nodes[x].values.clone();
                let gv = self.nodes[gain].values.clone();
                let n = *node.shape.last().unwrap();
                let rows = xv.len() / n;
                // Recompute per-row statistics.
                Self::accum(grads, x, xv.len(), |acc| {
                    for r in 0..rows {
                        let o = r * n;
                        let row = &xv[o..o + n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        // dL/dxhat_j = g_j * gain_j
                        let dxhat: Vec<f64> = (0..n).map(|j| g[o + j] * gv[j]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = (0..n)
                            .map(|j| dxhat[j] * (row[j] - mean) * inv_std)
                            .sum();
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            acc[o + j] += inv_std
                                * (dxhat[j] - sum_dxhat / n as f64 - xhat * sum_dxhat_xhat / n as f64);
                        }
                    }
                });
                Self::accum(grads, gain, n, |acc| {
                    for r in 0..rows {
                        let o = r * n;
                        let row = &xv[o..o + n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        for j in 0..n {
                            acc[j] += g[o + j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                Self::accum(grads, bias, n, |acc| {
                    for r in 0..rows {
                        for j in 0..n {
                            acc[j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (a, b) = (*a, *b);
                let na = *self.nodes[a].shape.last().unwrap();
                let nb = *self.nodes[b].shape.last().unwrap();
                let rows = self.nodes[a].values.len() / na;
                let lena = self.nodes[a].values.len();
                let lenb = self.nodes[b].values.len();
                Self::accum(grads, a, lena, |acc| {
                    for r in 0..rows {
                        for j in 0..na {
                            acc[r * na + j] += g[r * (na + nb) + j];
                        }
                    }
                });
                Self::accum(grads, b, lenb, |acc| {
                    for r in 0..rows {
                        for j in 0..nb {
                            acc[r * nb + j] += g[r * (na + nb) + na + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                let len = self.nodes[a].values.len();
                Self::accum(grads, a, len, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i];
                    }
                });
            }
            Op::Permute(a, axes) => {
                let a = *a;
                // Scatter back through the inverse permutation.
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let gback = permute_values(g, &node.shape, &inv);
                let len = self.nodes[a].values.len();
                Self::accum(grads, a, len, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += gback[i];
                    }
                });
            }
            Op::AddBiasLast(a, bias) => {
                let (a, bias) = (*a, *bias);
                let len = self.nodes[a].values.len();
                let n = self.nodes[bias].values.len();
                let rows = len / n;
                Self::accum(grads, a, len, |acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i];
                    }
                });
                Self::accum(grads, bias, n, |acc| {
                    for r in 0..rows {
                        for j in 0..n {
                            acc[j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let len = self.nodes[a].values.len();
                Self::accum(grads, a, len, |acc| {
                    for ai in acc.iter_mut() {
                        *ai += g[0];
                    }
                });
            }
        }
    }
}

fn permute_values(values: &[f64], out_shape_or_in: &[usize], axes: &[usize]) -> Vec<f64> {
    // `out_shape_or_in` is the shape of `values`; output shape follows `axes`.
    let in_shape = out_shape_or_in;
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mut out = vec![0.0; values.len()];
    let mut idx = vec![0usize; nd];
    for (o, slot) in out.iter_mut().enumerate() {
        // Decompose o into out-shape indices, map to input offset.
        let mut rem = o;
        for d in (0..nd).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut off = 0usize;
        for d in 0..nd {
            off += idx[d] * in_strides[axes[d]];
        }
        *slot = values[off];
    }
    out
}

/// Finite-difference oracle for gradient checks. Lives here rather than in an
/// implementation path: it re-evaluates the forward closure and never touches
/// `backward`.
pub mod gradcheck {
    use super::{Tape, TensorHandle};

    /// Central-difference gradient of the scalar produced by `build` with
    /// respect to every element of every input, step 1e-5.
    pub fn numeric_gradients(
        inputs: &[(&[usize], Vec<f64>)],
        build: impl Fn(&mut Tape, &[TensorHandle]) -> TensorHandle,
    ) -> Vec<Vec<f64>> {
        const H: f64 = 1e-5;
        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let handles: Vec<TensorHandle> = inputs
                .iter()
                .zip(vals)
                .map(|((shape, _), v)| tape.leaf(shape, v.clone()))
                .collect();
            let root = build(&mut tape, &handles);
            tape.scalar_value(root)
        };
        let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
        let mut grads = Vec::with_capacity(inputs.len());
        for (ti, (_, vals)) in inputs.iter().enumerate() {
            let mut g = vec![0.0; vals.len()];
            for ei in 0..vals.len() {
                let mut plus = base.clone();
                plus[ti][ei] += H;
                let mut minus = base.clone();
                minus[ti][ei] -= H;
                g[ei] = (eval(&plus) - eval(&minus)) / (2.0 * H);
            }
            grads.push(g);
        }
        grads
    }

    /// Relative agreement check: |a-b| <= tol_rel * max(|a|,|b|) + tol_abs.
    pub fn agrees(analytic: &[f64], numeric: &[f64], tol_rel: f64, tol_abs: f64) -> bool {
        analytic.len() == numeric.len()
            && analytic.iter().zip(numeric).all(|(&a, &n)| {
                (a - n).abs() <= tol_rel * a.abs().max(n.abs()) + tol_abs
            })
    }

    /// Runs both sides for a scalar-valued graph and compares.
    pub fn check(
        inputs: &[(&[usize], Vec<f64>)],
        build: impl Fn(&mut Tape, &[TensorHandle]) -> TensorHandle,
        tol_rel: f64,
        tol_abs: f64,
    ) -> bool {
        let numeric = numeric_gradients(inputs, &build);
        let mut tape = Tape::new();
        let handles: Vec<TensorHandle> = inputs
            .iter()
            .map(|(shape, v)| tape.leaf(shape, v.clone()))
            .collect();
        let root = build(&mut tape, &handles);
        let grads = tape.backward(root).expect("scalar root");
        handles.iter().zip(&numeric).all(|(h, num)| {
            let g = if grads[h.0].is_empty() {
                vec![0.0; num.len()]
            } else {
                grads[h.0].clone()
            };
            agrees(&g, num, tol_rel, tol_abs)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = tape.leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.values(c), tape.values(a));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 4], vec![0.7; 4]);
        let y = tape.softmax_lastdim(a);
        for &v in tape.values(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 7.0]);
        let gain = tape.leaf(&[4], vec![1.0; 4]);
        let bias = tape.leaf(&[4], vec![0.0; 4]);
        let y = tape.layer_norm_lastdim(x, gain, bias).unwrap();
        let v = tape.values(y);
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3], vec![1.0; 6]);
        let s = tape.sum(a);
        let g = tape.gradient(s, a).unwrap();
        assert_eq!(g, vec![1.0; 6]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vals(&mut rng, 6);
        let b = rand_vals(&mut rng, 12);
        assert!(gradcheck::check(
            &[(&[2, 3], a), (&[3, 4], b)],
            |t, h| {
                let c = t.matmul(h[0], h[1]).unwrap();
                t.sum(c)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vals(&mut rng, 8);
        let w = rand_vals(&mut rng, 8);
        assert!(gradcheck::check(
            &[(&[2, 4], x), (&[2, 4], w)],
            |t, h| {
                let y = t.softmax_lastdim(h[0]);
                let p = t.mul(y, h[1]).unwrap();
                t.sum(p)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vals(&mut rng, 8);
        let gain = rand_vals(&mut rng, 4);
        let bias = rand_vals(&mut rng, 4);
        let w = rand_vals(&mut rng, 8);
        assert!(gradcheck::check(
            &[(&[2, 4], x), (&[4], gain), (&[4], bias), (&[2, 4], w)],
            |t, h| {
                let y = t.layer_norm_lastdim(h[0], h[1], h[2]).unwrap();
                let p = t.mul(y, h[3]).unwrap();
                t.sum(p)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        // f(a) = sum(a*a + a) => df/da = 2a + 1
        let mut tape = Tape::new();
        let a = tape.leaf(&[3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(a, a).unwrap();
        let s = tape.add(sq, a).unwrap();
        let root = tape.sum(s);
        let g = tape.gradient(root, a).unwrap();
        assert_eq!(g, vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vals(&mut rng, 24);
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3, 4], x.clone());
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.values(back), x.as_slice());
        let w = rand_vals(&mut rng, 24);
        assert!(gradcheck::check(
            &[(&[2, 3, 4], x), (&[4, 2, 3], w)],
            |t, h| {
                let p = t.permute(h[0], &[2, 0, 1]).unwrap();
                let m = t.mul(p, h[1]).unwrap();
                t.sum(m)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn batched_matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_vals(&mut rng, 2 * 2 * 3);
        let b = rand_vals(&mut rng, 2 * 3 * 2);
        assert!(gradcheck::check(
            &[(&[2, 2, 3], a), (&[2, 3, 2], b)],
            |t, h| {
                let c = t.matmul(h[0], h[1]).unwrap();
                t.sum(c)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn shape_mismatch_reports_dims() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[2, 3]);
        let b = tape.zeros(&[3, 3]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[2]);
        assert!(matches!(tape.backward(a), Err(TapeError::NonScalarRoot(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_vals(&mut rng, 16);
        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&[4, 4], x.to_vec());
            let s = tape.softmax_lastdim(a);
            let m = tape.matmul(a, s).unwrap();
            let r = tape.relu(m);
            let root = tape.sum(r);
            tape.gradient(root, a).unwrap()
        };
        let g1 = run(&x);
        let g2 = run(&x);
        assert_eq!(g1, g2);
    }
}

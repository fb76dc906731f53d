use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Param, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    /// Constant leaf; gradients stop here.
    Const,
    /// Parameter leaf; gradients are routed back to the parameter.
    Leaf,
    Matmul { a: Val, b: Val },
    Transpose { a: Val },
    Add { a: Val, b: Val },
    AddBias { a: Val, bias: Val },
    Mul { a: Val, b: Val },
    MulScalar { a: Val, s: Val },
    AddScalar { a: Val, s: Val },
    Scale { a: Val, c: f64 },
    AddConst { a: Val },
    PowConst { a: Val, p: f64 },
    Relu { a: Val },
    LeakyRelu { a: Val, slope: f64 },
    Exp { a: Val },
    Log { a: Val },
    Sum { a: Val },
    Mean { a: Val },
    Softmax { a: Val, axis: usize },
    LogSoftmax { a: Val, axis: usize },
    Concat { parts: Vec<Val>, axis: usize },
    GatherRows { a: Val, rows: Vec<usize> },
    Gather { a: Val, idx: Vec<usize> },
    Reshape { a: Val },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// A recording of one forward pass.
///
/// Nodes are stored in execution order, so every operand precedes its
/// consumers and the reverse sweep in [`Tape::backward`] visits the graph in
/// a valid topological order. Tapes are rebuilt per forward pass and are
/// single-threaded.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Vec<f64>>>,
    params: RefCell<Vec<(usize, Param)>>,
    lease_cache: RefCell<HashMap<usize, Val>>,
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
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            lease_cache: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Val {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { data, shape, op });
        Val(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a constant leaf from raw parts.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Val> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "constant: shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Const))
    }

    pub fn constant_tensor(&self, t: &Tensor) -> Val {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Const)
    }

    /// Lease a parameter onto the tape. Gradients computed by
    /// [`Tape::backward`] accumulate into the parameter's grad buffer.
    /// Leasing the same parameter twice returns the same handle.
    pub fn param(&self, p: &Param) -> Val {
        if let Some(&v) = self.lease_cache.borrow().get(&p.ptr_id()) {
            return v;
        }
        let t = p.borrow();
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf);
        drop(t);
        self.params.borrow_mut().push((v.0, p.clone()));
        self.lease_cache.borrow_mut().insert(p.ptr_id(), v);
        v
    }

    /// Lease a parameter as a constant: its value participates in the
    /// forward pass but receives no gradient (used to freeze a block).
    pub fn param_frozen(&self, p: &Param) -> Val {
        let t = p.borrow();
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Const)
    }

    pub fn shape(&self, v: Val) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Val) -> Vec<f64> {
        self.nodes.borrow()[v.0].data.clone()
    }

    pub fn value_scalar(&self, v: Val) -> f64 {
        self.nodes.borrow()[v.0].data[0]
    }

    /// Gradient of the most recent [`Tape::backward`] call w.r.t. `v`.
    pub fn grad(&self, v: Val) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.0).cloned()
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&self, a: Val, b: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&nodes[a.0].data, &nodes[b.0].data, m, k, n);
        drop(nodes);
        Ok(self.push(data, vec![m, n], Op::Matmul { a, b }))
    }

    pub fn transpose(&self, a: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let s = &nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose expects rank 2, got {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let src = &nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(nodes);
        Ok(self.push(data, vec![c, r], Op::Transpose { a }))
    }

    pub fn add(&self, a: Val, b: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].shape != nodes[b.0].shape {
            return Err(Error::Dim(format!(
                "add: shapes differ: {:?} vs {:?}",
                nodes[a.0].shape, nodes[b.0].shape
            )));
        }
        let data = nodes[a.0]
            .data
            .iter()
            .zip(&nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::Add { a, b }))
    }

    /// Row-broadcast add: `a` is `[m, n]`, `bias` is `[n]`.
    pub fn add_bias(&self, a: Val, bias: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[bias.0].shape);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "add_bias: incompatible shapes {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut data = nodes[a.0].data.clone();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += nodes[bias.0].data[j];
            }
        }
        drop(nodes);
        Ok(self.push(data, vec![m, n], Op::AddBias { a, bias }))
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&self, a: Val, b: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].shape != nodes[b.0].shape {
            return Err(Error::Dim(format!(
                "mul: shapes differ: {:?} vs {:?}",
                nodes[a.0].shape, nodes[b.0].shape
            )));
        }
        let data = nodes[a.0]
            .data
            .iter()
            .zip(&nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::Mul { a, b }))
    }

    /// Multiply every entry of `a` by a single-element tensor `s`.
    pub fn mul_scalar(&self, a: Val, s: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[s.0].data.len() != 1 {
            return Err(Error::Dim("mul_scalar: s must have one element".into()));
        }
        let sv = nodes[s.0].data[0];
        let data = nodes[a.0].data.iter().map(|x| x * sv).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::MulScalar { a, s }))
    }

    /// Add a single-element tensor `s` to every entry of `a`.
    pub fn add_scalar(&self, a: Val, s: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[s.0].data.len() != 1 {
            return Err(Error::Dim("add_scalar: s must have one element".into()));
        }
        let sv = nodes[s.0].data[0];
        let data = nodes[a.0].data.iter().map(|x| x + sv).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::AddScalar { a, s }))
    }

    pub fn scale(&self, a: Val, c: f64) -> Val {
        let nodes = self.nodes.borrow();
        let data = nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        self.push(data, shape, Op::Scale { a, c })
    }

    pub fn add_const(&self, a: Val, c: f64) -> Val {
        let nodes = self.nodes.borrow();
        let data = nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        self.push(data, shape, Op::AddConst { a })
    }

    /// Elementwise power with a constant exponent. Requires strictly
    /// positive inputs so the derivative `p * x^(p-1)` is well defined.
    pub fn pow_const(&self, a: Val, p: f64) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("pow_const: nonpositive base".into()));
        }
        let data = nodes[a.0].data.iter().map(|x| x.powf(p)).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::PowConst { a, p }))
    }

    pub fn relu(&self, a: Val) -> Val {
        let nodes = self.nodes.borrow();
        let data = nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        self.push(data, shape, Op::Relu { a })
    }

    pub fn leaky_relu(&self, a: Val, slope: f64) -> Val {
        let nodes = self.nodes.borrow();
        let data = nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        self.push(data, shape, Op::LeakyRelu { a, slope })
    }

    pub fn exp(&self, a: Val) -> Val {
        let nodes = self.nodes.borrow();
        let data = nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        self.push(data, shape, Op::Exp { a })
    }

    pub fn log(&self, a: Val) -> Result<Val> {
        let nodes = self.nodes.borrow();
        if nodes[a.0].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of nonpositive value".into()));
        }
        let data = nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = nodes[a.0].shape.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::Log { a }))
    }

    pub fn sum(&self, a: Val) -> Val {
        let nodes = self.nodes.borrow();
        let s: f64 = nodes[a.0].data.iter().sum();
        drop(nodes);
        self.push(vec![s], vec![1], Op::Sum { a })
    }

    pub fn mean(&self, a: Val) -> Val {
        let nodes = self.nodes.borrow();
        let n = nodes[a.0].data.len() as f64;
        let s: f64 = nodes[a.0].data.iter().sum();
        drop(nodes);
        self.push(vec![s / n], vec![1], Op::Mean { a })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, a: Val, axis: usize) -> Result<Val> {
        let (data, shape) = self.softmax_forward(a, axis, false)?;
        Ok(self.push(data, shape, Op::Softmax { a, axis }))
    }

    /// `log(softmax(a))` along `axis`, computed stably via log-sum-exp.
    pub fn log_softmax(&self, a: Val, axis: usize) -> Result<Val> {
        let (data, shape) = self.softmax_forward(a, axis, true)?;
        Ok(self.push(data, shape, Op::LogSoftmax { a, axis }))
    }

    fn softmax_forward(&self, a: Val, axis: usize, log: bool) -> Result<(Vec<f64>, Vec<usize>)> {
        let nodes = self.nodes.borrow();
        let shape = nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let src = &nodes[a.0].data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut data = vec![0.0; src.len()];
        for_each_slice(&shape, axis, |indices| {
            let max = indices.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in indices {
                z += (src[i] - max).exp();
            }
            if log {
                let lz = z.ln();
                for &i in indices {
                    data[i] = src[i] - max - lz;
                }
            } else {
                for &i in indices {
                    data[i] = (src[i] - max).exp() / z;
                }
            }
        });
        Ok((data, shape))
    }

    /// Concatenate rank-1 tensors along axis 0 or rank-2 tensors along
    /// axis 0 (rows) or axis 1 (columns).
    pub fn concat(&self, parts: &[Val], axis: usize) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let nodes = self.nodes.borrow();
        let rank = nodes[parts[0].0].shape.len();
        if axis >= rank || rank > 2 {
            return Err(Error::Dim(format!(
                "concat: axis {} invalid for rank {}",
                axis, rank
            )));
        }
        for p in parts {
            let s = &nodes[p.0].shape;
            if s.len() != rank {
                return Err(Error::Dim("concat: mixed ranks".into()));
            }
            for (d, (&x, &y)) in s.iter().zip(&nodes[parts[0].0].shape).enumerate() {
                if d != axis && x != y {
                    return Err(Error::Dim(format!(
                        "concat: shapes {:?} and {:?} differ off-axis",
                        s, nodes[parts[0].0].shape
                    )));
                }
            }
        }
        let (data, shape) = if rank == 1 || axis == 0 {
            // contiguous layout in both the rank-1 and stacked-rows cases
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&nodes[p.0].data);
            }
            let mut shape = nodes[parts[0].0].shape.clone();
            shape[0] = parts.iter().map(|p| nodes[p.0].shape[0]).sum();
            (data, shape)
        } else {
            let rows = nodes[parts[0].0].shape[0];
            let total_cols: usize = parts.iter().map(|p| nodes[p.0].shape[1]).sum();
            let mut data = vec![0.0; rows * total_cols];
            let mut col0 = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                for r in 0..rows {
                    data[r * total_cols + col0..r * total_cols + col0 + w]
                        .copy_from_slice(&nodes[p.0].data[r * w..(r + 1) * w]);
                }
                col0 += w;
            }
            (data, vec![rows, total_cols])
        };
        drop(nodes);
        Ok(self.push(data, shape, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Select rows of a rank-2 tensor. Rows may repeat.
    pub fn gather_rows(&self, a: Val, rows: &[usize]) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let s = &nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::Dim(format!("gather_rows expects rank 2, got {:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::Contract("gather_rows: row index out of range".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&nodes[a.0].data[r * d..(r + 1) * d]);
        }
        drop(nodes);
        Ok(self.push(data, vec![rows.len(), d], Op::GatherRows { a, rows: rows.to_vec() }))
    }

    /// Select elements by flat index; the result is rank 1.
    pub fn gather(&self, a: Val, idx: &[usize]) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let len = nodes[a.0].data.len();
        if idx.iter().any(|&i| i >= len) {
            return Err(Error::Contract("gather: index out of range".into()));
        }
        let data = idx.iter().map(|&i| nodes[a.0].data[i]).collect();
        drop(nodes);
        Ok(self.push(data, vec![idx.len()], Op::Gather { a, idx: idx.to_vec() }))
    }

    pub fn reshape(&self, a: Val, shape: Vec<usize>) -> Result<Val> {
        let nodes = self.nodes.borrow();
        let numel: usize = shape.iter().product();
        if numel != nodes[a.0].data.len() {
            return Err(Error::Dim(format!(
                "reshape: {:?} incompatible with {} elements",
                shape,
                nodes[a.0].data.len()
            )));
        }
        let data = nodes[a.0].data.clone();
        drop(nodes);
        Ok(self.push(data, shape, Op::Reshape { a }))
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Accumulate gradients of a scalar `loss` into every reachable leaf.
    /// Leased parameters receive their gradients additively; call
    /// [`Param::zero_grad`] (or take an optimizer step) between passes.
    pub fn backward(&self, loss: Val) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        grads[loss.0][0] = 1.0;

        for id in (0..nodes.len()).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the gradient of the current node so operand
            // gradients can be written without aliasing.
            let (gl, gr) = grads.split_at_mut(id);
            let g = &gr[0];
            let node = &nodes[id];
            match &node.op {
                Op::Const | Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    // dA = g · Bᵀ
                    let bd = &nodes[b.0].data;
                    let da = &mut gl[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                    // dB = Aᵀ · g
                    let ad = &nodes[a.0].data;
                    let db = &mut gl[b.0];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let da = &mut gl[a.0];
                    for i in 0..r {
                        for j in 0..c {
                            da[i + j * r] += g[i * c + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    if a == b {
                        for (x, gi) in gl[a.0].iter_mut().zip(g) {
                            *x += 2.0 * gi;
                        }
                    } else {
                        for (x, gi) in gl[a.0].iter_mut().zip(g) {
                            *x += gi;
                        }
                        for (x, gi) in gl[b.0].iter_mut().zip(g) {
                            *x += gi;
                        }
                    }
                }
                Op::AddBias { a, bias } => {
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi;
                    }
                    let n = node.shape[1];
                    let db = &mut gl[bias.0];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                }
                Op::Mul { a, b } => {
                    if a == b {
                        let ad: Vec<f64> = nodes[a.0].data.clone();
                        for ((x, gi), av) in gl[a.0].iter_mut().zip(g).zip(&ad) {
                            *x += 2.0 * gi * av;
                        }
                    } else {
                        let bd = &nodes[b.0].data;
                        for ((x, gi), bv) in gl[a.0].iter_mut().zip(g).zip(bd) {
                            *x += gi * bv;
                        }
                        let ad = &nodes[a.0].data;
                        for ((x, gi), av) in gl[b.0].iter_mut().zip(g).zip(ad) {
                            *x += gi * av;
                        }
                    }
                }
                Op::MulScalar { a, s } => {
                    let sv = nodes[s.0].data[0];
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi * sv;
                    }
                    let ad = &nodes[a.0].data;
                    let ds: f64 = g.iter().zip(ad).map(|(gi, av)| gi * av).sum();
                    gl[s.0][0] += ds;
                }
                Op::AddScalar { a, s } => {
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi;
                    }
                    gl[s.0][0] += g.iter().sum::<f64>();
                }
                Op::Scale { a, c } => {
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi * c;
                    }
                }
                Op::AddConst { a } => {
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi;
                    }
                }
                Op::PowConst { a, p } => {
                    let ad = &nodes[a.0].data;
                    for ((x, gi), av) in gl[a.0].iter_mut().zip(g).zip(ad) {
                        *x += gi * p * av.powf(p - 1.0);
                    }
                }
                Op::Relu { a } => {
                    let ad = &nodes[a.0].data;
                    for ((x, gi), av) in gl[a.0].iter_mut().zip(g).zip(ad) {
                        if *av > 0.0 {
                            *x += gi;
                        }
                    }
                }
                Op::LeakyRelu { a, slope } => {
                    let ad = &nodes[a.0].data;
                    for ((x, gi), av) in gl[a.0].iter_mut().zip(g).zip(ad) {
                        *x += gi * if *av > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Exp { a } => {
                    for ((x, gi), ov) in gl[a.0].iter_mut().zip(g).zip(&node.data) {
                        *x += gi * ov;
                    }
                }
                Op::Log { a } => {
                    let ad = &nodes[a.0].data;
                    for ((x, gi), av) in gl[a.0].iter_mut().zip(g).zip(ad) {
                        *x += gi / av;
                    }
                }
                Op::Sum { a } => {
                    let g0 = g[0];
                    for x in gl[a.0].iter_mut() {
                        *x += g0;
                    }
                }
                Op::Mean { a } => {
                    let n = gl[a.0].len() as f64;
                    let g0 = g[0] / n;
                    for x in gl[a.0].iter_mut() {
                        *x += g0;
                    }
                }
                Op::Softmax { a, axis } => {
                    let out = &node.data;
                    let da = &mut gl[a.0];
                    for_each_slice(&node.shape, *axis, |indices| {
                        let dot: f64 = indices.iter().map(|&i| g[i] * out[i]).sum();
                        for &i in indices {
                            da[i] += out[i] * (g[i] - dot);
                        }
                    });
                }
                Op::LogSoftmax { a, axis } => {
                    let out = &node.data;
                    let da = &mut gl[a.0];
                    for_each_slice(&node.shape, *axis, |indices| {
                        let gsum: f64 = indices.iter().map(|&i| g[i]).sum();
                        for &i in indices {
                            da[i] += g[i] - out[i].exp() * gsum;
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let rank = node.shape.len();
                    if rank == 1 || *axis == 0 {
                        let mut off = 0;
                        for p in parts {
                            let len = nodes[p.0].data.len();
                            for (x, gi) in gl[p.0].iter_mut().zip(&g[off..off + len]) {
                                *x += gi;
                            }
                            off += len;
                        }
                    } else {
                        let rows = node.shape[0];
                        let total_cols = node.shape[1];
                        let mut col0 = 0;
                        for p in parts {
                            let w = nodes[p.0].shape[1];
                            let dp = &mut gl[p.0];
                            for r in 0..rows {
                                for j in 0..w {
                                    dp[r * w + j] += g[r * total_cols + col0 + j];
                                }
                            }
                            col0 += w;
                        }
                    }
                }
                Op::GatherRows { a, rows } => {
                    let d = node.shape[1];
                    let da = &mut gl[a.0];
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            da[r * d + j] += g[k * d + j];
                        }
                    }
                }
                Op::Gather { a, idx } => {
                    let da = &mut gl[a.0];
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g[k];
                    }
                }
                Op::Reshape { a } => {
                    for (x, gi) in gl[a.0].iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
        }
        drop(nodes);
        for (id, param) in self.params.borrow().iter() {
            param.borrow_mut().accumulate_grad(&grads[*id]);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Invoke `f` once per slice along `axis`, passing the flat indices that
/// make up the slice.
fn for_each_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut indices = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, idx) in indices.iter_mut().enumerate() {
                *idx = o * axis_len * inner + t * inner + i;
            }
            f(&indices);
        }
    }
}

//! Tape-style computation graph.
//!
//! Shape errors are programming bugs in graph construction, so every op
//! asserts its preconditions and panics with both shapes in the message.
//! Runtime-recoverable errors (I/O, malformed files) live elsewhere.

use super::{ParamSet, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<String> },
    Const,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    Relu { a: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    /// Per-column max over unmasked rows; `argmax` row recorded per column.
    ReduceMaxRows { a: Var, argmax: Vec<usize> },
    ConcatVec { inputs: Vec<Var> },
    StackRows { inputs: Vec<Var> },
    Row { a: Var, i: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    BroadcastRow { a: Var, n: usize },
    AddRowBroadcast { a: Var, bias: Var },
    ConcatCols { inputs: Vec<Var>, widths: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    ScaleRows { a: Var, c: Vec<f64> },
    OuterConst { c: Vec<f64>, x: Var },
    ShiftRows { a: Var, offset: i64 },
    Reshape { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SmoothL1 { pred: Var, target: Vec<f64>, beta: f64 },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CrossEntropyLogits { logits: Var, target_idx: usize, probs: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
}

/// A single computation graph, rebuilt per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("rank {} tensors are not supported: {other:?}", other.len()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { op, shape, values, grad: Vec::new(), needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].values.len(), 1, "node is not scalar");
        self.nodes[v.0].values[0]
    }

    /// Gradient of `v` after [`Tape::backward`]. Empty before backward.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.push(Op::Const, shape, values, false)
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.constant(vec![n], values)
    }

    /// Differentiable leaf (an input being checked, not a named parameter).
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        self.push(Op::Leaf { param: None }, shape, values, true)
    }

    /// Copies a named parameter onto the tape as a differentiable leaf.
    pub fn param(&mut self, name: &str, params: &ParamSet) -> Var {
        let t = params.get(name);
        self.push(
            Op::Leaf { param: Some(name.to_string()) },
            t.shape.clone(),
            t.values.clone(),
            true,
        )
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape.clone(), t.values.clone())
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = rows_cols(self.shape(a));
        let (kb, n) = rows_cols(self.shape(b));
        assert_eq!(
            ka, kb,
            "matmul inner extents differ: {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let k = ka;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, ng)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op} requires identical shapes: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        (self.shape(a).to_vec(), out, self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, out, ng) = self.binary_same_shape(a, b, "add", |x, y| x + y);
        self.push(Op::Add { a, b }, shape, out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, out, ng) = self.binary_same_shape(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub { a, b }, shape, out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, out, ng) = self.binary_same_shape(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul { a, b }, shape, out, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(Op::AddScalar { a }, shape, out, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(Op::MulScalar { a, c }, shape, out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(Op::Relu { a }, shape, out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(Op::Tanh { a }, shape, out, ng)
    }

    /// Max-shifted softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 1, "softmax expects a rank-1 tensor");
        let v = self.value(a);
        assert!(!v.is_empty(), "softmax of empty input");
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&x| (x - hi).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a));
        self.push(Op::Softmax { a }, shape, out, ng)
    }

    /// Per-column max over the unmasked rows of an `[n, d]` tensor.
    ///
    /// Gradient routes to the first row attaining each column maximum.
    pub fn reduce_max_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        assert_eq!(self.shape(a).len(), 2, "reduce_max_rows expects [n, d]");
        assert_eq!(mask.len(), n, "mask length {} vs {} rows", mask.len(), n);
        assert!(mask.iter().any(|&m| m), "reduce_max_rows: all rows masked");
        let v = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![usize::MAX; d];
        for (i, keep) in mask.iter().enumerate() {
            if !keep {
                continue;
            }
            for j in 0..d {
                let x = v[i * d + j];
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let ng = self.needs(a);
        self.push(Op::ReduceMaxRows { a, argmax }, vec![d], out, ng)
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn concat_vec(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let mut out = Vec::new();
        let mut ng = false;
        for &v in inputs {
            assert_eq!(self.shape(v).len(), 1, "concat_vec expects rank-1 inputs");
            out.extend_from_slice(self.value(v));
            ng |= self.needs(v);
        }
        let n = out.len();
        self.push(Op::ConcatVec { inputs: inputs.to_vec() }, vec![n], out, ng)
    }

    pub fn stack_rows(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "stack of nothing");
        let d = self.shape(inputs[0])[0];
        let mut out = Vec::with_capacity(inputs.len() * d);
        let mut ng = false;
        for &v in inputs {
            assert_eq!(self.shape(v), [d], "stack_rows rows must share shape");
            out.extend_from_slice(self.value(v));
            ng |= self.needs(v);
        }
        self.push(Op::StackRows { inputs: inputs.to_vec() }, vec![inputs.len(), d], out, ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        assert!(i < n, "row {i} out of {n}");
        let out = self.value(a)[i * d..(i + 1) * d].to_vec();
        let ng = self.needs(a);
        self.push(Op::Row { a, i }, vec![d], out, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather row {i} out of {n}");
            out.extend_from_slice(&self.value(a)[i * d..(i + 1) * d]);
        }
        let ng = self.needs(a);
        self.push(Op::GatherRows { a, idx: idx.to_vec() }, vec![idx.len(), d], out, ng)
    }

    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.shape(a).len(), 1, "broadcast_row expects rank-1");
        assert!(n > 0);
        let d = self.shape(a)[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(self.value(a));
        }
        let ng = self.needs(a);
        self.push(Op::BroadcastRow { a, n }, vec![n, d], out, ng)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        assert_eq!(self.shape(bias), [d], "bias shape {:?} vs row width {d}", self.shape(bias));
        let bv = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += bv[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(bias);
        self.push(Op::AddRowBroadcast { a, bias }, shape, out, ng)
    }

    pub fn concat_cols(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let (n, _) = rows_cols(self.shape(inputs[0]));
        let widths: Vec<usize> = inputs
            .iter()
            .map(|&v| {
                let (r, c) = rows_cols(self.shape(v));
                assert_eq!(r, n, "concat_cols row counts differ: {r} vs {n}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let val = self.value(v);
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&val[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(Op::ConcatCols { inputs: inputs.to_vec(), widths }, vec![n, total], out, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        assert!(start + len <= d, "column slice {start}..{} out of width {d}", start + len);
        let v = self.value(a);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v[i * d + start..i * d + start + len]);
        }
        let ng = self.needs(a);
        self.push(Op::SliceCols { a, start, len }, vec![n, len], out, ng)
    }

    /// Multiplies row `i` by the constant `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: &[f64]) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        assert_eq!(c.len(), n, "{} scale factors for {n} rows", c.len());
        let mut out = self.value(a).to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= c[i];
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::ScaleRows { a, c: c.to_vec() }, shape, out, ng)
    }

    /// Outer product of a constant column `c` with a rank-1 `x`: `out[i][j] = c[i] * x[j]`.
    pub fn outer_const(&mut self, c: &[f64], x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 1, "outer_const expects rank-1 x");
        let d = self.shape(x)[0];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c.len() * d);
        for &ci in c {
            out.extend(xv.iter().map(|&xj| ci * xj));
        }
        let ng = self.needs(x);
        self.push(Op::OuterConst { c: c.to_vec(), x }, vec![c.len(), d], out, ng)
    }

    /// Shifts rows by `offset` (positive = down), zero-filling vacated rows.
    pub fn shift_rows(&mut self, a: Var, offset: i64) -> Var {
        let (n, d) = rows_cols(self.shape(a));
        let v = self.value(a);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let src = i as i64 - offset;
            if src >= 0 && (src as usize) < n {
                out[i * d..(i + 1) * d].copy_from_slice(&v[src as usize * d..(src as usize + 1) * d]);
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::ShiftRows { a, offset }, shape, out, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape {:?} -> {shape:?} changes element count",
            self.shape(a)
        );
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Reshape { a }, shape, out, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll { a }, vec![1], vec![s], ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(Op::MeanAll { a }, vec![1], vec![s / n as f64], ng)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Smooth-L1 against a constant target: per element
    /// `0.5 x^2 / beta` for `|x| < beta`, else `|x| - 0.5 beta`,
    /// summed over columns and averaged over rows.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &[f64], beta: f64) -> Var {
        assert_eq!(
            self.value(pred).len(),
            target.len(),
            "smooth_l1 prediction/target length mismatch: {} vs {}",
            self.value(pred).len(),
            target.len()
        );
        assert!(beta > 0.0);
        let (rows, _) = rows_cols(self.shape(pred));
        let mut total = 0.0;
        for (&p, &t) in self.value(pred).iter().zip(target) {
            assert!(p.is_finite() && t.is_finite(), "smooth_l1 on non-finite input");
            let x = (p - t).abs();
            total += if x < beta { 0.5 * x * x / beta } else { x - 0.5 * beta };
        }
        let out = total / rows as f64;
        let ng = self.needs(pred);
        self.push(Op::SmoothL1 { pred, target: target.to_vec(), beta }, vec![1], vec![out], ng)
    }

    /// Mean binary cross-entropy of logits against 0/1 targets, in the
    /// numerically stable `max(x,0) - x y + ln(1 + e^{-|x|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        assert_eq!(
            self.value(logits).len(),
            targets.len(),
            "bce logits/target length mismatch: {} vs {}",
            self.value(logits).len(),
            targets.len()
        );
        let n = targets.len() as f64;
        let mut total = 0.0;
        for (&x, &y) in self.value(logits).iter().zip(targets) {
            assert!(x.is_finite(), "bce on non-finite logit");
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let ng = self.needs(logits);
        self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            vec![1],
            vec![total / n],
            ng,
        )
    }

    /// Categorical cross-entropy of a rank-1 logit vector against one target
    /// class, via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, target_idx: usize) -> Var {
        assert_eq!(self.shape(logits).len(), 1, "cross_entropy expects rank-1 logits");
        let v = self.value(logits);
        assert!(target_idx < v.len(), "target class {target_idx} out of {}", v.len());
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = v.iter().map(|&x| (x - hi).exp()).sum::<f64>().ln() + hi;
        let probs: Vec<f64> = v.iter().map(|&x| (x - lse).exp()).collect();
        let out = lse - v[target_idx];
        let ng = self.needs(logits);
        self.push(Op::CrossEntropyLogits { logits, target_idx, probs }, vec![1], vec![out], ng)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every `needs_grad` node reachable
    /// from the scalar `root`. Repeated calls keep accumulating.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].values.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].shape
        );
        for node in &mut self.nodes {
            if node.needs_grad && node.grad.is_empty() {
                node.grad = vec![0.0; node.values.len()];
            }
        }
        if !self.nodes[root.0].needs_grad {
            return;
        }
        self.nodes[root.0].grad[0] += 1.0;

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Split borrows: take the op and grad out, scatter, put op back.
            let g = std::mem::take(&mut self.nodes[i].grad);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Const);
            self.scatter(&op, i, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = g;
        }
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].needs_grad {
            f(&mut self.nodes[v.0].grad);
        }
    }

    fn scatter(&mut self, op: &Op, node: usize, g: &[f64]) {
        match op {
            Op::Leaf { .. } | Op::Const => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bv = &self.nodes[b.0].values;
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gj, bj) in grow.iter().zip(brow) {
                                acc += gj * bj;
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    self.add_grad(*a, |dst| dst.iter_mut().zip(&ga).for_each(|(d, s)| *d += s));
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].values;
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, gj) in dst.iter_mut().zip(grow) {
                                *d += aip * gj;
                            }
                        }
                    }
                    self.add_grad(*b, |dst| dst.iter_mut().zip(&gb).for_each(|(d, s)| *d += s));
                }
            }
            Op::Add { a, b } => {
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                self.add_grad(*b, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub { a, b } => {
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                self.add_grad(*b, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.nodes[b.0].values.clone();
                    self.add_grad(*a, |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g).zip(&bv) {
                            *d += s * x;
                        }
                    });
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].values.clone();
                    self.add_grad(*b, |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g).zip(&av) {
                            *d += s * x;
                        }
                    });
                }
            }
            Op::AddScalar { a } => {
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::MulScalar { a, c } => {
                let c = *c;
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s * c));
            }
            Op::Relu { a } => {
                // Subgradient 0 at the kink.
                let av = self.nodes[a.0].values.clone();
                self.add_grad(*a, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(g).zip(&av) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = self.nodes[node].values.clone();
                self.add_grad(*a, |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(g).zip(&yv) {
                        *d += s * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax { a } => {
                let p = self.nodes[node].values.clone();
                let dot: f64 = g.iter().zip(&p).map(|(gi, pi)| gi * pi).sum();
                self.add_grad(*a, |dst| {
                    for ((d, gi), pi) in dst.iter_mut().zip(g).zip(&p) {
                        *d += pi * (gi - dot);
                    }
                });
            }
            Op::ReduceMaxRows { a, argmax } => {
                let d_cols = argmax.len();
                let am = argmax.clone();
                self.add_grad(*a, |dst| {
                    for j in 0..d_cols {
                        dst[am[j] * d_cols + j] += g[j];
                    }
                });
            }
            Op::ConcatVec { inputs } => {
                let mut off = 0;
                for &v in inputs.clone().iter() {
                    let n = self.nodes[v.0].values.len();
                    let piece = &g[off..off + n];
                    self.add_grad(v, |dst| dst.iter_mut().zip(piece).for_each(|(d, s)| *d += s));
                    off += n;
                }
            }
            Op::StackRows { inputs } => {
                let d = self.nodes[inputs[0].0].values.len();
                for (i, &v) in inputs.clone().iter().enumerate() {
                    let piece = &g[i * d..(i + 1) * d];
                    self.add_grad(v, |dst| dst.iter_mut().zip(piece).for_each(|(d, s)| *d += s));
                }
            }
            Op::Row { a, i } => {
                let d = g.len();
                let i = *i;
                self.add_grad(*a, |dst| {
                    dst[i * d..(i + 1) * d].iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
            }
            Op::GatherRows { a, idx } => {
                let d = self.nodes[node].shape[1];
                let idx = idx.clone();
                self.add_grad(*a, |dst| {
                    for (r, &i) in idx.iter().enumerate() {
                        let piece = &g[r * d..(r + 1) * d];
                        dst[i * d..(i + 1) * d].iter_mut().zip(piece).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::BroadcastRow { a, n } => {
                let d = self.nodes[a.0].values.len();
                let n = *n;
                self.add_grad(*a, |dst| {
                    for i in 0..n {
                        dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::AddRowBroadcast { a, bias } => {
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                let d = self.nodes[bias.0].values.len();
                self.add_grad(*bias, |dst| {
                    for (i, s) in g.iter().enumerate() {
                        dst[i % d] += s;
                    }
                });
            }
            Op::ConcatCols { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let n = g.len() / total;
                let mut off = 0;
                for (&v, &w) in inputs.clone().iter().zip(widths.iter()) {
                    self.add_grad(v, |dst| {
                        for i in 0..n {
                            dst[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + off..i * total + off + w])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let d = self.nodes[a.0].shape[1];
                let n = g.len() / len;
                let (start, len) = (*start, *len);
                self.add_grad(*a, |dst| {
                    for i in 0..n {
                        dst[i * d + start..i * d + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::ScaleRows { a, c } => {
                let d = g.len() / c.len();
                let c = c.clone();
                self.add_grad(*a, |dst| {
                    for (i, &ci) in c.iter().enumerate() {
                        dst[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(d, s)| *d += s * ci);
                    }
                });
            }
            Op::OuterConst { c, x } => {
                let d = self.nodes[x.0].values.len();
                let c = c.clone();
                self.add_grad(*x, |dst| {
                    for (i, &ci) in c.iter().enumerate() {
                        dst.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(d, s)| *d += s * ci);
                    }
                });
            }
            Op::ShiftRows { a, offset } => {
                let (n, d) = rows_cols(&self.nodes[a.0].shape);
                let offset = *offset;
                self.add_grad(*a, |dst| {
                    for i in 0..n {
                        let src = i as i64 - offset;
                        if src >= 0 && (src as usize) < n {
                            dst[src as usize * d..(src as usize + 1) * d]
                                .iter_mut()
                                .zip(&g[i * d..(i + 1) * d])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.add_grad(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::SumAll { a } => {
                let s = g[0];
                self.add_grad(*a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].values.len() as f64;
                let s = g[0] / n;
                self.add_grad(*a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::SmoothL1 { pred, target, beta } => {
                let rows = rows_cols(&self.nodes[pred.0].shape).0 as f64;
                let pv = self.nodes[pred.0].values.clone();
                let s = g[0] / rows;
                let (target, beta) = (target.clone(), *beta);
                self.add_grad(*pred, |dst| {
                    for ((d, &p), &t) in dst.iter_mut().zip(&pv).zip(&target) {
                        let x = p - t;
                        *d += s * if x.abs() < beta { x / beta } else { x.signum() };
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = self.nodes[logits.0].values.clone();
                let s = g[0] / targets.len() as f64;
                let targets = targets.clone();
                self.add_grad(*logits, |dst| {
                    for ((d, &x), &y) in dst.iter_mut().zip(&xv).zip(&targets) {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        *d += s * (sig - y);
                    }
                });
            }
            Op::CrossEntropyLogits { logits, target_idx, probs } => {
                let s = g[0];
                let (ti, probs) = (*target_idx, probs.clone());
                self.add_grad(*logits, |dst| {
                    for (j, (d, &p)) in dst.iter_mut().zip(&probs).enumerate() {
                        *d += s * (p - if j == ti { 1.0 } else { 0.0 });
                    }
                });
            }
        }
    }

    /// Parameter gradients accumulated on this tape, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Leaf { param: Some(name) } if !n.grad.is_empty() => {
                Some((name.as_str(), n.grad.as_slice()))
            }
            _ => None,
        })
    }

    /// Folds this tape's parameter gradients into `params`' grad buffers.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for (name, grad) in self.param_grads() {
            let t = params.get_mut(name);
            let dst = t.grad.as_mut().expect("parameter lost its grad buffer");
            assert_eq!(dst.len(), grad.len(), "gradient shape drifted for {name:?}");
            dst.iter_mut().zip(grad).for_each(|(d, s)| *d += s);
        }
    }
}

// ── Layer helpers ───────────────────────────────────────────────────────
//
// Thin compositions used all over the encoder and heads.

/// `x [d_in] -> x W + b [d_out]` for a rank-1 input.
pub fn linear_vec(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let d_in = tape.shape(x)[0];
    let xm = tape.reshape(x, vec![1, d_in]);
    let y = tape.matmul(xm, w);
    let y = tape.add_row_broadcast(y, b);
    let d_out = tape.shape(y)[1];
    tape.reshape(y, vec![d_out])
}

/// `X [n, d_in] -> X W + b [n, d_out]`.
pub fn linear_rows(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row_broadcast(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.matmul(i2, a);
        assert_eq!(t.value(y), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(vec![1, 2], vec![1.0, 0.0]);
        let b = t.constant(vec![2, 1], vec![0.0, 5.0]);
        let y = t.matmul(a, b);
        assert_eq!(t.value(y), [0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul inner extents differ")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2, 2], vec![0.0; 4]);
        t.matmul(a, b);
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant_vec(vec![-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut t = Tape::new();
        let x = t.constant_vec(vec![1.5, -2.5, 0.0]);
        let z = t.constant_vec(vec![0.0; 3]);
        let y = t.add(x, z);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut t = Tape::new();
        let a = t.constant_vec(vec![0.0, 0.0]);
        let p = t.softmax(a);
        assert_eq!(t.value(p), [0.5, 0.5]);

        let b = t.constant_vec(vec![1000.0, 1000.0]);
        let q = t.softmax(b);
        assert_eq!(t.value(q), [0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let a = t.constant_vec(vec![0.0, 3.0f64.ln()]);
        let p = t.softmax(a);
        assert!((t.value(p)[0] - 0.25).abs() < 1e-12);
        assert!((t.value(p)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut t = Tape::new();
        let a = t.constant_vec(vec![3.2, -100.0, 55.0, 0.0, 1e-3]);
        let p = t.softmax(a);
        let s: f64 = t.value(p).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(t.value(p).iter().all(|&x| x > 0.0));
    }

    #[test]
    fn reduce_max_rows_basics() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let y = t.reduce_max_rows(x, &[true, true]);
        assert_eq!(t.value(y), [3.0, 5.0]);

        let single = t.constant(vec![1, 3], vec![7.0, -1.0, 0.0]);
        let z = t.reduce_max_rows(single, &[true]);
        assert_eq!(t.value(z), [7.0, -1.0, 0.0]);
    }

    #[test]
    fn reduce_max_rows_permutation_invariant() {
        let rows = [vec![1.0, 5.0, -2.0], vec![3.0, 2.0, 9.0], vec![0.0, 7.0, 1.0]];
        let orders: [[usize; 3]; 3] = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        let mut outputs = Vec::new();
        for order in orders {
            let mut t = Tape::new();
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let x = t.constant(vec![3, 3], data);
            let y = t.reduce_max_rows(x, &[true, true, true]);
            outputs.push(t.value(y).to_vec());
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }

    #[test]
    #[should_panic(expected = "all rows masked")]
    fn reduce_max_rows_all_masked_panics() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2], vec![0.0; 4]);
        t.reduce_max_rows(x, &[false, false]);
    }

    #[test]
    fn smooth_l1_fixtures() {
        let mut t = Tape::new();
        let p = t.constant_vec(vec![1.0]);
        let l = t.smooth_l1_loss(p, &[0.0], 1.0);
        assert!((t.scalar_value(l) - 0.5).abs() < 1e-15);

        let q = t.constant_vec(vec![2.0, -3.0]);
        let l0 = t.smooth_l1_loss(q, &[2.0, -3.0], 1.0);
        assert_eq!(t.scalar_value(l0), 0.0);
    }

    #[test]
    fn bce_closed_form() {
        // p = sigmoid(0) = 0.5 against y = 1 gives ln 2.
        let mut t = Tape::new();
        let x = t.constant_vec(vec![0.0]);
        let l = t.bce_with_logits(x, &[1.0]);
        assert!((t.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn backward_square_and_sum() {
        // f(x) = x^2 at x = 3 gives df/dx = 6.
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![3.0]);
        let y = t.mul(x, x);
        t.backward(y);
        assert_eq!(t.grad(x), [6.0]);

        // f(x) = sum(x) gives all-ones.
        let mut t = Tape::new();
        let x = t.leaf(vec![4], vec![1.0, -2.0, 0.5, 9.0]);
        let y = t.sum_all(x);
        t.backward(y);
        assert_eq!(t.grad(x), [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "backward root must be scalar")]
    fn backward_non_scalar_root_panics() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0]);
        t.backward(x);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![2.0]);
        let y = t.mul(x, x);
        t.backward(y);
        t.backward(y);
        assert_eq!(t.grad(x), [8.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(vec![2, 3], vec![0.3, -1.7, 2.9, 0.0, 4.2, -0.1]);
            let w = t.leaf(vec![3, 2], vec![1.0, 0.5, -0.25, 2.0, 0.125, -4.0]);
            let y = t.matmul(x, w);
            let y = t.tanh(y);
            let l = t.mean_all(y);
            t.backward(l);
            (t.value(l).to_vec(), t.grad(x).to_vec(), t.grad(w).to_vec())
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}

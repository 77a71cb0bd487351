use super::{Matrix, NumError, Rng};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Operation recorded on the tape. Kept for introspection and debugging;
/// the actual reverse rule lives in the node's backward closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
    Scale,
    AddBias,
    SoftmaxRows,
    Dropout,
    CrossEntropy,
    SliceRows,
    PadRows,
    Transpose,
    Normalize,
    MeanRows,
    Sum,
}

type BackFn = Box<dyn Fn(&Matrix) -> Vec<(NodeId, Matrix)>>;

struct Node {
    op: OpKind,
    value: Matrix,
    backward: Option<BackFn>,
}

/// Wengert list for reverse-mode differentiation. Operations append nodes in
/// topological order; `backward` replays them in reverse accumulating grads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a reverse sweep, addressable by node id.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero matrix if the leaf never influenced the loss.
    pub fn of(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape.0, shape.1),
        }
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op
    }

    fn push(&mut self, op: OpKind, value: Matrix, backward: Option<BackFn>) -> NodeId {
        debug_assert!(value.all_finite(), "tape node value contains NaN/Inf ({op:?})");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, backward });
        id
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(OpKind::Leaf, value, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.matmul(&vb)?;
        let back: BackFn = Box::new(move |g| {
            let da = g.matmul(&vb.transpose()).unwrap();
            let db = va.transpose().matmul(g).unwrap();
            vec![(a, da), (b, db)]
        });
        Ok(self.push(OpKind::MatMul, out, Some(back)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let out = self.value(a).add(self.value(b))?;
        let back: BackFn = Box::new(move |g| vec![(a, g.clone()), (b, g.clone())]);
        Ok(self.push(OpKind::Add, out, Some(back)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = va.hadamard(&vb)?;
        let back: BackFn = Box::new(move |g| {
            vec![(a, g.hadamard(&vb).unwrap()), (b, g.hadamard(&va).unwrap())]
        });
        Ok(self.push(OpKind::Hadamard, out, Some(back)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).scale(c);
        let back: BackFn = Box::new(move |g| vec![(a, g.scale(c))]);
        self.push(OpKind::Scale, out, Some(back))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let y = out.clone();
        let back: BackFn = Box::new(move |g| {
            let d = y.map(|v| v * (1.0 - v));
            vec![(a, g.hadamard(&d).unwrap())]
        });
        self.push(OpKind::Sigmoid, out, Some(back))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        let y = out.clone();
        let back: BackFn = Box::new(move |g| {
            let d = y.map(|v| 1.0 - v * v);
            vec![(a, g.hadamard(&d).unwrap())]
        });
        self.push(OpKind::Tanh, out, Some(back))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let out = va.map(|x| x.max(0.0));
        let back: BackFn = Box::new(move |g| {
            let d = va.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
            vec![(a, g.hadamard(&d).unwrap())]
        });
        self.push(OpKind::Relu, out, Some(back))
    }

    /// Adds a 1xC bias row to every row of an NxC matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        let va = self.value(a);
        let vb = self.value(bias);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(NumError::ShapeMismatch {
                op: "add_bias",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.at(r, c) + vb.at(0, c);
                out.set(r, c, v);
            }
        }
        let back: BackFn = Box::new(move |g| {
            let mut db = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let v = db.at(0, c) + g.at(r, c);
                    db.set(0, c, v);
                }
            }
            vec![(a, g.clone()), (bias, db)]
        });
        Ok(self.push(OpKind::AddBias, out, Some(back)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).softmax_rows();
        let y = out.clone();
        let back: BackFn = Box::new(move |g| {
            let mut dx = Matrix::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let dot: f64 = (0..g.cols()).map(|c| g.at(r, c) * y.at(r, c)).sum();
                for c in 0..g.cols() {
                    dx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                }
            }
            vec![(a, dx)]
        });
        self.push(OpKind::SoftmaxRows, out, Some(back))
    }

    /// Cross-entropy of a 1xC probability row against a 1-based class label.
    /// The probability is floored at 1e-12 before the log.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId, NumError> {
        const FLOOR: f64 = 1e-12;
        let vp = self.value(probs);
        let classes = vp.cols();
        if vp.rows() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vp.shape(),
                rhs: (1, classes),
            });
        }
        if label < 1 || label > classes {
            return Err(NumError::LabelOutOfRange { label, classes });
        }
        let p = vp.at(0, label - 1).max(FLOOR);
        let out = Matrix::scalar(-p.ln());
        let back: BackFn = Box::new(move |g| {
            let mut dp = Matrix::zeros(1, classes);
            dp.set(0, label - 1, -g.at(0, 0) / p);
            vec![(probs, dp)]
        });
        Ok(self.push(OpKind::CrossEntropy, out, Some(back)))
    }

    /// Inverted dropout: zeroes entries with probability p and scales
    /// survivors by 1/(1-p). Identity when train is false or p == 0.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut Rng, train: bool) -> NodeId {
        if !train || p <= 0.0 {
            let back: BackFn = Box::new(move |g| vec![(a, g.clone())]);
            let out = self.value(a).clone();
            return self.push(OpKind::Dropout, out, Some(back));
        }
        let keep = 1.0 - p;
        let va = self.value(a);
        let mask = Matrix::from_vec(
            va.rows(),
            va.cols(),
            (0..va.len())
                .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let out = va.hadamard(&mask).unwrap();
        let back: BackFn = Box::new(move |g| vec![(a, g.hadamard(&mask).unwrap())]);
        self.push(OpKind::Dropout, out, Some(back))
    }

    /// Selects rows by index (indices fixed at forward time).
    pub fn slice_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        assert!(!indices.is_empty() && indices.iter().all(|&i| i < rows));
        let mut out = Matrix::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..cols {
                out.set(r, c, va.at(i, c));
            }
        }
        let back: BackFn = Box::new(move |g| {
            let mut da = Matrix::zeros(rows, cols);
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    let v = da.at(i, c) + g.at(r, c);
                    da.set(i, c, v);
                }
            }
            vec![(a, da)]
        });
        self.push(OpKind::SliceRows, out, Some(back))
    }

    /// Appends zero rows until the matrix has `target_rows` rows.
    pub fn pad_rows(&mut self, a: NodeId, target_rows: usize) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        assert!(target_rows >= rows);
        if target_rows == rows {
            let out = va.clone();
            let back: BackFn = Box::new(move |g| vec![(a, g.clone())]);
            return self.push(OpKind::PadRows, out, Some(back));
        }
        let mut out = Matrix::zeros(target_rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, va.at(r, c));
            }
        }
        let back: BackFn = Box::new(move |g| {
            let mut da = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    da.set(r, c, g.at(r, c));
                }
            }
            vec![(a, da)]
        });
        self.push(OpKind::PadRows, out, Some(back))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        let back: BackFn = Box::new(move |g| vec![(a, g.transpose())]);
        self.push(OpKind::Transpose, out, Some(back))
    }

    /// Normalizes a column vector to unit length.
    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        let va = self.value(a).clone();
        if va.cols() != 1 {
            return Err(NumError::ShapeMismatch { op: "normalize", lhs: va.shape(), rhs: (va.rows(), 1) });
        }
        let norm = va.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(NumError::DegenerateVector);
        }
        let out = va.scale(1.0 / norm);
        let y = out.clone();
        let back: BackFn = Box::new(move |g| {
            let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let da = g.sub(&y.scale(dot)).unwrap().scale(1.0 / norm);
            vec![(a, da)]
        });
        Ok(self.push(OpKind::Normalize, out, Some(back)))
    }

    /// Column-wise mean over rows: NxC -> 1xC.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut out = Matrix::zeros(1, cols);
        for c in 0..cols {
            let s: f64 = (0..rows).map(|r| va.at(r, c)).sum();
            out.set(0, c, s / rows as f64);
        }
        let back: BackFn = Box::new(move |g| {
            let mut da = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    da.set(r, c, g.at(0, c) / rows as f64);
                }
            }
            vec![(a, da)]
        });
        self.push(OpKind::MeanRows, out, Some(back))
    }

    /// Sum of all entries: scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let out = Matrix::scalar(va.sum());
        let back: BackFn = Box::new(move |g| {
            vec![(a, Matrix::filled(rows, cols, g.at(0, 0)))]
        });
        self.push(OpKind::Sum, out, Some(back))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumError::NonScalarLoss { shape: lv.shape() });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].backward {
                for (pid, contrib) in back(&g) {
                    match &mut grads[pid.0] {
                        Some(acc) => *acc = acc.add(&contrib)?,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Central finite differences of a scalar function of one parameter matrix.
pub fn finite_diff_grad(
    mut fn_of: impl FnMut(&Matrix) -> f64,
    params: &Matrix,
    h: f64,
) -> Matrix {
    assert!(h > 0.0);
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let fp = fn_of(&p);
        p.data_mut()[i] = orig - h;
        let fm = fn_of(&p);
        p.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = t.sum(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn softmax_cross_entropy_gradient_identity() {
        // d/dz of CE(softmax(z), k) = softmax(z) - onehot(k)
        let mut t = Tape::new();
        let z = t.leaf(Matrix::from_rows(&[vec![0.3, -1.2, 0.8, 0.1]]));
        let p = t.softmax_rows(z);
        let loss = t.cross_entropy(p, 3).unwrap();
        let g = t.backward(loss).unwrap();
        let probs = t.value(p).clone();
        let gz = g.get(z).unwrap();
        for c in 0..4 {
            let expect = probs.at(0, c) - if c == 2 { 1.0 } else { 0.0 };
            assert!((gz.at(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let onehot = t.leaf(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]));
        let l = t.cross_entropy(onehot, 1).unwrap();
        assert!(t.value(l).at(0, 0).abs() < 1e-12);

        let uniform = t.leaf(Matrix::filled(1, 7, 1.0 / 7.0));
        let l7 = t.cross_entropy(uniform, 4).unwrap();
        assert!((t.value(l7).at(0, 0) - 7.0_f64.ln()).abs() < 1e-12);

        assert!(matches!(
            t.cross_entropy(uniform, 8),
            Err(NumError::LabelOutOfRange { label: 8, classes: 7 })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::zeros(2, 2));
        let y = t.relu(w);
        assert!(matches!(t.backward(y), Err(NumError::NonScalarLoss { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[vec![-1.0, 2.0]]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);

        let z = t.leaf(Matrix::scalar(0.0));
        let s = t.sigmoid(z);
        assert!((t.value(s).at(0, 0) - 0.5).abs() < 1e-15);

        let big = t.leaf(Matrix::scalar(1e3));
        let th = t.tanh(big);
        assert!((t.value(th).at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_matches_calculus() {
        let g = finite_diff_grad(|m| m.at(0, 0) * m.at(0, 0), &Matrix::scalar(3.0), 1e-5);
        assert!((g.at(0, 0) - 6.0).abs() < 1e-6);
        let gc = finite_diff_grad(|_| 7.5, &Matrix::zeros(2, 3), 1e-5);
        assert_eq!(gc.max_abs(), 0.0);
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        // Two-layer network touching matmul, add_bias, tanh, sigmoid,
        // hadamard, softmax and cross-entropy.
        let mut rng = Rng::new(11);
        let w1v = Matrix::from_vec(3, 4, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let b1v = Matrix::from_vec(1, 4, (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let w2v = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let xv = Matrix::from_vec(1, 3, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect());

        let eval = |w1: &Matrix, b1: &Matrix, w2: &Matrix| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let w1 = t.leaf(w1.clone());
            let b1 = t.leaf(b1.clone());
            let w2 = t.leaf(w2.clone());
            let h = t.matmul(x, w1).unwrap();
            let h = t.add_bias(h, b1).unwrap();
            let h = t.tanh(h);
            let hs = t.sigmoid(h);
            let h = t.hadamard(h, hs).unwrap();
            let z = t.matmul(h, w2).unwrap();
            let p = t.softmax_rows(z);
            let l = t.cross_entropy(p, 2).unwrap();
            t.value(l).at(0, 0)
        };

        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let w1 = t.leaf(w1v.clone());
        let b1 = t.leaf(b1v.clone());
        let w2 = t.leaf(w2v.clone());
        let h = t.matmul(x, w1).unwrap();
        let h = t.add_bias(h, b1).unwrap();
        let h = t.tanh(h);
        let hs = t.sigmoid(h);
        let h = t.hadamard(h, hs).unwrap();
        let z = t.matmul(h, w2).unwrap();
        let p = t.softmax_rows(z);
        let l = t.cross_entropy(p, 2).unwrap();
        let g = t.backward(l).unwrap();

        for (id, val, evalp) in [
            (w1, &w1v, 0usize),
            (b1, &b1v, 1),
            (w2, &w2v, 2),
        ] {
            let fd = finite_diff_grad(
                |m| match evalp {
                    0 => eval(m, &b1v, &w2v),
                    1 => eval(&w1v, m, &w2v),
                    _ => eval(&w1v, &b1v, m),
                },
                val,
                1e-5,
            );
            let analytic = g.get(id).unwrap();
            let denom = fd.max_abs().max(analytic.max_abs()).max(1e-8);
            let rel = analytic.sub(&fd).unwrap().max_abs() / denom;
            assert!(rel < 1e-4, "grad mismatch rel={rel}");
        }
    }
}

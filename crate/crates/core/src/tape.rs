//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Operations are recorded eagerly on a [`Tape`]; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients. The binding contract for
//! every differentiable operation in this crate is [`grad_check`]: analytic
//! gradients must agree with central finite differences.
//!
//! Shape mismatches inside tape ops are programming errors and panic; the
//! public module-level operations validate their inputs first and return
//! typed errors.

use crate::error::Error;
use crate::matrix::Matrix;
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a (RxC) + row b (1xC)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (RxC) / col c (Rx1)` broadcast over columns.
    DivCol(Var, Var),
    /// `a * s` where `s` is a 1x1 node.
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    /// ln(a / (1-a)), the inverse sigmoid.
    Logit(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    Reshape(Var),
    /// Block starting at (r0, c0) of the source; extent given by this node.
    Slice(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    RowSums(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    /// Rows whose mask entry is false are zeroed (forward and backward).
    ZeroRows(Var, Vec<bool>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Gradients::wrt`] but materializes zeros for unreached nodes.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// True when every recorded node value is finite. Probing functions on
    /// invalid domains (log of a negative, saturated exponentials) shows up
    /// here even when a downstream max() would launder the NaN away.
    pub fn all_values_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.rows(), m.cols()), (1, 1), "scalar() on non-1x1 node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Whether it is a trainable input or a constant is decided by
    /// the caller when reading gradients.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .expect("tape matmul shape mismatch");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row needs a 1xC row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let v = Matrix::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + bv.get(0, c));
        self.push(v, Op::AddRow(a, b))
    }

    pub fn div_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.cols(), 1, "div_col needs an Rx1 column vector");
        assert_eq!(av.rows(), cv.rows(), "div_col height mismatch");
        let v = Matrix::from_fn(av.rows(), av.cols(), |r, c2| av.get(r, c2) / cv.get(r, 0));
        self.push(v, Op::DivCol(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_f);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn logit(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| (x / (1.0 - x)).ln());
        self.push(v, Op::Logit(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshaped(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert!(r0 + rows <= av.rows() && c0 + cols <= av.cols(), "slice out of range");
        let v = Matrix::from_fn(rows, cols, |r, c| av.get(r0 + r, c0 + c));
        self.push(v, Op::Slice(a, r0, c0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut data: Vec<Vec<f64>> = vec![Vec::new(); rows];
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r].extend_from_slice(pv.row(r));
            }
        }
        let cols = data[0].len();
        let flat: Vec<f64> = data.into_iter().flatten().collect();
        self.push(Matrix::from_vec(rows, cols, flat), Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(v, Op::SumAll(a))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Matrix::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        self.push(v, Op::RowSums(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let v = Matrix::from_fn(1, av.cols(), |_, c| {
            (0..av.rows()).map(|r| av.get(r, c)).sum::<f64>() / n
        });
        self.push(v, Op::MeanRows(a))
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for c in 0..av.cols() {
                let e = (row[c] - mx).exp();
                out.set(r, c, e);
                z += e;
            }
            for c in 0..av.cols() {
                out.set(r, c, out.get(r, c) / z);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn zero_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), mask.len(), "zero_rows mask length mismatch");
        let v = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
            if mask[r] {
                av.get(r, c)
            } else {
                0.0
            }
        });
        self.push(v, Op::ZeroRows(a, mask.to_vec()))
    }

    /// Backpropagates from a 1x1 node, returning gradients for every node the
    /// root depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        let rv = self.value(root);
        assert_eq!((rv.rows(), rv.cols()), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // The root's own gradient stays queryable.
            if idx == root.0 {
                grads[idx] = Some(g.clone());
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let bt = self.value(*b).transpose();
                    let at = self.value(*a).transpose();
                    accumulate(&mut grads, *a, g.matmul(&bt).unwrap());
                    accumulate(&mut grads, *b, at.matmul(&g).unwrap());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.hadamard(self.value(*b)));
                    accumulate(&mut grads, *b, g.hadamard(self.value(*a)));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.zip_map(bv, |gv, y| gv / y));
                    let av = self.value(*a);
                    let gb = Matrix::from_fn(bv.rows(), bv.cols(), |r, c| {
                        let y = bv.get(r, c);
                        -g.get(r, c) * av.get(r, c) / (y * y)
                    });
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let gb = Matrix::from_fn(1, g.cols(), |_, c| {
                        (0..g.rows()).map(|r| g.get(r, c)).sum()
                    });
                    accumulate(&mut grads, *b, gb);
                }
                Op::DivCol(a, c) => {
                    let cv = self.value(*c);
                    let av = self.value(*a);
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c2| g.get(r, c2) / cv.get(r, 0));
                    accumulate(&mut grads, *a, ga);
                    let gc = Matrix::from_fn(cv.rows(), 1, |r, _| {
                        let d = cv.get(r, 0);
                        -(0..g.cols()).map(|c2| g.get(r, c2) * av.get(r, c2)).sum::<f64>() / (d * d)
                    });
                    accumulate(&mut grads, *c, gc);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.scalar(*s);
                    accumulate(&mut grads, *a, g.scale(sv));
                    let gs = g.hadamard(self.value(*a)).sum();
                    accumulate(&mut grads, *s, Matrix::from_vec(1, 1, vec![gs]));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    accumulate(&mut grads, *a, g.zip_map(yv, |gv, y| gv * y * (1.0 - y)));
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.hadamard(&node.value));
                }
                Op::Sqrt(a) => {
                    let yv = &node.value;
                    accumulate(&mut grads, *a, g.zip_map(yv, |gv, y| gv / (2.0 * y)));
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(av, |gv, x| gv * sign(x)));
                }
                Op::Logit(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, g.zip_map(av, |gv, x| gv / (x * (1.0 - x))));
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(av, |gv, x| if x > *lo && x < *hi { gv } else { 0.0 }),
                    );
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, g.reshaped(av.rows(), av.cols()));
                }
                Op::Slice(a, r0, c0) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r0 + r, c0 + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let gp = Matrix::from_fn(pv.rows(), pv.cols(), |r, c| g.get(r, c0 + c));
                        c0 += pv.cols();
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let gv = g.get(0, 0);
                    accumulate(&mut grads, *a, Matrix::from_fn(av.rows(), av.cols(), |_, _| gv));
                }
                Op::RowSums(a) => {
                    let av = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Matrix::from_fn(av.rows(), av.cols(), |r, _| g.get(r, 0)),
                    );
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    accumulate(
                        &mut grads,
                        *a,
                        Matrix::from_fn(av.rows(), av.cols(), |_, c| g.get(0, c) / n),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let yv = &node.value;
                    let mut ga = Matrix::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let dot: f64 = (0..yv.cols()).map(|c| g.get(r, c) * yv.get(r, c)).sum();
                        for c in 0..yv.cols() {
                            ga.set(r, c, yv.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ZeroRows(a, mask) => {
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        if mask[r] {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g = g.add(&contribution),
        slot => *slot = Some(contribution),
    }
}

/// Verifies the analytic gradient of a scalar-valued function against central
/// finite differences.
///
/// `f` builds the scalar output on the tape from the input node. Returns the
/// maximum over entries of `|analytic - central| / max(1, |analytic|)`.
/// Errors if any probe evaluates non-finite.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(h > 0.0, "step size must be positive");

    let eval = |m: &Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(m.clone());
        let out = f(&mut tape, v);
        if !tape.all_values_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(tape.scalar(out))
    };

    // Analytic gradient at x.
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let out = f(&mut tape, v);
    if !tape.all_values_finite() {
        return Err(Error::NonFinite("grad_check center".into()));
    }
    let grads = tape.backward(out);
    let analytic = grads.wrt_or_zeros(v, x.rows(), x.cols());

    let mut max_err = 0.0_f64;
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = probe.get(r, c);
            probe.set(r, c, orig + h);
            let fp = eval(&probe)?;
            probe.set(r, c, orig - h);
            let fm = eval(&probe)?;
            probe.set(r, c, orig);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.get(r, c);
            let err = (a - fd).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 90);
        Matrix::from_fn(rows, cols, |_, _| rng.next_range(-1.5, 1.5))
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum(x^2) at [1, 2]: analytic [2, 4].
        let x = Matrix::row_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let sq = tape.mul(v, v);
        let out = tape.sum_all(sq);
        let grads = tape.backward(out);
        let g = grads.wrt(v).unwrap();
        assert_eq!(g, &Matrix::row_vec(vec![2.0, 4.0]));

        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v);
                t.sum_all(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn matmul_chain_gradcheck() {
        let w = random(4, 3, 21);
        let err = grad_check(
            |t, v| {
                let wv = t.input(w.clone());
                let p = t.matmul(v, wv);
                let s = t.sigmoid(p);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            &random(2, 4, 22),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_and_logit_gradcheck() {
        let err = grad_check(
            |t, v| {
                let s = t.softmax_rows(v);
                let c = t.clamp(s, 1e-4, 1.0 - 1e-4);
                let l = t.logit(c);
                let sq = t.mul(l, l);
                t.sum_all(sq)
            },
            &random(3, 5, 31),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn broadcast_and_reduction_gradcheck() {
        let bias = random(1, 4, 41);
        let err = grad_check(
            |t, v| {
                let b = t.input(bias.clone());
                let y = t.add_row(v, b);
                let rs = t.row_sums(y);
                let d = t.add_const(rs, 2.0);
                let n = t.div_col(y, d);
                let m = t.mean_rows(n);
                let sq = t.mul(m, m);
                t.sum_all(sq)
            },
            &random(5, 4, 42).map(|x| x.abs() + 0.1),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn slice_concat_scalar_gradcheck() {
        let err = grad_check(
            |t, v| {
                let a = t.slice(v, 0, 0, 1, 3);
                let b = t.slice(v, 1, 1, 1, 3);
                let cat = t.concat_cols(&[a, b]);
                let sm = t.softmax_rows(cat);
                let w0 = t.slice(sm, 0, 0, 1, 1);
                let scaled = t.mul_scalar(b, w0);
                let e = t.exp(scaled);
                t.sum_all(e)
            },
            &random(3, 4, 51),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn zero_rows_blocks_gradient() {
        let x = random(3, 2, 61);
        let mut tape = Tape::new();
        let v = tape.input(x);
        let z = tape.zero_rows(v, &[true, false, true]);
        let s = tape.mul(z, z);
        let out = tape.sum_all(s);
        let grads = tape.backward(out);
        let g = grads.wrt(v).unwrap();
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_reports_nonfinite_probe() {
        // ln via logit of a value pushed outside (0, 1) by the probe offset.
        let x = Matrix::row_vec(vec![1.0 - 5e-7]);
        let res = grad_check(
            |t, v| {
                let l = t.logit(v);
                t.sum_all(l)
            },
            &x,
            1e-6,
        );
        assert!(res.is_err());
    }
}

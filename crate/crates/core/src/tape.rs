//! Reverse-mode differentiation over a recorded op tape.
//!
//! Ops execute eagerly and append themselves to the tape; `backward` replays
//! the tape in reverse, seeding the gradient at any recorded tensor. The
//! primitive set is exactly what the transformer needs: matmul, add, mul,
//! RMS-normalize, softmax, GELU, embedding lookup, and row slice/concat.
//! Tapes are immutable once built (ops only ever append) and every op output
//! is checked finite, so a NaN is reported at the op that produced it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A · B
    MatMul { a: TensorId, b: TensorId },
    /// C = A · Bᵀ
    MatMulNt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MulScalar { a: TensorId, s: f64 },
    RmsNorm { x: TensorId, gain: TensorId, eps: f64 },
    Softmax { x: TensorId },
    Gelu { x: TensorId },
    Embedding { table: TensorId, ids: Vec<usize> },
    SliceRows { x: TensorId, r0: usize },
    ConcatRows { a: TensorId, b: TensorId },
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Arc<Tensor>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor> {
        self.values.get(id).map(|v| v.as_ref()).ok_or(Error::UnknownTensor(id))
    }

    fn push(&mut self, t: Tensor, op: Op, name: &'static str) -> Result<TensorId> {
        t.check_finite(name)?;
        self.values.push(Arc::new(t));
        self.ops.push(op);
        Ok(self.values.len() - 1)
    }

    /// Records an input tensor (parameter or data). Leaves are shared, not
    /// copied.
    pub fn leaf(&mut self, t: Arc<Tensor>) -> TensorId {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.values.len() - 1
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> TensorId {
        self.leaf(Arc::new(t))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = tensor::matmul(self.value(a)?, self.value(b)?)?;
        self.push(t, Op::MatMul { a, b }, "matmul")
    }

    /// a · bᵀ — the transposed form needed for attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = tensor::matmul_nt(self.value(a)?, self.value(b)?)?;
        self.push(t, Op::MatMulNt { a, b }, "matmul_nt")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = tensor::add(self.value(a)?, self.value(b)?)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = tensor::mul(self.value(a)?, self.value(b)?)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> Result<TensorId> {
        let t = tensor::scale(self.value(a)?, s);
        self.push(t, Op::MulScalar { a, s }, "mul_scalar")
    }

    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        let t = tensor::rms_norm(self.value(x)?, self.value(gain)?, eps)?;
        self.push(t, Op::RmsNorm { x, gain, eps }, "rms_norm")
    }

    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let t = tensor::softmax_rows(self.value(x)?);
        self.push(t, Op::Softmax { x }, "softmax")
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let t = tensor::gelu(self.value(x)?);
        self.push(t, Op::Gelu { x }, "gelu")
    }

    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = tensor::embedding(self.value(table)?, ids)?;
        self.push(t, Op::Embedding { table, ids: ids.to_vec() }, "embedding")
    }

    pub fn slice_rows(&mut self, x: TensorId, r0: usize, r1: usize) -> Result<TensorId> {
        let t = tensor::slice_rows(self.value(x)?, r0, r1)?;
        self.push(t, Op::SliceRows { x, r0 }, "slice_rows")
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let t = tensor::concat_rows(self.value(a)?, self.value(b)?)?;
        self.push(t, Op::ConcatRows { a, b }, "concat_rows")
    }

    /// Propagates `seed` backward from `at` and returns dSeed/dTensor for
    /// every requested id. Tensors the seed does not reach get a zero
    /// gradient.
    pub fn backward(
        &self,
        at: TensorId,
        seed: &Tensor,
        wrt: &[TensorId],
    ) -> Result<HashMap<TensorId, Tensor>> {
        let out = self.value(at)?;
        if seed.numel() != out.numel() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("seed {:?} vs output {:?}", seed.shape(), out.shape()),
            });
        }
        // Accept a seed with matching element count (a bare scalar seeding a
        // 1×1 output); the layout is row-major either way.
        let seed = Tensor::new(out.shape().to_vec(), seed.data().to_vec())?;
        for &id in wrt {
            if id >= self.values.len() {
                return Err(Error::UnknownTensor(id));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[at] = Some(seed);

        for i in (0..=at).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        let mut out_map = HashMap::new();
        for &id in wrt {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.values[id].shape().to_vec()));
            out_map.insert(id, g);
        }
        Ok(out_map)
    }

    fn accumulate_inputs(
        &self,
        i: TensorId,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = tensor::matmul_nt(dy, self.value(*b)?)?;
                accumulate(grads, *a, da)?;
                let (m, k) = self.values[*a].rows_cols();
                let (_, n) = dy.rows_cols();
                let mut db = vec![0.0; k * n];
                tensor::matmul_tn_into(&mut db, self.values[*a].data(), dy.data(), m, k, n);
                accumulate(grads, *b, reshape_like(db, self.values[*b].shape()))?;
            }
            Op::MatMulNt { a, b } => {
                let da = tensor::matmul(dy, self.value(*b)?)?;
                accumulate(grads, *a, da)?;
                // dB = dCᵀ · A, computed as matmul_tn over dC.
                let (m, n) = dy.rows_cols();
                let (_, k) = self.values[*a].rows_cols();
                let mut db = vec![0.0; n * k];
                tensor::matmul_tn_into(&mut db, dy.data(), self.values[*a].data(), m, n, k);
                accumulate(grads, *b, reshape_like(db, self.values[*b].shape()))?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, dy.clone())?;
                accumulate(grads, *b, dy.clone())?;
            }
            Op::Mul { a, b } => {
                accumulate(grads, *a, tensor::mul(dy, self.value(*b)?)?)?;
                accumulate(grads, *b, tensor::mul(dy, self.value(*a)?)?)?;
            }
            Op::MulScalar { a, s } => {
                accumulate(grads, *a, tensor::scale(dy, *s))?;
            }
            Op::RmsNorm { x, gain, eps } => {
                let (dx, dg) =
                    tensor::rms_norm_backward(self.value(*x)?, self.value(*gain)?, *eps, dy);
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gain, dg)?;
            }
            Op::Softmax { x } => {
                let dx = tensor::softmax_rows_backward(&self.values[i], dy);
                accumulate(grads, *x, dx)?;
            }
            Op::Gelu { x } => {
                let xin = self.value(*x)?;
                let data = xin
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| g * tensor::gelu_grad_scalar(v))
                    .collect();
                accumulate(grads, *x, Tensor::new(xin.shape().to_vec(), data)?)?;
            }
            Op::Embedding { table, ids } => {
                let tbl = self.value(*table)?;
                let (_, cols) = tbl.rows_cols();
                let mut dt = Tensor::zeros(tbl.shape().to_vec());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[row * cols..(row + 1) * cols];
                    tensor::axpy(&mut dt.data_mut()[id * cols..(id + 1) * cols], 1.0, src);
                }
                accumulate(grads, *table, dt)?;
            }
            Op::SliceRows { x, r0 } => {
                let xin = self.value(*x)?;
                let (_, cols) = xin.rows_cols();
                let mut dx = Tensor::zeros(xin.shape().to_vec());
                dx.data_mut()[r0 * cols..r0 * cols + dy.numel()].copy_from_slice(dy.data());
                accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows { a, b } => {
                let na = self.values[*a].numel();
                let da = Tensor::new(
                    self.values[*a].shape().to_vec(),
                    dy.data()[..na].to_vec(),
                )?;
                let db = Tensor::new(
                    self.values[*b].shape().to_vec(),
                    dy.data()[na..].to_vec(),
                )?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: TensorId, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(acc) => {
            let summed = tensor::add(acc, &g)?;
            *acc = summed;
        }
        slot => *slot = Some(g),
    }
    Ok(())
}

fn reshape_like(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("backward shapes are consistent by construction")
}

/// A differentiable scalar-valued program: given a tape and the leaf ids of
/// its inputs, builds the computation and returns the scalar output id.
pub trait ScalarProgram {
    fn build(&self, tape: &mut Tape, inputs: &[TensorId]) -> Result<TensorId>;
}

impl<F> ScalarProgram for F
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    fn build(&self, tape: &mut Tape, inputs: &[TensorId]) -> Result<TensorId> {
        self(tape, inputs)
    }
}

/// Compares backprop gradients of a scalar program against central finite
/// differences at `point`, returning the max relative error
/// |fd − bp| / (|fd| + |bp| + 1e-12) over all input coordinates.
pub fn finite_difference_check<P: ScalarProgram>(
    program: &P,
    point: &[Tensor],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Metric(format!("invalid finite-difference step {step}")));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf_owned(t.clone())).collect();
        let out = program.build(&mut tape, &ids)?;
        let v = tape.value(out)?;
        if v.numel() != 1 {
            return Err(Error::Metric("finite_difference_check needs a scalar output".into()));
        }
        Ok(v.item())
    };

    // Backprop gradients at the point.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = point.iter().map(|t| tape.leaf_owned(t.clone())).collect();
    let out = program.build(&mut tape, &ids)?;
    if tape.value(out)?.numel() != 1 {
        return Err(Error::Metric("finite_difference_check needs a scalar output".into()));
    }
    let grads = tape.backward(out, &Tensor::scalar(1.0), &ids)?;

    let mut max_err: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = point.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let bp = &grads[id];
        for ci in 0..point[ti].numel() {
            let orig = point[ti].data()[ci];
            perturbed[ti].data_mut()[ci] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[ti].data_mut()[ci] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NonFinite { op: "finite_difference_check" });
            }
            let bpv = bp.data()[ci];
            let err = (fd - bpv).abs() / (fd.abs() + bpv.abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0), &[x]).unwrap();
        assert_eq!(g[&x].data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(3.0));
        let c = tape.leaf_owned(Tensor::scalar(5.0));
        let y = tape.mul_scalar(c, 2.0).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0), &[x]).unwrap();
        assert_eq!(g[&x].data(), &[0.0]);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(1.0));
        assert!(matches!(
            tape.backward(x, &Tensor::scalar(1.0), &[99]),
            Err(Error::UnknownTensor(99))
        ));
    }

    #[test]
    fn linear_program_gradient_is_the_coefficient_matrix() {
        // y = sum(C · x): d y / d x = column sums of C, exactly.
        let c = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let cid = tape.leaf_owned(c.clone());
        let x = tape.leaf_owned(Tensor::matrix(3, 1, vec![0.3, 0.7, -0.2]).unwrap());
        let y = tape.matmul(cid, x).unwrap();
        let ones = tape.leaf_owned(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let s = tape.matmul(ones, y).unwrap();
        let g = tape.backward(s, &Tensor::scalar(1.0), &[x]).unwrap();
        let expect = [1.0 + 4.0, -2.0 + 3.0, 0.5 - 1.0];
        for (a, b) in g[&x].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn mlp_program(d_in: usize, d_hidden: usize) -> impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId> {
        move |tape, ids| {
            // ids: [x (1×d_in), w1 (d_in×d_hidden), w2 (d_hidden×1)]
            let h = tape.matmul(ids[0], ids[1])?;
            let h = tape.gelu(h)?;
            let out = tape.matmul(h, ids[2])?;
            let _ = (d_in, d_hidden);
            Ok(out)
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(11);
        let mut randt = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let point = vec![randt(vec![1, 4]), randt(vec![4, 8]), randt(vec![8, 1])];
        let err = finite_difference_check(&mlp_program(4, 8), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn linear_program_fd_is_exact() {
        let prog = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
            let w = tape.leaf_owned(Tensor::matrix(3, 1, vec![2.0, -1.0, 0.5]).unwrap());
            tape.matmul(ids[0], w)
        };
        let point = vec![Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()];
        let err = finite_difference_check(&prog, &point, 1e-3).unwrap();
        assert!(err < 1e-10, "linear fd error {err}");
    }

    #[test]
    fn softmax_dot_metric_fd() {
        let prog = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
            let p = tape.softmax(ids[0])?;
            let w = tape.leaf_owned(Tensor::matrix(4, 1, vec![1.0, -0.5, 2.0, 0.25]).unwrap());
            tape.matmul(p, w)
        };
        let point = vec![Tensor::matrix(1, 4, vec![0.1, -0.4, 0.9, 0.2]).unwrap()];
        let err = finite_difference_check(&prog, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "softmax fd error {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let prog = |tape: &mut Tape, ids: &[TensorId]| -> Result<TensorId> {
            tape.mul(ids[0], ids[0])
        };
        let point = vec![Tensor::scalar(1.0)];
        assert!(finite_difference_check(&prog, &point, 0.0).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf_owned(Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.4]).unwrap());
            let g = tape.leaf_owned(Tensor::vector(vec![1.0, 0.5]));
            let n = tape.rms_norm(x, g, 1e-6).unwrap();
            let s = tape.softmax(n).unwrap();
            let y = tape.gelu(s).unwrap();
            let grads = tape.backward(y, &Tensor::matrix(2, 2, vec![1.0; 4]).unwrap(), &[x]).unwrap();
            (tape.value(y).unwrap().data().to_vec(), grads[&x].data().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Tensor::scalar(1e200));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    }
}

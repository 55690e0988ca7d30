//! Dense row-major matrices and the handful of differentiable primitives the
//! model is built from.
//!
//! Every forward primitive here has a matching backward rule written out by
//! hand. [`finite_difference_gradcheck`] is the oracle those rules are tested
//! against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice gives a `0 × 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · otherᵀ`, i.e. `(n×k)·(m×k)ᵀ → n×m`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.cols, other.cols));
        }
        // row-times-matrix form vectorises; terms are added in the same order
        self.matmul(&other.transpose())
    }

    /// `self · other`, i.e. `(n×k)·(k×m) → n×m`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, i.e. `(k×n)ᵀ·(k×m) → n×m`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.data[i * other.cols..(i + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::add_assign",
                self.data.len(),
                other.data.len(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Column sums, length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for b in blocks {
            if b.rows != rows {
                return Err(Error::shape("hconcat", rows, b.rows));
            }
        }
        for i in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(i);
            for b in blocks {
                dst[off..off + b.cols].copy_from_slice(b.row(i));
                off += b.cols;
            }
        }
        Ok(out)
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn select_rows(&self, perm: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(perm.len(), self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// A fully connected layer `y = W·x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Fan-in uniform init: weights in `[-1/√in, 1/√in]`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut p = Self::zeros(in_dim, out_dim);
        for w in p.weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape("LinearParams::new", weight.rows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    /// Single-vector forward pass.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("linear_apply", self.in_dim(), x.len()));
        }
        Ok(self
            .weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect())
    }

    /// Batched forward pass: each row of `x` is one input.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x
            .matmul_t(&self.weight)
            .map_err(|_| Error::shape("linear forward", self.in_dim(), x.cols()))?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Backward pass for [`forward`](Self::forward). Accumulates parameter
    /// gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut LinearParams) -> Result<Matrix> {
        if dy.cols() != self.out_dim() || dy.rows() != x.rows() {
            return Err(Error::shape("linear backward", self.out_dim(), dy.cols()));
        }
        grad.weight.add_assign(&dy.t_matmul(x)?)?;
        for (g, s) in grad.bias.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        dy.matmul(&self.weight)
    }

    /// Single-vector backward: returns `dL/dx` and accumulates `g⊗x`, `g`.
    pub fn backward_vec(&self, x: &[f64], g: &[f64], grad: &mut LinearParams) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim()];
        for (o, &go) in g.iter().enumerate() {
            axpy(go, x, grad.weight.row_mut(o));
            grad.bias[o] += go;
            axpy(go, self.weight.row(o), &mut dx);
        }
        dx
    }

    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.as_slice().iter().chain(&self.bias).copied()
    }

    pub fn flat_values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weight
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Passes `upstream` where the pre-activation is strictly positive.
pub fn relu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

/// Componentwise mean over a nonempty list of equal-length vectors.
///
/// Each component is summed in sorted order, so the result does not depend
/// on the order of `xs` at all (not even in the last bit).
pub fn mean_pool<V: AsRef<[f64]>>(xs: &[V]) -> Result<Vec<f64>> {
    let dim = xs.first().ok_or(Error::EmptyGraph)?.as_ref().len();
    for x in xs {
        if x.as_ref().len() != dim {
            return Err(Error::shape("mean_pool", dim, x.as_ref().len()));
        }
    }
    let n = xs.len() as f64;
    let mut column = Vec::with_capacity(xs.len());
    Ok((0..dim)
        .map(|k| {
            column.clear();
            column.extend(xs.iter().map(|x| x.as_ref()[k]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect())
}

/// Gradient of `mean_pool`: every input receives `upstream / n`.
pub fn mean_pool_backward(n: usize, upstream: &[f64]) -> Vec<Vec<f64>> {
    let share: Vec<f64> = upstream.iter().map(|g| g / n as f64).collect();
    vec![share; n]
}

/// Checks an analytic gradient against central finite differences.
///
/// `loss_fn` maps a flat parameter vector to `(loss, gradient)`. The analytic
/// gradient is taken at `params`; every coordinate is then perturbed by
/// `±eps`. Returns the largest `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-8)` over all coordinates.
pub fn finite_difference_gradcheck<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "gradcheck eps must be > 0, got {eps}"
        )));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradcheck loss"));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("gradcheck", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, _) = loss_fn(&probe)?;
        probe[i] = params[i] - eps;
        let (minus, _) = loss_fn(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("gradcheck loss"));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Gradient buffers for an ordered list of layers plus the number of
/// backward passes accumulated into them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub buffers: Vec<LinearParams>,
    pub count: usize,
}

impl GradStore {
    pub fn zeros_like<'a>(layers: impl IntoIterator<Item = &'a LinearParams>) -> Self {
        Self {
            buffers: layers.into_iter().map(LinearParams::zeros_like).collect(),
            count: 0,
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.flat_values_mut().for_each(|v| *v = 0.0);
        }
        self.count = 0;
    }

    /// Adds one backward pass worth of gradients.
    pub fn accumulate<'a>(
        &mut self,
        grads: impl IntoIterator<Item = &'a LinearParams>,
    ) -> Result<()> {
        let mut n = 0;
        for (buf, g) in self.buffers.iter_mut().zip(grads) {
            if buf.num_params() != g.num_params() {
                return Err(Error::shape(
                    "GradStore::accumulate",
                    buf.num_params(),
                    g.num_params(),
                ));
            }
            for (b, v) in buf.flat_values_mut().zip(g.flat_values()) {
                *b += v;
            }
            n += 1;
        }
        if n != self.buffers.len() {
            return Err(Error::shape("GradStore::accumulate", self.buffers.len(), n));
        }
        self.count += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.buffers.iter().all(LinearParams::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_weight_returns_input() {
        let p = LinearParams::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(p.apply(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_input_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LinearParams::init(2, 2, &mut rng);
        p.bias = vec![3.0, 4.0];
        assert_eq!(p.apply(&[0.0, 0.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn apply_rejects_wrong_length() {
        let p = LinearParams::zeros(3, 2);
        assert!(matches!(p.apply(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LinearParams::init(8, 8, &mut rng);
        let x = rand_vec(&mut rng, 8);
        let target = rand_vec(&mut rng, 8);
        // L = 0.5·‖W·x + b − t‖²
        let loss = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut q = p.clone();
            q.flat_values_mut().zip(flat).for_each(|(d, s)| *d = *s);
            let y = q.apply(&x)?;
            let r: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
            let mut g = q.zeros_like();
            q.backward_vec(&x, &r, &mut g);
            Ok((0.5 * dot(&r, &r), g.flat_values().collect()))
        };
        let flat: Vec<f64> = p.flat_values().collect();
        let err = finite_difference_gradcheck(loss, &flat, 1e-4).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn batched_backward_agrees_with_vector_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LinearParams::init(4, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 4)).collect();
        let ups: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 3)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let dy = Matrix::from_rows(&ups).unwrap();
        let mut g_batch = p.zeros_like();
        let dx = p.backward(&x, &dy, &mut g_batch).unwrap();
        let mut g_vec = p.zeros_like();
        for i in 0..5 {
            let dxi = p.backward_vec(&rows[i], &ups[i], &mut g_vec);
            for (a, b) in dxi.iter().zip(dx.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in g_batch.flat_values().zip(g_vec.flat_values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_forward_and_gradient() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-1.0, -5.0]), vec![0.0, 0.0]);
        assert_eq!(relu_backward(&[-1.0, 3.0], &[1.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(relu_backward(&[0.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn mean_pool_cases() {
        assert_eq!(mean_pool(&[vec![1.0, 3.0]]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(
            mean_pool(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        let v = vec![0.25, -1.5, 7.0];
        assert_eq!(mean_pool(&vec![v.clone(); 5]).unwrap(), v);
        assert!(matches!(mean_pool::<Vec<f64>>(&[]), Err(Error::EmptyGraph)));
        assert_eq!(mean_pool_backward(4, &[2.0])[3], vec![0.5]);
    }

    #[test]
    fn gradcheck_scalar_quadratic() {
        let err =
            finite_difference_gradcheck(|w| Ok((0.5 * w[0] * w[0], vec![w[0]])), &[3.0], 1e-4)
                .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn gradcheck_constant_loss_is_exact() {
        let err =
            finite_difference_gradcheck(|w| Ok((2.5, vec![0.0; w.len()])), &[1.0, -2.0, 0.5], 1e-4)
                .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_rejects_non_finite_loss() {
        let r = finite_difference_gradcheck(|_| Ok((f64::NAN, vec![0.0])), &[1.0], 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_store_accumulates_and_zeroes() {
        let layers = vec![LinearParams::zeros(2, 3), LinearParams::zeros(3, 1)];
        let mut store = GradStore::zeros_like(&layers);
        let mut g = layers.clone();
        g[0].bias[1] = 2.0;
        store.accumulate(&g).unwrap();
        store.accumulate(&g).unwrap();
        assert_eq!(store.count, 2);
        assert_eq!(store.buffers[0].bias[1], 4.0);
        store.zero();
        assert_eq!(store.count, 0);
        assert_eq!(store.buffers[0].bias[1], 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn linear_without_bias_is_linear(
                seed in 0u64..1000,
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = LinearParams::init(6, 4, &mut rng);
                let x = rand_vec(&mut rng, 6);
                let y = rand_vec(&mut rng, 6);
                let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
                let lhs = p.apply(&mix).unwrap();
                let fx = p.apply(&x).unwrap();
                let fy = p.apply(&y).unwrap();
                for i in 0..4 {
                    prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-6);
                }
            }

            #[test]
            fn mean_pool_is_permutation_invariant(seed in 0u64..1000, n in 1usize..9) {
                use rand::seq::SliceRandom;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let xs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, 3)).collect();
                let mut ys = xs.clone();
                ys.shuffle(&mut rng);
                prop_assert_eq!(mean_pool(&xs).unwrap(), mean_pool(&ys).unwrap());
            }
        }
    }
}

//! Dense matrix primitives, stable elementwise transforms, and deterministic
//! random sampling used by every other module.
//!
//! Everything is `f64`, row-major, and value-in/value-out. `RngStream` is a
//! splittable counter-based generator (ChaCha8 keyed by `(seed, stream_id)`),
//! so any logical task can derive its own stream and parallel sampling stays
//! reproducible regardless of worker count.

use crate::error::{Error, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of 64-bit floats. All entries are finite on
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                context: "Matrix::new".into(),
                left: format!("{rows}x{cols}"),
                right: "nonzero dimensions".into(),
            });
        }
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::new".into(),
                left: format!("{} values", values.len()),
                right: format!("{rows}x{cols}"),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::new".into(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::ShapeMismatch {
                context: "Matrix::from_rows".into(),
                left: "ragged rows".into(),
                right: format!("uniform width {c}"),
            });
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, context: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                left: self.shape_string(),
                right: other.shape_string(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean of each column as a length-`cols` vector.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.values[i * self.cols + j];
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            context: "matmul".into(),
            left: a.shape_string(),
            right: b.shape_string(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.values[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.values[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.values[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite {
            context: "matmul".into(),
        });
    }
    Ok(out)
}

/// Largest singular value by power iteration on `W^T W`.
///
/// Deterministic: the start vector comes from a fixed internal stream.
/// Converges when the estimate's relative change drops below `tol`.
pub fn spectral_norm(w: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    if tol <= 0.0 {
        return Err(Error::Config(format!("spectral_norm tol must be > 0, got {tol}")));
    }
    let mut stream = RngStream::new(0x5350_4543, 0);
    let mut v: Vec<f64> = stream.gaussian_vec(w.cols());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut sigma_prev = 0.0;
    let mut gap = f64::INFINITY;
    for _ in 0..max_iters {
        // u = W v, sigma = ||u||
        let mut u = vec![0.0; w.rows()];
        for i in 0..w.rows() {
            let row = w.row(i);
            u[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma == 0.0 {
            return Ok(0.0);
        }
        gap = (sigma - sigma_prev).abs();
        if gap <= tol * sigma {
            return Ok(sigma);
        }
        sigma_prev = sigma;
        // v = W^T u, renormalized
        let mut wt_u = vec![0.0; w.cols()];
        for i in 0..w.rows() {
            let row = w.row(i);
            for j in 0..w.cols() {
                wt_u[j] += row[j] * u[i];
            }
        }
        let n = wt_u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(sigma);
        }
        wt_u.iter_mut().for_each(|x| *x /= n);
        v = wt_u;
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        gap,
    })
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise layer normalization: `(row - mean) / sqrt(var + eps)` with the
/// population variance and no affine parameters.
pub fn layer_norm_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let (mean, inv_std) = ln_row_stats(row, eps);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
    }
    out
}

/// Layer normalization with a per-feature scale and shift applied after the
/// bare normalization.
pub fn layer_norm_rows_affine(m: &Matrix, eps: f64, scale: &[f64], shift: &[f64]) -> Result<Matrix> {
    if scale.len() != m.cols() || shift.len() != m.cols() {
        return Err(Error::ShapeMismatch {
            context: "layer_norm_rows_affine".into(),
            left: format!("scale {} / shift {}", scale.len(), shift.len()),
            right: format!("{} columns", m.cols()),
        });
    }
    let mut out = layer_norm_rows(m, eps);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * scale[j] + shift[j];
        }
    }
    Ok(out)
}

/// `(mean, 1/sqrt(var + eps))` of a slice, population variance.
pub(crate) fn ln_row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Uniform draw from the Frobenius ball of radius `epsilon` around `center`:
/// Gaussian direction, radius `epsilon * u^(1/(rows*cols))`.
pub fn sample_in_frobenius_ball(center: &Matrix, epsilon: f64, rng: &mut RngStream) -> Matrix {
    if epsilon == 0.0 {
        return center.clone();
    }
    let n = center.rows() * center.cols();
    let mut dir = rng.gaussian_vec(n);
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return center.clone();
    }
    let r = epsilon * rng.uniform().powf(1.0 / n as f64);
    let s = r / norm;
    dir.iter_mut().for_each(|x| *x *= s);
    let mut out = center.clone();
    for (o, d) in out.values_mut().iter_mut().zip(&dir) {
        *o += d;
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic splittable random stream. Identical `(seed, stream_id)`
/// yields identical draw sequences across runs and platforms.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_gaussian: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
            spare_gaussian: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent child stream; same seed, mixed stream id.
    pub fn substream(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1)));
        RngStream::new(self.seed, id)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, n).
    pub fn uniform_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.gaussian()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_index(i + 1);
            items.swap(i, j);
        }
    }
}

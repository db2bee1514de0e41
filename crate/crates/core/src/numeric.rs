//! Dense f64 tensor kernels and counter-based seeded randomness.
//!
//! Every kernel is a pure function over immutable inputs with a fixed
//! accumulation order, so results are bit-stable across runs and across
//! thread counts. Randomness is keyed: a (seed, label, counter) triple fully
//! determines a stream, which lets parallel sweeps draw independent noise
//! without any shared mutable state.

use serde::{Deserialize, Serialize};

// ─── Tensors ─────────────────────────────────────────────────────────────────

/// Row-major dense matrix. Shape is immutable after creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "flat data length mismatch");
        Tensor2 { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise population standard deviation over the whole tensor.
    pub fn element_std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt()
    }
}

/// Row-major dense 3-tensor, indexed as (d0, d1, d2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    d0: usize,
    d1: usize,
    d2: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 { d0, d1, d2, data: vec![0.0; d0 * d1 * d2] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d1 + j) * self.d2 + k] = v;
    }

    /// Contiguous innermost slice at (i, j).
    pub fn lane(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.d1 + j) * self.d2;
        &self.data[base..base + self.d2]
    }

    pub fn lane_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let base = (i * self.d1 + j) * self.d2;
        &mut self.data[base..base + self.d2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

// ─── Kernels ─────────────────────────────────────────────────────────────────

/// Matrix product with a fixed accumulation order (ascending inner index per
/// output element), so results match a naive triple loop bit for bit.
///
/// Panics on inner-dimension mismatch; that is a caller contract violation.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    assert_eq!(
        a.cols, b.rows,
        "matmul contract violation: inner dimensions {} vs {}",
        a.cols, b.rows
    );
    let mut out = Tensor2::zeros(a.rows, b.cols);
    // i-k-j ordering: cache friendly, same per-element accumulation order as i-j-k.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// `y += x · m` for a single row vector x (len = m.rows), accumulating into y (len = m.cols).
pub fn vec_matmul_acc(x: &[f64], m: &Tensor2, y: &mut [f64]) {
    assert_eq!(x.len(), m.rows, "vec_matmul contract violation");
    assert_eq!(y.len(), m.cols, "vec_matmul output length");
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let mrow = &m.data[k * m.cols..(k + 1) * m.cols];
        for j in 0..m.cols {
            y[j] += xk * mrow[j];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax with max subtraction; each output row is nonnegative and
/// sums to 1 within 1e-12 for any finite input.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
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

/// RMS normalization: out_i = gain_i · x_i / sqrt(mean(x²) + eps).
pub fn rms_normalize(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(x.len(), gain.len(), "rms_normalize contract violation");
    let inv = rms_inv(x, eps);
    x.iter().zip(gain).map(|(&xi, &gi)| gi * xi * inv).collect()
}

/// 1 / sqrt(mean(x²) + eps), shared by forward and backward passes.
pub fn rms_inv(x: &[f64], eps: f64) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

// ─── Seeded randomness ───────────────────────────────────────────────────────

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A fully value-determined random stream identifier.
///
/// Identical (seed, label, counter) triples yield identical draws no matter
/// where or when they are evaluated, which is what makes parallel experiment
/// sweeps reproducible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedKey {
    pub seed: u64,
    pub label: String,
    pub counter: u64,
}

impl SeedKey {
    pub fn new(seed: u64, label: &str) -> Self {
        SeedKey { seed, label: label.to_string(), counter: 0 }
    }

    /// Same stream, different counter.
    pub fn at(&self, counter: u64) -> Self {
        SeedKey { seed: self.seed, label: self.label.clone(), counter }
    }

    /// Sub-stream: the current counter folds into the label so distinct
    /// parents stay distinct, and the counter resets to 0.
    pub fn derived(&self, sub: &str) -> Self {
        SeedKey {
            seed: self.seed,
            label: format!("{}#{}/{}", self.label, self.counter, sub),
            counter: 0,
        }
    }

    fn state(&self) -> u64 {
        let mut s = mix64(self.seed ^ GOLDEN);
        s = mix64(s ^ fnv1a(self.label.as_bytes()));
        s = mix64(s ^ self.counter.wrapping_mul(GOLDEN));
        s
    }

    pub fn rng(&self) -> Rng {
        Rng { state: self.state() }
    }
}

/// SplitMix64 stream seeded from a [`SeedKey`].
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 64-bit multiply-shift; bias is negligible at desk-scale n.
        ((self.next_u64() >> 11) as u128 * n as u128 >> 53) as usize
    }
}

/// n standard-normal draws, reproducible per the SeedKey contract.
pub fn gaussian_draw(key: &SeedKey, n: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..n).map(|_| rng.gaussian()).collect()
}

/// n uniform draws in [0, 1).
pub fn uniform_draw(key: &SeedKey, n: usize) -> Vec<f64> {
    let mut rng = key.rng();
    (0..n).map(|_| rng.uniform()).collect()
}

/// Uniformly random permutation of 0..n (Fisher–Yates).
pub fn permutation(key: &SeedKey, n: usize) -> Vec<usize> {
    let mut rng = key.rng();
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        p.swap(i, j);
    }
    p
}

// ─── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(key: &SeedKey, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_flat(rows, cols, gaussian_draw(key, rows * cols))
    }

    /// Independent oracle: naive i-j-k triple loop.
    fn matmul_naive(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let m = random_tensor(&SeedKey::new(1, "matmul-id"), 3, 3);
        assert_eq!(matmul(&Tensor2::identity(3), &m), m);
        assert_eq!(matmul(&m, &Tensor2::identity(3)), m);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor2::from_flat(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor2::from_flat(2, 1, vec![0.0, 1.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle_to_zero_ulp() {
        let key = SeedKey::new(7, "matmul-oracle");
        let a = random_tensor(&key.at(0), 8, 8);
        let b = random_tensor(&key.at(1), 8, 8);
        let fast = matmul(&a, &b);
        let naive = matmul_naive(&a, &b);
        // Bitwise: the fixed accumulation order is part of the contract.
        for (x, y) in fast.data().iter().zip(naive.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "matmul contract violation")]
    fn matmul_shape_mismatch_panics() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(2, 2);
        let _ = matmul(&a, &b);
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor2::from_flat(1, 3, vec![0.0, 0.0, 0.0]);
        let s = softmax_rows(&x);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturation() {
        let x = Tensor2::from_flat(1, 2, vec![1000.0, 0.0]);
        let s = softmax_rows(&x);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor2::from_flat(1, 3, vec![1.0, 2.0, 3.0]);
        let s = softmax_rows(&x);
        // Direct exp/sum oracle, no max subtraction.
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for j in 0..3 {
            assert!((s.get(0, j) - ((j + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_unit_and_zero_cases() {
        let ones = vec![1.0; 8];
        let out = rms_normalize(&ones, &ones, 0.0);
        for &v in &out {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let zeros = vec![0.0; 8];
        let out = rms_normalize(&zeros, &ones, 1e-6);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_matches_formula_oracle() {
        let key = SeedKey::new(3, "rms");
        let x = gaussian_draw(&key.at(0), 16);
        let g = gaussian_draw(&key.at(1), 16);
        let eps = 1e-5;
        let out = rms_normalize(&x, &g, eps);
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / 16.0;
        for i in 0..16 {
            let want = g[i] * x[i] / (ms + eps).sqrt();
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_same_key_is_bitwise_identical() {
        let key = SeedKey::new(42, "det").at(9);
        let a = gaussian_draw(&key, 257);
        let b = gaussian_draw(&key, 257);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gaussian_moments() {
        let draws = gaussian_draw(&SeedKey::new(5, "moments"), 100_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn distinct_labels_decorrelated() {
        let a = gaussian_draw(&SeedKey::new(11, "stream-a"), 10_000);
        let b = gaussian_draw(&SeedKey::new(11, "stream-b"), 10_000);
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..a.len() {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma) * (a[i] - ma);
            vb += (b[i] - mb) * (b[i] - mb);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn permutation_is_a_permutation() {
        let p = permutation(&SeedKey::new(2, "perm"), 9);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn derived_keys_keep_counter_distinctions() {
        let base = SeedKey::new(3, "base");
        let a = base.at(0).derived("sub");
        let b = base.at(1).derived("sub");
        assert_ne!(gaussian_draw(&a, 4), gaussian_draw(&b, 4));
    }
}

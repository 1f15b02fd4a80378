//! Deterministic dense kernels.
//!
//! Every reduction runs in ascending index order in the tensor's dtype, so
//! repeated calls are bit-identical and results do not depend on threading.

use crate::error::{Error, Result};
use crate::tensor::{with_dtype, Scalar, Tensor};

/// `sqrt(2/pi)`, the inner scale of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    a.same_dtype(b, what)?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `c[i,j] = sum_k a[i,k] * b[k,j]`, accumulated over ascending `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_dtype(b, "matmul")?;
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions {k} and {k2} disagree"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let out = with_dtype!(a.dtype(), T => {
        let mut c = vec![T::ZERO; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = T::from_f64(ad[i * k + p]);
                let brow = &bd[p * n..(p + 1) * n];
                for (cj, &bv) in crow.iter_mut().zip(brow) {
                    *cj += aip * T::from_f64(bv);
                }
            }
        }
        c.into_iter().map(T::to_f64).collect()
    });
    Ok(Tensor::from_raw(vec![m, n], out, a.dtype()))
}

/// `a · bᵀ` for `a: [M×K]`, `b: [N×K]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_dtype(b, "matmul_nt")?;
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt: inner dimensions {k} and {k2} disagree"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let out = with_dtype!(a.dtype(), T => {
        let mut c = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += T::from_f64(x) * T::from_f64(y);
                }
                c.push(acc.to_f64());
            }
        }
        c
    });
    Ok(Tensor::from_raw(vec![m, n], out, a.dtype()))
}

/// `aᵀ · b` for `a: [K×M]`, `b: [K×N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_dtype(b, "matmul_tn")?;
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn: inner dimensions {k} and {k2} disagree"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let out = with_dtype!(a.dtype(), T => {
        let mut c = vec![T::ZERO; m * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            for i in 0..m {
                let api = T::from_f64(ad[p * m + i]);
                let crow = &mut c[i * n..(i + 1) * n];
                for (cj, &bv) in crow.iter_mut().zip(brow) {
                    *cj += api * T::from_f64(bv);
                }
            }
        }
        c.into_iter().map(T::to_f64).collect()
    });
    Ok(Tensor::from_raw(vec![m, n], out, a.dtype()))
}

/// Row-wise `exp(x - rowmax) / sum`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let xd = x.data();
    let out = with_dtype!(x.dtype(), T => {
        let mut out = Vec::with_capacity(m * n);
        let mut buf = vec![T::ZERO; n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mut mx = T::from_f64(row[0]);
            for &v in &row[1..] {
                let v = T::from_f64(v);
                if v > mx {
                    mx = v;
                }
            }
            let mut total = T::ZERO;
            for (b, &v) in buf.iter_mut().zip(row) {
                *b = (T::from_f64(v) - mx).exp();
                total += *b;
            }
            out.extend(buf.iter().map(|&b| (b / total).to_f64()));
        }
        out
    });
    Ok(Tensor::from_raw(vec![m, n], out, x.dtype()))
}

/// Per-row statistics saved by [`layer_norm_with_stats`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// `1 / sqrt(var + eps)`.
    pub rstd: Vec<f64>,
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer normalization that also returns the per-row mean and inverse std.
pub fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    x.same_dtype(gamma, "layer_norm")?;
    x.same_dtype(beta, "layer_norm")?;
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("layer_norm on a 0-d tensor".into()))?;
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Dimension(format!(
            "layer_norm: gamma/beta must have {d} entries"
        )));
    }
    let rows = x.numel() / d.max(1);
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let (out, mean, rstd) = with_dtype!(x.dtype(), T => {
        let inv_d = T::ONE / T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut out = Vec::with_capacity(xd.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut s = T::ZERO;
            for &v in row {
                s += T::from_f64(v);
            }
            let mu = s * inv_d;
            let mut ss = T::ZERO;
            for &v in row {
                let c = T::from_f64(v) - mu;
                ss += c * c;
            }
            let rs = T::ONE / (ss * inv_d + eps).sqrt();
            for j in 0..d {
                let xhat = (T::from_f64(row[j]) - mu) * rs;
                out.push((xhat * T::from_f64(gd[j]) + T::from_f64(bd[j])).to_f64());
            }
            means.push(mu.to_f64());
            rstds.push(rs.to_f64());
        }
        (out, means, rstds)
    });
    Ok((
        Tensor::from_raw(x.shape().to_vec(), out, x.dtype()),
        NormStats { mean, rstd },
    ))
}

/// Tanh-approximation GELU:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let out = with_dtype!(x.dtype(), T => {
        let c = T::from_f64(GELU_SQRT_2_OVER_PI);
        let a = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        x.data()
            .iter()
            .map(|&v| {
                let v = T::from_f64(v);
                (half * v * (T::ONE + (c * (v + a * v * v * v)).tanh())).to_f64()
            })
            .collect()
    });
    Tensor::from_raw(x.shape().to_vec(), out, x.dtype())
}

/// Derivative of [`gelu`] evaluated at `x`.
pub fn gelu_grad(x: &Tensor) -> Tensor {
    let out = with_dtype!(x.dtype(), T => {
        let c = T::from_f64(GELU_SQRT_2_OVER_PI);
        let a = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        x.data()
            .iter()
            .map(|&v| {
                let v = T::from_f64(v);
                let th = (c * (v + a * v * v * v)).tanh();
                let du = c * (T::ONE + three * a * v * v);
                (half * (T::ONE + th) + half * v * (T::ONE - th * th) * du).to_f64()
            })
            .collect()
    });
    Tensor::from_raw(x.shape().to_vec(), out, x.dtype())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: fn(f64, f64, bool) -> f64) -> Result<Tensor> {
    check_same_shape(a, b, what)?;
    let is_f32 = a.dtype() == crate::tensor::DType::F32;
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y, is_f32))
        .collect();
    Ok(Tensor::from_raw(a.shape().to_vec(), out, a.dtype()))
}

#[inline]
fn add_in(x: f64, y: f64, f32_mode: bool) -> f64 {
    if f32_mode {
        (x as f32 + y as f32) as f64
    } else {
        x + y
    }
}

#[inline]
fn sub_in(x: f64, y: f64, f32_mode: bool) -> f64 {
    if f32_mode {
        (x as f32 - y as f32) as f64
    } else {
        x - y
    }
}

#[inline]
fn mul_in(x: f64, y: f64, f32_mode: bool) -> f64 {
    if f32_mode {
        (x as f32 * y as f32) as f64
    } else {
        x * y
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", add_in)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", sub_in)
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", mul_in)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let is_f32 = x.dtype() == crate::tensor::DType::F32;
    let c = x.dtype().round(c);
    let out = x.data().iter().map(|&v| mul_in(v, c, is_f32)).collect();
    Tensor::from_raw(x.shape().to_vec(), out, x.dtype())
}

/// Adds `sign * row` to every row of the matrix `x`.
pub fn add_row(x: &Tensor, row: &Tensor, sign: f64) -> Result<Tensor> {
    x.same_dtype(row, "add_row")?;
    let (m, n) = x.dims2()?;
    if row.numel() != n {
        return Err(Error::Dimension(format!(
            "add_row: row has {} entries, matrix has {n} columns",
            row.numel()
        )));
    }
    let is_f32 = x.dtype() == crate::tensor::DType::F32;
    let rd = row.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for (j, &v) in x.row(i).iter().enumerate() {
            out.push(if sign >= 0.0 {
                add_in(v, rd[j], is_f32)
            } else {
                sub_in(v, rd[j], is_f32)
            });
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out, x.dtype()))
}

/// Column sums of a matrix, accumulated over ascending rows.
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let xd = x.data();
    let out = with_dtype!(x.dtype(), T => {
        let mut acc = vec![T::ZERO; n];
        for i in 0..m {
            for (a, &v) in acc.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *a += T::from_f64(v);
            }
        }
        acc.into_iter().map(T::to_f64).collect()
    });
    Ok(Tensor::from_raw(vec![n], out, x.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(shape, data, DType::F64).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_tensor(vec![3, 5], &mut rng);
        let eye = Tensor::from_fn(vec![3, 3], DType::F64, |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn times_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(vec![4, 3], &mut rng);
        let z = Tensor::zeros(vec![3, 2], DType::F64);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_is_bit_exact_against_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_tensor(vec![3, 3], &mut rng);
            let b = rand_tensor(vec![3, 3], &mut rng);
            assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
        }
    }

    #[test]
    fn transposed_variants_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(vec![4, 3], &mut rng);
        let b = rand_tensor(vec![5, 3], &mut rng);
        let bt = Tensor::from_fn(vec![3, 5], DType::F64, |i| b.at2(i % 5, i / 5));
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = Tensor::from_fn(vec![3, 4], DType::F64, |i| a.at2(i % 4, i / 4));
        let c = rand_tensor(vec![4, 2], &mut rng);
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&at, &c).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3], DType::F64);
        let b = Tensor::zeros(vec![2, 3], DType::F64);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
        let c = Tensor::zeros(vec![3, 3], DType::F32);
        assert!(matches!(matmul(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::full(vec![1, 3], 4.2, DType::F64);
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturates() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 100.0], DType::F64).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!(s.data()[0] < 1e-40);
        assert!((s.data()[1] - 1.0).abs() < 1e-15);
        assert!((s.data()[0] + s.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_two_pass_oracle() {
        // Oracle: two-pass with compensated (Kahan) summation of the
        // exponentials, independent of the kernel's accumulation.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![2, 4], &mut rng);
        let s = softmax_rows(&x).unwrap();
        for i in 0..2 {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
            for &v in row {
                let y = (v - mx).exp() - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            let mut row_sum = 0.0;
            for j in 0..4 {
                let expect = (row[j] - mx).exp() / sum;
                assert!((s.at2(i, j) - expect).abs() < 1e-12);
                row_sum += s.at2(i, j);
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_f32_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(vec![5, 7], &mut rng).to_dtype(DType::F32);
        let s = softmax_rows(&x).unwrap();
        for i in 0..5 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let x = Tensor::full(vec![1, 6], 3.5, DType::F64);
        let g = Tensor::full(vec![6], 1.0, DType::F64);
        let b = Tensor::zeros(vec![6], DType::F64);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_fixed_point() {
        // Already zero-mean, unit (biased) variance.
        let x = Tensor::new(vec![1, 4], vec![1.0, -1.0, 1.0, -1.0], DType::F64).unwrap();
        let g = Tensor::full(vec![4], 1.0, DType::F64);
        let b = Tensor::zeros(vec![4], DType::F64);
        let y = layer_norm(&x, &g, &b, 1e-15).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(vec![1, 8], &mut rng);
        let g = rand_tensor(vec![8], &mut rng);
        let b = rand_tensor(vec![8], &mut rng);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let row = x.data();
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let mut mean_std = 0.0;
        for j in 0..8 {
            let std = (row[j] - mean) / (var + 1e-5).sqrt();
            mean_std += std / 8.0;
            let expect = std * g.data()[j] + b.data()[j];
            assert!((y.data()[j] - expect).abs() < 1e-12);
        }
        assert!(mean_std.abs() < 1e-10);
        let unit = layer_norm(
            &x,
            &Tensor::full(vec![8], 1.0, DType::F64),
            &Tensor::zeros(vec![8], DType::F64),
            1e-5,
        )
        .unwrap();
        assert!((unit.sum() / 8.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(vec![1, 2], DType::F64);
        let g = Tensor::zeros(vec![2], DType::F64);
        assert!(matches!(layer_norm(&x, &g, &g, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::new(vec![3], vec![0.0, 10.0, 1.0], DType::F64).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)) evaluated at 30 digits.
        assert!((y.data()[2] - 0.841_191_990_608_276_7).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let xs = [-3.0, -0.7, 0.0, 0.4, 2.5];
        for &x0 in &xs {
            let h = 1e-6;
            let f = |v: f64| gelu(&Tensor::new(vec![1], vec![v], DType::F64).unwrap()).data()[0];
            let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
            let g = gelu_grad(&Tensor::new(vec![1], vec![x0], DType::F64).unwrap()).data()[0];
            assert!((fd - g).abs() < 1e-8, "x={x0}: {fd} vs {g}");
        }
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(vec![6, 5], &mut rng);
        let b = rand_tensor(vec![5, 4], &mut rng);
        let r1 = softmax_rows(&matmul(&a, &b).unwrap()).unwrap();
        let r2 = softmax_rows(&matmul(&a, &b).unwrap()).unwrap();
        assert_eq!(
            r1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            r2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

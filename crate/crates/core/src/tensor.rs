//! Dense row-major `f32` tensors and the handful of kernels the engine needs.
//!
//! Storage is `f32`; every reduction (matmul inner products, norms, softmax
//! partition sums, Gram distances) accumulates in `f64`.

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("rank {} not in 1..=4", shape.len()));
        }
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        if shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("rank {} not in 1..=4", shape.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 2-D index.
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// `a[m,k] x b[k,n]` with `f64` accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err("matmul needs rank-2 operands");
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} != {k2}"));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, m, k, &b.data, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Raw row-major kernel: `out[m,n] = a[m,k] * b[k,n]`.
pub(crate) fn matmul_into(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for r in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[r * k..(r + 1) * k];
        for (t, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[t * n..(t + 1) * n];
            for (acc_v, &bv) in acc.iter_mut().zip(brow) {
                *acc_v += av * bv as f64;
            }
        }
        for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
}

/// Row-wise softmax of `logits / temperature`, max-subtracted.
pub fn softmax_temp(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.rank() != 2 {
        return shape_err("softmax_temp expects [B, C]");
    }
    let c = logits.shape[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data.chunks(c) {
        out.extend(
            softmax_row_f64(row, temperature)
                .into_iter()
                .map(|p| p as f32),
        );
    }
    Tensor::new(logits.shape.clone(), out)
}

pub(crate) fn softmax_row_f64(row: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_softmax_row_f64(row: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    scaled.into_iter().map(|v| v - lse).collect()
}

pub const DEFAULT_LN_EPS: f32 = 1e-5;

/// Normalizes every length-`D` vector along the last axis, then applies the affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return shape_err(format!(
            "layer_norm: gamma/beta length {}/{} != {d}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let mut out = vec![0.0f32; x.numel()];
    layer_norm_rows(&x.data, d, &gamma.data, &beta.data, eps, &mut out);
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn layer_norm_rows(
    x: &[f32],
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
) {
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (j, o) in orow.iter_mut().enumerate() {
            *o = ((row[j] as f64 - mean) * inv * gamma[j] as f64 + beta[j] as f64) as f32;
        }
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}

/// Relational map `X Xᵀ` of the `[B*T, D]` flattening (batch-major, then token).
pub fn gram(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 {
        return shape_err("gram expects [B, T, D]");
    }
    let d = f.shape[2];
    let rows = f.shape[0] * f.shape[1];
    let mut out = vec![0.0f32; rows * rows];
    for i in 0..rows {
        let xi = &f.data[i * d..(i + 1) * d];
        for j in i..rows {
            let xj = &f.data[j * d..(j + 1) * d];
            let v = dot_f64(xi, xj) as f32;
            out[i * rows + j] = v;
            out[j * rows + i] = v;
        }
    }
    Tensor::new(vec![rows, rows], out)
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Which route `gram_diff_sq` takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GramPath {
    /// `D x D` identity; never builds the `BT x BT` relational maps.
    #[default]
    Identity,
    /// Materializes both relational maps. Oracle/debug use only.
    Direct,
}

/// `‖ψ(Fp)ψ(Fp)ᵀ − ψ(F)ψ(F)ᵀ‖²_F`, clamped at zero.
pub fn gram_diff_sq(fp: &Tensor, f: &Tensor) -> Result<f64> {
    gram_diff_sq_with(fp, f, GramPath::Identity)
}

pub fn gram_diff_sq_with(fp: &Tensor, f: &Tensor, path: GramPath) -> Result<f64> {
    if fp.shape != f.shape {
        return shape_err(format!("gram_diff_sq: {:?} vs {:?}", fp.shape, f.shape));
    }
    let d = f.last_dim();
    let rows = f.numel() / d;
    Ok(match path {
        GramPath::Identity => gram_diff_sq_rows(&fp.data, &f.data, rows, d),
        GramPath::Direct => gram_diff_sq_direct_rows(&fp.data, &f.data, rows, d),
    })
}

/// Gram distance between two `[rows, d]` matrices via `d x d` products.
///
/// With `S = X + Y` and `E = X − Y`:
/// `‖XXᵀ − YYᵀ‖² = ½(⟨SᵀS, EᵀE⟩ + tr((EᵀS)²))`, which is the expanded
/// `tr((XᵀX)²) − 2tr(XᵀY YᵀX) + tr((YᵀY)²)` without the cancellation
/// between its three large terms.
pub(crate) fn gram_diff_sq_rows(x: &[f32], y: &[f32], rows: usize, d: usize) -> f64 {
    let mut ss = vec![0.0f64; d * d];
    let mut ee = vec![0.0f64; d * d];
    let mut es = vec![0.0f64; d * d];
    let mut s = vec![0.0f64; d];
    let mut e = vec![0.0f64; d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let yr = &y[r * d..(r + 1) * d];
        let mut any = false;
        for j in 0..d {
            s[j] = xr[j] as f64 + yr[j] as f64;
            e[j] = xr[j] as f64 - yr[j] as f64;
            any |= e[j] != 0.0;
        }
        for a in 0..d {
            let (sa, ea) = (s[a], e[a]);
            let ss_row = &mut ss[a * d..(a + 1) * d];
            for b in 0..d {
                ss_row[b] += sa * s[b];
            }
            if any {
                let ee_row = &mut ee[a * d..(a + 1) * d];
                let es_row = &mut es[a * d..(a + 1) * d];
                for b in 0..d {
                    ee_row[b] += ea * e[b];
                    es_row[b] += ea * s[b];
                }
            }
        }
    }
    let mut inner = 0.0f64;
    let mut trace_sq = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            inner += ss[a * d + b] * ee[a * d + b];
            trace_sq += es[a * d + b] * es[b * d + a];
        }
    }
    (0.5 * (inner + trace_sq)).max(0.0)
}

pub(crate) fn gram_diff_sq_direct_rows(x: &[f32], y: &[f32], rows: usize, d: usize) -> f64 {
    let mut total = 0.0f64;
    for i in 0..rows {
        for j in 0..rows {
            let gx = dot_f64(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            let gy = dot_f64(&y[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
            total += (gx - gy) * (gx - gy);
        }
    }
    total.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let p = t(&[2, 2], &[1., 0., 0., 0.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for r in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += a.at2(r, k) as f64 * b.at2(k, j) as f64;
                }
                assert!((c.at2(r, j) as f64 - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_analytic_cases() {
        let z = Tensor::zeros(&[1, 4]);
        for temp in [0.5, 1.0, 4.0] {
            let p = softmax_temp(&z, temp).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
        let l = t(&[1, 3], &[1f32.ln(), 2f32.ln(), 4f32.ln()]);
        let p = softmax_temp(&l, 1.0).unwrap();
        for (got, want) in p.data().iter().zip([1. / 7., 2. / 7., 4. / 7.]) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        assert!(matches!(softmax_temp(&l, 0.0), Err(Error::Param(_))));
        assert!(matches!(softmax_temp(&l, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn softmax_matches_f64_reference_at_t4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = random(&[1, 9], &mut rng);
        let p = softmax_temp(&l, 4.0).unwrap();
        let ex: Vec<f64> = l.data().iter().map(|&v| (v as f64 / 4.0).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (got, e) in p.data().iter().zip(&ex) {
            assert!((*got as f64 - e / z).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = t(&[1, 4], &[3.0; 4]);
        let ones = t(&[4], &[1.0; 4]);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &ones, &zeros, DEFAULT_LN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = t(&[4], &[0.5, -1.0, 2.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xr = random(&[2, 4], &mut rng);
        let y = layer_norm(&xr, &zeros, &beta, DEFAULT_LN_EPS).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, beta.data());
        }

        let xr = random(&[1, 64], &mut rng);
        let y = layer_norm(
            &xr,
            &Tensor::from_fn(&[64], |_| 1.0),
            &Tensor::zeros(&[64]),
            0.0,
        )
        .unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var = y
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / 64.0;
        assert!(mean.abs() <= 1e-5);
        assert!((var - 1.0).abs() <= 1e-5);

        assert!(layer_norm(&xr, &zeros, &beta, DEFAULT_LN_EPS).is_err());
    }

    #[test]
    fn gram_cases() {
        let f = t(&[1, 1, 2], &[3.0, 4.0]);
        assert_eq!(gram(&f).unwrap().data(), &[25.0]);
        let f = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram(&f).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(gram(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn gram_diff_sq_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(&[2, 4, 3], &mut rng);
        assert_eq!(gram_diff_sq(&f, &f).unwrap(), 0.0);

        let v = [0.5f32, -1.5, 2.0];
        let fp = t(&[1, 1, 3], &v);
        let z = Tensor::zeros(&[1, 1, 3]);
        let n2: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((gram_diff_sq(&fp, &z).unwrap() - n2 * n2).abs() < 1e-9);

        let g = random(&[2, 4, 3], &mut rng);
        let a = gram_diff_sq(&g, &f).unwrap();
        let b = gram_diff_sq_with(&g, &f, GramPath::Direct).unwrap();
        assert!((a - b).abs() <= 1e-4 * b.abs());
        assert!(gram_diff_sq(&g, &Tensor::zeros(&[2, 4, 2])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gram_diff_sq_symmetric(seed in any::<u64>(), b in 1usize..3, tt in 1usize..5, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[b, tt, d], &mut rng);
            let y = random(&[b, tt, d], &mut rng);
            prop_assert_eq!(gram_diff_sq(&x, &y).unwrap(), gram_diff_sq(&y, &x).unwrap());
            prop_assert_eq!(gram_diff_sq(&x, &x).unwrap(), 0.0);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(seed in any::<u64>(), shift in -50.0f32..50.0, temp in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Tensor::from_fn(&[3, 6], |_| rng.gen_range(-5.0..5.0));
            let shifted = Tensor::new(vec![3, 6], l.data().iter().map(|v| v + shift).collect()).unwrap();
            let p = softmax_temp(&l, temp).unwrap();
            let q = softmax_temp(&shifted, temp).unwrap();
            for row in p.data().chunks(6) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
            prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-5);
        }

        #[test]
        fn matmul_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 5], &mut rng);
            let c = random(&[5, 2], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-4);
        }
    }
}

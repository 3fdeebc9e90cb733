//! Linear operators and spectral-norm estimation.

pub mod conv;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use conv::ConvGeometry;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor64};

/// Largest side accepted by [`spectral_norm_exact`].
pub const EXACT_MAX_SIDE: usize = 256;
/// Largest side of a materialized convolution matrix.
pub const MATERIALIZE_MAX_SIDE: usize = 4096;

/// A linear map given by its action and the action of its adjoint.
///
/// Implementations are read-only and may be evaluated from several threads.
pub trait LinearOperator: Sync {
    fn in_shape(&self) -> Vec<usize>;
    fn out_shape(&self) -> Vec<usize>;

    /// `y = A x`. Slices are flattened row-major buffers of the two shapes.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// `x = Aᵀ y`.
    fn adjoint(&self, y: &[f64], x: &mut [f64]);

    fn in_len(&self) -> usize {
        self.in_shape().iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    fn apply_tensor(&self, x: &Tensor64) -> Result<Tensor64> {
        if x.shape() != self.in_shape().as_slice() {
            return Err(Error::shape(format!(
                "operator expects {:?}, got {:?}",
                self.in_shape(),
                x.shape()
            )));
        }
        let mut y = Tensor64::zeros(self.out_shape());
        self.apply(x.data(), y.data_mut());
        Ok(y)
    }

    fn adjoint_tensor(&self, y: &Tensor64) -> Result<Tensor64> {
        if y.shape() != self.out_shape().as_slice() {
            return Err(Error::shape(format!(
                "adjoint expects {:?}, got {:?}",
                self.out_shape(),
                y.shape()
            )));
        }
        let mut x = Tensor64::zeros(self.in_shape());
        self.adjoint(y.data(), x.data_mut());
        Ok(x)
    }
}

/// Explicit `rows x cols` matrix acting on vectors of length `cols`.
#[derive(Clone, Debug)]
pub struct MatrixOperator {
    matrix: Tensor64,
}

impl MatrixOperator {
    pub fn new(matrix: Tensor64) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::shape("matrix operator needs a rank-2 tensor"));
        }
        Ok(Self { matrix })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let matrix =
            Tensor64::from_fn(
                vec![n, n],
                |i| if i / n == i % n { values[i / n] } else { 0.0 },
            );
        Self { matrix }
    }

    pub fn matrix(&self) -> &Tensor64 {
        &self.matrix
    }
}

impl LinearOperator for MatrixOperator {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.matrix.shape()[1]]
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.matrix.shape()[0]]
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let cols = self.matrix.shape()[1];
        for (yi, row) in y.iter_mut().zip(self.matrix.data().chunks(cols.max(1))) {
            *yi = dot(row, x);
        }
    }

    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let cols = self.matrix.shape()[1];
        x.fill(0.0);
        for (yi, row) in y.iter().zip(self.matrix.data().chunks(cols.max(1))) {
            for (xj, m) in x.iter_mut().zip(row) {
                *xj += m * yi;
            }
        }
    }
}

/// Bias-free convolution viewed as a linear map on one `(C, H, W)` sample.
#[derive(Clone, Debug)]
pub struct ConvOperator {
    geom: ConvGeometry,
    kernel: Vec<f64>,
}

impl ConvOperator {
    pub fn new(geom: ConvGeometry, kernel: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if kernel.len() != geom.out_ch * geom.patch_len() {
            return Err(Error::shape(format!(
                "kernel has {} entries, geometry needs {}",
                kernel.len(),
                geom.out_ch * geom.patch_len()
            )));
        }
        Ok(Self { geom, kernel })
    }

    /// From a `(out_ch, in_ch, kh, kw)` kernel tensor and an input `(C, H, W)`.
    pub fn from_kernel(
        kernel: &Tensor64,
        in_shape: [usize; 3],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let geom = kernel_geometry(kernel, in_shape, stride, pad)?;
        Self::new(geom, kernel.data().to_vec())
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }
}

impl LinearOperator for ConvOperator {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.geom.in_ch, self.geom.in_h, self.geom.in_w]
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.geom.out_ch, self.geom.out_h(), self.geom.out_w()]
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut cols = vec![0.0; self.geom.patch_len() * self.geom.positions()];
        conv::conv_forward_sample(&self.geom, &self.kernel, None, x, y, &mut cols);
    }

    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let mut cols = vec![0.0; self.geom.patch_len() * self.geom.positions()];
        x.fill(0.0);
        conv::conv_adjoint_sample(&self.geom, &self.kernel, y, x, &mut cols);
    }
}

fn kernel_geometry(
    kernel: &Tensor64,
    in_shape: [usize; 3],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let &[out_ch, in_ch, kh, kw] = kernel.shape() else {
        return Err(Error::shape(format!(
            "kernel must be (out_ch, in_ch, kh, kw), got {:?}",
            kernel.shape()
        )));
    };
    if in_ch != in_shape[0] {
        return Err(Error::shape(format!(
            "kernel expects {in_ch} input channels, input has {}",
            in_shape[0]
        )));
    }
    let geom = ConvGeometry {
        in_ch,
        in_h: in_shape[1],
        in_w: in_shape[2],
        out_ch,
        kh,
        kw,
        stride,
        pad,
    };
    geom.validate()?;
    Ok(geom)
}

/// Singular-vector pair carried between power-iteration calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    /// Unit vector in the operator's input space.
    pub u: Vec<f64>,
    /// Unit vector in the operator's output space.
    pub v: Vec<f64>,
}

impl PowerState {
    pub fn random<R: Rng + ?Sized>(in_len: usize, out_len: usize, rng: &mut R) -> Self {
        Self {
            u: random_unit(in_len, rng),
            v: random_unit(out_len, rng),
        }
    }
}

fn random_unit<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite value during power iteration ({what})"
        )))
    }
}

/// Estimates the largest singular value of `op`.
///
/// Alternates `v = A u / ‖A u‖`, `u = Aᵀ v / ‖Aᵀ v‖` and reports `‖Aᵀ v‖`,
/// which for unit `v` never exceeds σ_max. Stops after `iters` rounds or once
/// the relative change drops below `tol`. A returned state can be passed back
/// to warm-start the next call.
pub fn power_iteration<R: Rng + ?Sized>(
    op: &dyn LinearOperator,
    iters: usize,
    tol: f64,
    state: Option<PowerState>,
    rng: &mut R,
) -> Result<(f64, PowerState)> {
    let (n_in, n_out) = (op.in_len(), op.out_len());
    if n_in == 0 || n_out == 0 {
        return Err(Error::shape(
            "power iteration on an operator with an empty side",
        ));
    }
    if iters == 0 {
        return Err(Error::Input(
            "power iteration needs at least one iteration".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::Input(format!(
            "power iteration tolerance must be positive, got {tol}"
        )));
    }
    let mut st = match state {
        Some(s) if s.u.len() == n_in && s.v.len() == n_out => s,
        Some(s) => {
            return Err(Error::shape(format!(
                "power state has sides ({}, {}), operator has ({n_in}, {n_out})",
                s.u.len(),
                s.v.len()
            )))
        }
        None => PowerState::random(n_in, n_out, rng),
    };
    check_finite(&st.u, "state")?;
    if norm(&st.u) == 0.0 {
        st.u = random_unit(n_in, rng);
    }

    let mut v = vec![0.0; n_out];
    let mut u = vec![0.0; n_in];
    let mut sigma = 0.0;
    let mut reseeded = false;
    let mut round = 0;
    while round < iters {
        op.apply(&st.u, &mut v);
        check_finite(&v, "A u")?;
        let vn = norm(&v);
        if vn == 0.0 {
            // Either A = 0 or u sits in the null space; one fresh draw tells them apart.
            if reseeded {
                return Ok((0.0, PowerState::random(n_in, n_out, rng)));
            }
            reseeded = true;
            st.u = random_unit(n_in, rng);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        op.adjoint(&v, &mut u);
        check_finite(&u, "Aᵀ v")?;
        let un = norm(&u);
        if un == 0.0 {
            return Ok((0.0, PowerState::random(n_in, n_out, rng)));
        }
        u.iter_mut().for_each(|x| *x /= un);
        std::mem::swap(&mut st.u, &mut u);
        std::mem::swap(&mut st.v, &mut v);
        let prev = sigma;
        sigma = un;
        round += 1;
        if round > 1 && (sigma - prev).abs() <= tol * sigma {
            break;
        }
    }
    Ok((sigma, st))
}

/// Largest singular value of a rank-2 tensor, computed by a full SVD.
pub fn spectral_norm_exact(m: &Tensor64) -> Result<f64> {
    if m.rank() != 2 {
        return Err(Error::shape("spectral_norm_exact needs a rank-2 tensor"));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    if r > EXACT_MAX_SIDE || c > EXACT_MAX_SIDE {
        return Err(Error::Size(format!(
            "{r}x{c} exceeds the {EXACT_MAX_SIDE}x{EXACT_MAX_SIDE} exact-norm limit"
        )));
    }
    m.check_finite()?;
    if r == 0 || c == 0 {
        return Ok(0.0);
    }
    let dm = DMatrix::from_row_slice(r, c, m.data());
    Ok(dm.singular_values().max())
}

/// Writes out the convolution as an explicit `out_len x in_len` matrix,
/// entry by entry from the index map, with the same zero padding as the
/// operator form.
pub fn materialize_conv_matrix(
    kernel: &Tensor64,
    in_shape: [usize; 3],
    stride: usize,
    pad: usize,
) -> Result<Tensor64> {
    let g = kernel_geometry(kernel, in_shape, stride, pad)?;
    let (rows, cols) = (g.out_len(), g.in_len());
    if rows > MATERIALIZE_MAX_SIDE || cols > MATERIALIZE_MAX_SIDE {
        return Err(Error::Size(format!(
            "materialized convolution would be {rows}x{cols}, limit {MATERIALIZE_MAX_SIDE}"
        )));
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = kernel.data();
    let mut m = Tensor64::zeros(vec![rows, cols]);
    let data = m.data_mut();
    for oc in 0..g.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oc * oh + oy) * ow + ox;
                for ic in 0..g.in_ch {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            let col = (ic * g.in_h + iy as usize) * g.in_w + ix as usize;
                            data[row * cols + col] +=
                                k[((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor64 {
        Tensor64::from_fn(vec![r, c], |_| rng.sample(StandardNormal))
    }

    #[test]
    fn identity_operator() {
        let op = MatrixOperator::new(Tensor64::identity(4)).unwrap();
        let (s, _) = power_iteration(&op, 10, 1e-12, None, &mut rng()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dominant_diagonal() {
        let op = MatrixOperator::diagonal(&[3.0, 1.0, 0.5]);
        let (s, _) = power_iteration(&op, 50, 1e-15, None, &mut rng()).unwrap();
        assert!((s - 3.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn zero_operator_returns_zero() {
        let op = MatrixOperator::new(Tensor64::zeros(vec![3, 2])).unwrap();
        let (s, st) = power_iteration(&op, 5, 1e-6, None, &mut rng()).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!((st.u.len(), st.v.len()), (2, 3));
    }

    #[test]
    fn rejects_bad_arguments() {
        let op = MatrixOperator::new(Tensor64::identity(2)).unwrap();
        assert!(power_iteration(&op, 0, 1e-6, None, &mut rng()).is_err());
        assert!(power_iteration(&op, 1, 0.0, None, &mut rng()).is_err());
        let bad = PowerState {
            u: vec![1.0; 3],
            v: vec![1.0; 2],
        };
        assert!(matches!(
            power_iteration(&op, 1, 1e-6, Some(bad), &mut rng()),
            Err(Error::Shape(_))
        ));
        let nan = PowerState {
            u: vec![f64::NAN, 0.0],
            v: vec![0.0; 2],
        };
        assert!(matches!(
            power_iteration(&op, 1, 1e-6, Some(nan), &mut rng()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn random_8x8_matches_exact() {
        let mut r = rng();
        let m = random_matrix(8, 8, &mut r);
        let exact = spectral_norm_exact(&m).unwrap();
        let op = MatrixOperator::new(m).unwrap();
        let (s, _) = power_iteration(&op, 2000, 1e-15, None, &mut r).unwrap();
        assert!((s - exact).abs() <= 1e-4 * exact, "{s} vs {exact}");
        assert!(s <= exact * (1.0 + 1e-12));
    }

    #[test]
    fn exact_norm_examples() {
        assert!((spectral_norm_exact(&Tensor64::identity(2)).unwrap() - 1.0).abs() < 1e-12);
        let d = Tensor64::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        assert!((spectral_norm_exact(&d).unwrap() - 3.0).abs() < 1e-12);
        let shear = Tensor64::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let golden = ((3.0 + 5f64.sqrt()) / 2.0).sqrt();
        let got = spectral_norm_exact(&shear).unwrap();
        assert!((got - golden).abs() <= 1e-10 * golden);
        assert!((got - 1.618034).abs() < 1e-6);
        assert!(matches!(
            spectral_norm_exact(&Tensor64::zeros(vec![257, 2])),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn pointwise_kernel_materializes_to_scaled_identity() {
        let k = Tensor64::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let m = materialize_conv_matrix(&k, [1, 2, 2], 1, 0).unwrap();
        assert_eq!(m.shape(), &[4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.at2(r, c), if r == c { 2.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn delta_kernel_is_a_permutation() {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        let k = Tensor64::new(vec![1, 1, 3, 3], data).unwrap();
        let m = materialize_conv_matrix(&k, [1, 4, 5], 1, 1).unwrap();
        assert_eq!(m.shape(), &[20, 20]);
        for r in 0..20 {
            let row: Vec<f64> = (0..20).map(|c| m.at2(r, c)).collect();
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 19);
            assert_eq!(m.at2(r, r), 1.0);
        }
    }

    #[test]
    fn materialized_matrix_agrees_with_operator_application() {
        let mut r = rng();
        let k = random_matrix(2 * 3, 9, &mut r)
            .reshape(vec![2, 3, 3, 3])
            .unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let op = ConvOperator::from_kernel(&k, [3, 5, 4], stride, pad).unwrap();
            let m = materialize_conv_matrix(&k, [3, 5, 4], stride, pad).unwrap();
            let x = Tensor64::from_fn(op.in_shape(), |_| r.sample(StandardNormal));
            let y = op.apply_tensor(&x).unwrap();
            let my = m
                .matmul(&x.clone().reshape(vec![x.len(), 1]).unwrap())
                .unwrap();
            for (a, b) in y.data().iter().zip(my.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_conv_sigma_cross_check() {
        let mut r = rng();
        let k = random_matrix(1, 9, &mut r)
            .reshape(vec![1, 1, 3, 3])
            .unwrap();
        let m = materialize_conv_matrix(&k, [1, 4, 4], 1, 1).unwrap();
        let exact = spectral_norm_exact(&m).unwrap();
        let op = ConvOperator::from_kernel(&k, [1, 4, 4], 1, 1).unwrap();
        let (s, _) = power_iteration(&op, 1000, 1e-14, None, &mut r).unwrap();
        assert!((s - exact).abs() <= 1e-3 * exact);
    }

    #[test]
    fn oversized_materialization_is_rejected() {
        let k = Tensor64::zeros(vec![1, 1, 1, 1]);
        assert!(matches!(
            materialize_conv_matrix(&k, [1, 65, 64], 1, 0),
            Err(Error::Size(_))
        ));
    }
}

//! Real spherical harmonics for view-dependent color, degrees 0 through 3,
//! with analytic gradients for the backward pass.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_DEGREE: usize = 3;

/// Number of coefficients for a degree: (degree + 1)^2.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values for a unit direction, in the coefficient order used by the
/// splat ecosystem (l-major, band order -l..l as below).
pub fn basis(degree: usize, dir: Vector3<f64>) -> [f64; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - yy);
    }
    b
}

/// Per-basis gradient w.r.t. the (unit) direction components.
pub fn basis_dir_grad(degree: usize, dir: Vector3<f64>) -> [Vector3<f64>; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = [Vector3::zeros(); 16];
    if degree >= 1 {
        g[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g[2] = Vector3::new(0.0, 0.0, SH_C1);
        g[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        g[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
        g[5] = SH_C2[1] * Vector3::new(0.0, z, y);
        g[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
        g[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[9] = SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        g[10] = SH_C3[1] * Vector3::new(y * z, x * z, x * y);
        g[11] = SH_C3[2]
            * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        g[12] = SH_C3[3]
            * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        g[13] = SH_C3[4]
            * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        g[14] = SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        g[15] = SH_C3[6] * Vector3::new(3.0 * xx - yy, -2.0 * x * y, 0.0);
    }
    g
}

/// Evaluate the SH color for a unit view direction; raw value, before the
/// +0.5 offset and clamping applied by the renderer.
pub fn eval(degree: usize, coeffs: &[Vector3<f64>], dir: Vector3<f64>) -> Vector3<f64> {
    let b = basis(degree, dir);
    let mut c = Vector3::zeros();
    for (k, coeff) in coeffs.iter().enumerate().take(coeff_count(degree)) {
        c += coeff * b[k];
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            );
            if v.norm() > 1e-3 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn degree0_is_constant() {
        let coeffs = vec![Vector3::new(1.0, 2.0, 3.0)];
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let c = eval(0, &coeffs, random_unit(&mut rng));
            assert_relative_eq!(c.x, SH_C0 * 1.0);
            assert_relative_eq!(c.y, SH_C0 * 2.0);
            assert_relative_eq!(c.z, SH_C0 * 3.0);
        }
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let dir = random_unit(&mut rng);
            for degree in 0..=MAX_DEGREE {
                let grads = basis_dir_grad(degree, dir);
                for axis in 0..3 {
                    let mut dp = dir;
                    let mut dm = dir;
                    dp[axis] += h;
                    dm[axis] -= h;
                    // Treat components as free variables (no renormalization);
                    // the basis polynomials are defined on all of R^3.
                    let bp = basis(degree, dp);
                    let bm = basis(degree, dm);
                    for k in 0..coeff_count(degree) {
                        let fd = (bp[k] - bm[k]) / (2.0 * h);
                        assert_relative_eq!(grads[k][axis], fd, epsilon = 1e-6, max_relative = 1e-6);
                    }
                }
            }
        }
    }
}

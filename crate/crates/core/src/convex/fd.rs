//! Central finite-difference checks for callback gradients. Test and
//! verification support; nothing here is on the solve path.

use super::SmoothFn;
use nalgebra::DMatrix;

/// Central-difference gradient of a scalar function, one column per variable
/// in `indices`.
pub fn numeric_gradient<F>(f: &F, x: &[f64], indices: &[usize], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let mut out = Vec::with_capacity(indices.len());
    let mut xp = x.to_vec();
    for &i in indices {
        let h = step * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative error between the callback gradient of `f` and central
/// finite differences at `x`, taken over the function's support.
pub fn gradient_rel_error(f: &dyn SmoothFn, x: &[f64], step: f64) -> f64 {
    let mut analytic = vec![0.0; x.len()];
    f.add_gradient(x, &mut analytic, 1.0);
    let value = |x: &[f64]| f.value(x);
    let numeric = numeric_gradient(&value, x, f.support(), step);
    f.support()
        .iter()
        .zip(&numeric)
        .map(|(&i, &num)| {
            let ana = analytic[i];
            (ana - num).abs() / ana.abs().max(num.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Largest relative error between the callback Hessian and central
/// differences of the callback gradient.
pub fn hessian_rel_error(f: &dyn SmoothFn, x: &[f64], step: f64) -> f64 {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    f.add_hessian(x, &mut hess, 1.0);
    let scale = hess.amax().max(1.0);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &j in f.support() {
        let h = step * x[j].abs().max(1.0);
        let orig = xp[j];
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        xp[j] = orig + h;
        f.add_gradient(&xp, &mut gp, 1.0);
        xp[j] = orig - h;
        f.add_gradient(&xp, &mut gm, 1.0);
        xp[j] = orig;
        for &i in f.support() {
            let num = (gp[i] - gm[i]) / (2.0 * h);
            worst = worst.max((hess[(i, j)] - num).abs() / scale);
        }
    }
    worst
}

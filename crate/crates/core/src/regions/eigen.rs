//! Symmetric eigensolvers: cyclic Jacobi for dense blocks, Lanczos with
//! full reorthogonalisation and locking for large sparse ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Jacobi stops when the off-diagonal Frobenius norm falls below this.
pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Lanczos locks a Ritz pair once its residual norm is below this.
pub const LANCZOS_TOL: f64 = 1e-8;

/// Eigen-decomposition of a dense symmetric `n × n` matrix (row-major).
/// Returns eigenvalues ascending and eigenvectors as columns of a row-major
/// `n × n` matrix.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off_norm(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::ConvergenceFailure(format!(
                "Jacobi: off-diagonal norm {:e} after {} sweeps",
                off_norm(&a),
                sweeps
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Entries below the round-off of both diagonals are dropped.
                let g = 100.0 * apq.abs();
                if sweeps > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                if apq.abs() < 1e-300 {
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let nkp = akp - s * (akq + tau * akp);
                    let nkq = akq + s * (akp - tau * akq);
                    a[k * n + p] = nkp;
                    a[p * n + k] = nkp;
                    a[k * n + q] = nkq;
                    a[q * n + k] = nkq;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = vkp - s * (vkq + tau * vkp);
                    v[k * n + q] = vkq + s * (vkp - tau * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|k| v[k * n + old_col]).collect();
        canonical_sign(&mut col);
        for k in 0..n {
            vecs[k * n + new_col] = col[k];
        }
    }
    Ok((vals, vecs))
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.get(best).map_or(false, |&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes of classical Gram-Schmidt.
    for _ in 0..2 {
        for q in basis {
            let c = dot(w, q);
            for (x, y) in w.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
    }
}

/// Orthogonalises `v` against both sets and normalises it, or returns
/// `None` if almost nothing is left.
fn project_out(mut v: Vec<f64>, locked: &[Vec<f64>], basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let before = dot(&v, &v).sqrt();
    orthogonalize(&mut v, locked);
    orthogonalize(&mut v, basis);
    let norm = dot(&v, &v).sqrt();
    if !(norm > 1e-8 * before) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    orthogonalize(&mut v, locked);
    orthogonalize(&mut v, basis);
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Smallest `d` eigenpairs of a symmetric positive semi-definite operator
/// given by `matvec`, with `upper` an upper bound on its spectrum.
/// Eigenvalues ascending; eigenvectors as separate vectors.
///
/// Thick-restarted Lanczos on `σI − A` with explicit Rayleigh-Ritz
/// projection, full reorthogonalisation and locking. Once `d` pairs are
/// locked, a fresh random direction is injected and iteration continues
/// until the best remaining pair no longer improves on the locked set,
/// which recovers missed copies of repeated eigenvalues.
pub fn lanczos_smallest<F>(matvec: F, n: usize, d: usize, upper: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = d.min(n);
    let sigma = upper + 1.0;
    let apply_b = |x: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; n];
        matvec(x, &mut y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = sigma * xi - *yi;
        }
        y
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a2c_205d);
    let max_restarts = 10 * d.max(1);
    let max_dim = (4 * d + 40).max(100);

    let mut locked: Vec<Vec<f64>> = Vec::new();
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut next: Option<Vec<f64>> = None;
    let mut verifying = false;

    let dth_smallest = |vals: &[f64]| -> f64 {
        let mut v = vals.to_vec();
        v.sort_by(f64::total_cmp);
        v[d - 1]
    };

    let mut restarts = 0;
    loop {
        if d == 0 || locked.len() == n {
            break;
        }
        if restarts == max_restarts {
            return Err(Error::ConvergenceFailure(format!(
                "Lanczos: {} of {} eigenpairs after {} restarts",
                locked.len().min(d),
                d,
                restarts
            )));
        }
        restarts += 1;
        let dim = (n - locked.len()).min(max_dim);

        while basis.len() < dim {
            let v = next.take().unwrap_or_else(|| random_direction(&mut rng, n));
            let v = match project_out(v, &locked, &basis) {
                Some(v) => v,
                // Invariant subspace reached: continue from a fresh direction.
                None => match project_out(random_direction(&mut rng, n), &locked, &basis) {
                    Some(v) => v,
                    None => break,
                },
            };
            let w = apply_b(&v);
            next = Some(w.clone());
            basis.push(v);
            images.push(w);
        }

        let m = basis.len();
        let mut h = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let x = 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i]));
                h[i * m + j] = x;
                h[j * m + i] = x;
            }
        }
        let (theta, s) = jacobi_eigen(h, m)?;
        let combine = |vs: &[Vec<f64>], col: usize| -> Vec<f64> {
            let mut y = vec![0.0; n];
            for (i, v) in vs.iter().enumerate() {
                let c = s[i * m + col];
                for (yv, vv) in y.iter_mut().zip(v) {
                    *yv += c * vv;
                }
            }
            y
        };

        let mut kept: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut first_residual: Option<Vec<f64>> = None;
        let mut converging = true;
        let mut done = false;
        let keep = (dim / 2).max(1);
        for col in (0..m).rev() {
            let y = combine(&basis, col);
            let by = combine(&images, col);
            let res: Vec<f64> = by.iter().zip(&y).map(|(b, yv)| b - theta[col] * yv).collect();
            let rnorm = dot(&res, &res).sqrt();
            if converging && rnorm < LANCZOS_TOL {
                let value = sigma - theta[col];
                if verifying && value >= dth_smallest(&locked_vals) - 1e-9 {
                    done = true;
                    break;
                }
                let mut y = y;
                orthogonalize(&mut y, &locked);
                let norm = dot(&y, &y).sqrt();
                y.iter_mut().for_each(|x| *x /= norm);
                locked.push(y);
                locked_vals.push(value);
                continue;
            }
            converging = false;
            if first_residual.is_none() {
                first_residual = Some(res);
            }
            if kept.len() < keep {
                kept.push((y, by));
            } else {
                break;
            }
        }
        if done {
            break;
        }
        if !verifying && locked.len() >= d {
            verifying = true;
            kept.clear();
            first_residual = None;
        }
        basis = kept.iter().map(|(y, _)| y.clone()).collect();
        images = kept.into_iter().map(|(_, by)| by).collect();
        next = first_residual;
    }

    let mut order: Vec<usize> = (0..locked.len()).collect();
    order.sort_by(|&i, &j| locked_vals[i].total_cmp(&locked_vals[j]).then(i.cmp(&j)));
    order.truncate(d);
    let vals = order.iter().map(|&i| locked_vals[i]).collect();
    let vecs = order
        .iter()
        .map(|&i| {
            let mut v = locked[i].clone();
            canonical_sign(&mut v);
            v
        })
        .collect();
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_two_by_two() {
        let (vals, vecs) = jacobi_eigen(vec![2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // Columns: (1, -1)/√2 and (1, 1)/√2 up to sign.
        assert!((vecs[0].abs() - s).abs() < 1e-12 && (vecs[2].abs() - s).abs() < 1e-12);
        assert!((vecs[1] - s).abs() < 1e-12 && (vecs[3] - s).abs() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.gen_range(-1.0..1.0);
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        let (vals, vecs) = jacobi_eigen(a.clone(), n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| vecs[i * n + k] * vals[k] * vecs[j * n + k]).sum();
                assert!((r - a[i * n + j]).abs() < 1e-10);
            }
        }
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lanczos_matches_jacobi_on_path_graph() {
        // Path graph Laplacian on 400 nodes.
        let n = 400;
        let matvec = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut s = 0.0;
                if i > 0 {
                    s += x[i] - x[i - 1];
                }
                if i + 1 < n {
                    s += x[i] - x[i + 1];
                }
                y[i] = s;
            }
        };
        let (vals, vecs) = lanczos_smallest(matvec, n, 4, 4.0).unwrap();
        for (k, &v) in vals.iter().enumerate() {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
            assert!((v - exact).abs() < 1e-8, "{} vs {}", v, exact);
        }
        for a in 0..4 {
            for b in 0..4 {
                let d = dot(&vecs[a], &vecs[b]);
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-8);
            }
        }
    }
}

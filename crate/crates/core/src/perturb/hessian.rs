use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITERS: usize = 100;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn quad(&self, v: &[f64]) -> f64 {
        self.matvec(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

/// Softmax cross-entropy Hessian w.r.t. the logits, `diag(p) - p pᵀ`,
/// averaged over the batch.
pub fn output_hessian_ce(probs: &[Vec<f64>]) -> Result<SymMatrix> {
    let k = probs.first().map(Vec::len).ok_or(Error::EmptyTensor)?;
    let mut h = SymMatrix::zeros(k);
    for p in probs {
        if p.len() != k {
            return Err(Error::Shape(format!("probability vectors of length {k} and {}", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Probabilities(sum));
        }
        for i in 0..k {
            h.data[i * k + i] += p[i];
            for j in 0..k {
                h.data[i * k + j] -= p[i] * p[j];
            }
        }
    }
    let n = probs.len() as f64;
    h.data.iter_mut().for_each(|v| *v /= n);
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    pub lambda: f64,
    /// Unit-norm dominant eigenvector.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// Set when the operator annihilated the iterate (zero operator).
    pub degenerate: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenpair of a small dense symmetric matrix by cyclic Jacobi.
fn jacobi_top(mut a: Vec<f64>, m: usize) -> (f64, Vec<f64>) {
    let mut v = vec![0.0; m * m];
    (0..m).for_each(|i| v[i * m + i] = 1.0);
    for _ in 0..64 {
        let off: f64 = (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * m + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let (akp, akq) = (a[k * m + p], a[k * m + q]);
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let (apk, aqk) = (a[p * m + k], a[q * m + k]);
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                for k in 0..m {
                    let (vkp, vkq) = (v[k * m + p], v[k * m + q]);
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let top = (0..m).max_by(|&i, &j| a[i * m + i].total_cmp(&a[j * m + j])).unwrap_or(0);
    (a[top * m + top], (0..m).map(|k| v[k * m + top]).collect())
}

/// Dominant eigenpair of a symmetric PSD operator given as a mat-vec oracle.
///
/// The power iterates from a seeded start span a Krylov space; each step
/// orthonormalizes the newest iterate against the previous ones and takes the
/// Rayleigh-Ritz pair over that space (Lanczos with full
/// reorthogonalization). Iteration stops when the Ritz value changes by less
/// than `tol` relative and its residual is below `tol * λ`, or when the space
/// becomes invariant.
pub fn power_iteration<F>(dim: usize, matvec: F, max_iters: usize, tol: f64, seed: u64) -> PowerResult
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if normalize(&mut start) == 0.0 && dim > 0 {
        start[0] = 1.0;
    }
    let mut basis = vec![start.clone()];
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut lambda = f64::NAN;
    let mut vector = start.clone();
    let mut iterations = 0;
    while iterations < max_iters.min(dim.max(1)) {
        iterations += 1;
        let mut w = matvec(basis.last().unwrap());
        images.push(w.clone());
        let m = basis.len();
        let mut t = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i]));
                t[i * m + j] = v;
                t[j * m + i] = v;
            }
        }
        let (theta, y) = jacobi_top(t, m);
        let mut x = vec![0.0; dim];
        let mut hx = vec![0.0; dim];
        for ((q, hq), c) in basis.iter().zip(&images).zip(&y) {
            x.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
            hx.iter_mut().zip(hq).for_each(|(a, b)| *a += c * b);
        }
        normalize(&mut x);
        let hx_norm = normalize(&mut hx.clone());
        if iterations == 1 && hx_norm == 0.0 {
            return PowerResult {
                lambda: 0.0,
                vector: start,
                iterations,
                degenerate: true,
            };
        }
        let residual = hx.iter().zip(&x).map(|(a, b)| (a - theta * b).powi(2)).sum::<f64>().sqrt();
        let scale = theta.abs().max(f64::EPSILON);
        let converged = (theta - lambda).abs() < tol * scale && residual < tol * scale;
        lambda = theta;
        vector = x;
        if converged {
            break;
        }
        let norm_w = normalize(&mut w.clone());
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        if normalize(&mut w) <= 1e-12 * norm_w.max(f64::MIN_POSITIVE) {
            break;
        }
        basis.push(w);
    }
    PowerResult {
        lambda: lambda.max(0.0),
        vector,
        iterations,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_half() {
        let h = output_hessian_ce(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(h.data, vec![0.25, -0.25, -0.25, 0.25]);
        let r = power_iteration(2, |v| h.matvec(v), POWER_MAX_ITERS, POWER_TOL, 7);
        assert!((r.lambda - 0.5).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.vector[0].abs() - s).abs() < 1e-9);
        assert!((r.vector[0] + r.vector[1]).abs() < 1e-9);
    }

    #[test]
    fn one_hot_is_zero_and_rows_sum_to_zero() {
        let h = output_hessian_ce(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
        let h = output_hessian_ce(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]]).unwrap();
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| h.get(i, j)).sum();
            assert!(s.abs() < 1e-15);
        }
        let r = power_iteration(3, |_| vec![0.0; 3], 100, 1e-6, 1);
        assert!(r.degenerate);
        assert_eq!(r.lambda, 0.0);
    }

    #[test]
    fn diagonal() {
        let h = SymMatrix {
            n: 2,
            data: vec![3.0, 0.0, 0.0, 1.0],
        };
        let r = power_iteration(2, |v| h.matvec(v), 100, 1e-6, 3);
        assert!((r.lambda - 3.0).abs() < 1e-5);
        assert!(r.lambda <= 3.0);
        assert!((r.vector[0].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(matches!(
            output_hessian_ce(&[vec![0.5, 0.6]]),
            Err(Error::Probabilities(_))
        ));
    }
}

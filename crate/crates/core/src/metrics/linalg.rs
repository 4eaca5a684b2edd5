//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Dimensions here are small (feature width 32), so exactness and
//! determinism win over speed.

use crate::tensor::{matmul, Tensor};

/// Eigenvalues (ascending) and eigenvectors (columns of the returned
/// matrix) of a symmetric matrix.
pub fn sym_eig(a: &Tensor) -> (Vec<f64>, Tensor) {
    let d = a.shape()[0];
    assert_eq!(a.shape(), &[d, d], "sym_eig needs a square matrix");
    let mut b = a.clone();
    let mut v = Tensor::zeros(&[d, d]);
    for i in 0..d {
        v.set2(i, i, 1.0);
    }
    let off = |m: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += m.at2(i, j) * m.at2(i, j);
                }
            }
        }
        s
    };
    let scale: f64 = (0..d).map(|i| a.at2(i, i).abs()).fold(1e-300, f64::max);
    let tol = (scale * 1e-14).powi(2) * d as f64 * d as f64;
    for _sweep in 0..100 {
        if off(&b) <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = b.at2(p, q);
                if apq.abs() < scale * 1e-300 {
                    continue;
                }
                let theta = (b.at2(q, q) - b.at2(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let bkp = b.at2(k, p);
                    let bkq = b.at2(k, q);
                    b.set2(k, p, c * bkp - s * bkq);
                    b.set2(k, q, s * bkp + c * bkq);
                }
                for k in 0..d {
                    let bpk = b.at2(p, k);
                    let bqk = b.at2(q, k);
                    b.set2(p, k, c * bpk - s * bqk);
                    b.set2(q, k, s * bpk + c * bqk);
                }
                for k in 0..d {
                    let vkp = v.at2(k, p);
                    let vkq = v.at2(k, q);
                    v.set2(k, p, c * vkp - s * vkq);
                    v.set2(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    let eigs: Vec<f64> = (0..d).map(|i| b.at2(i, i)).collect();
    order.sort_by(|&i, &j| eigs[i].partial_cmp(&eigs[j]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
    let mut vs = Tensor::zeros(&[d, d]);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..d {
            vs.set2(k, col, v.at2(k, src));
        }
    }
    (sorted, vs)
}

/// V · diag(f(λ)) · Vᵀ
pub fn rebuild(eigs: &[f64], vecs: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let d = eigs.len();
    let mut scaled = vecs.clone();
    for i in 0..d {
        for j in 0..d {
            scaled.set2(i, j, vecs.at2(i, j) * f(eigs[j]));
        }
    }
    let mut vt = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            vt.set2(i, j, vecs.at2(j, i));
        }
    }
    matmul(&scaled, &vt)
}

/// Principal square root of a symmetric PSD matrix, with negative
/// eigenvalues (numerical noise) clamped to zero.
pub fn sym_sqrt(a: &Tensor) -> Tensor {
    let (eigs, vecs) = sym_eig(a);
    rebuild(&eigs, &vecs, |l| l.max(0.0).sqrt())
}

pub fn symmetrize(a: &Tensor) -> Tensor {
    let d = a.shape()[0];
    let mut out = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            out.set2(i, j, 0.5 * (a.at2(i, j) + a.at2(j, i)));
        }
    }
    out
}

pub fn trace(a: &Tensor) -> f64 {
    (0..a.shape()[0]).map(|i| a.at2(i, i)).sum()
}

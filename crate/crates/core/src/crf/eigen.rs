//! Smallest generalized eigenpairs of `(D − W) v = λ D v`.
//!
//! Small problems are solved densely through the normalized Laplacian.
//! Larger ones use block inverse subspace iteration: `L + σD` is factored
//! once with a banded Cholesky (pixel graphs are banded in raster order),
//! each sweep solves against `D X`, re-orthonormalizes in the `D` inner
//! product and applies a Rayleigh-Ritz step. Converged leading pairs are
//! locked and later sweeps are kept `D`-orthogonal to them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::affinity::SparseAffinity;
use crate::error::{Error, Result};

const DENSE_LIMIT: usize = 640;
const SHIFT: f64 = 1e-5;
const MAX_SWEEPS: usize = 400;
/// Iteration stops below this; callers are promised 1e-8.
const TARGET: f64 = 1e-9;
pub const ZERO_DEGREE_FIX: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Eigenpairs {
    /// Ascending.
    pub values: Vec<f64>,
    /// One `D`-normalized vector per value.
    pub vectors: Vec<Vec<f64>>,
    pub degrees: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Degree vector, with empty rows lifted to a tiny positive value.
pub fn regularized_degrees(w: &SparseAffinity) -> (Vec<f64>, Vec<String>) {
    let mut d = w.degrees();
    let mut warnings = Vec::new();
    let zeros = d.iter().filter(|&&v| v <= 0.0).count();
    if zeros > 0 {
        for v in d.iter_mut().filter(|v| **v <= 0.0) {
            *v += ZERO_DEGREE_FIX;
        }
        warnings.push(format!("{zeros} pixel(s) with zero degree; regularized by {ZERO_DEGREE_FIX:e}"));
    }
    (d, warnings)
}

/// `(D − W) x`.
pub fn laplacian_mul(w: &SparseAffinity, d: &[f64], x: &[f64], out: &mut [f64]) {
    w.mul_vec(x, out);
    for ((o, &di), &xi) in out.iter_mut().zip(d).zip(x) {
        *o = di * xi - *o;
    }
}

pub fn residual_norm(w: &SparseAffinity, d: &[f64], lambda: f64, v: &[f64]) -> f64 {
    let mut lv = vec![0.0; v.len()];
    laplacian_mul(w, d, v, &mut lv);
    lv.iter()
        .zip(d)
        .zip(v)
        .map(|((l, di), vi)| {
            let r = l - lambda * di * vi;
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn d_dot(d: &[f64], a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).zip(d).map(|((x, y), w)| x * y * w).sum()
}

/// Flips each vector so its largest-magnitude entry (first on ties) is positive.
fn fix_signs(vectors: &mut [Vec<f64>]) {
    for v in vectors {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

pub fn smallest_eigenpairs(w: &SparseAffinity, k: usize) -> Result<Eigenpairs> {
    if k == 0 || k > w.n {
        return Err(Error::InvalidArgument(format!("cannot take {k} eigenpairs of a {}-node graph", w.n)));
    }
    let (d, warnings) = regularized_degrees(w);
    let (values, mut vectors) = if w.n <= DENSE_LIMIT {
        dense(w, &d, k)
    } else {
        subspace(w, &d, k)?
    };
    fix_signs(&mut vectors);
    Ok(Eigenpairs {
        values,
        vectors,
        degrees: d,
        warnings,
    })
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vecs)
}

fn dense(w: &SparseAffinity, d: &[f64], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = w.n;
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 1.0;
        let (cols, vals) = w.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            m[(i, j)] = -v * s[i] * s[j];
        }
    }
    let (values, u) = sorted_eigen(m);
    let mut vectors: Vec<Vec<f64>> = (0..k).map(|c| (0..n).map(|r| u[(r, c)] * s[r]).collect()).collect();
    let mut values = values[..k].to_vec();
    polish(w, d, &mut values, &mut vectors);
    (values, vectors)
}

/// One Rayleigh quotient refresh; dense eigenvalues come from a scaled matrix.
fn polish(w: &SparseAffinity, d: &[f64], values: &mut [f64], vectors: &mut [Vec<f64>]) {
    let mut lv = vec![0.0; w.n];
    for (lam, v) in values.iter_mut().zip(vectors.iter_mut()) {
        let nd = d_dot(d, v, v).sqrt();
        v.iter_mut().for_each(|x| *x /= nd);
        laplacian_mul(w, d, v, &mut lv);
        *lam = v.iter().zip(&lv).map(|(a, b)| a * b).sum();
    }
}

/// Lower band of an SPD matrix: row `i` stores columns `i−b ..= i`.
struct BandCholesky {
    n: usize,
    b: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.b + 1) + (j + self.b - i)]
    }

    fn factor(w: &SparseAffinity, d: &[f64], shift: f64) -> Result<Self> {
        let n = w.n;
        let b = w.bandwidth();
        let stride = b + 1;
        let mut l = vec![0.0; n * stride];
        for i in 0..n {
            l[i * stride + b] = d[i] * (1.0 + shift);
            let (cols, vals) = w.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j < i {
                    l[i * stride + (j + b - i)] = -v;
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(b);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(b));
                let ri = i * stride + b - i;
                let rj = j * stride + b - j;
                let mut s = l[ri + j];
                for k in klo..j {
                    s -= l[ri + k] * l[rj + k];
                }
                if i == j {
                    if s.is_nan() || s <= 0.0 {
                        return Err(Error::Convergence(format!("shifted Laplacian not positive definite at row {i}")));
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(Self { n, b, l })
    }

    /// Solves in place for `p` right-hand sides stored row-major `[n][p]`.
    fn solve(&self, x: &mut [f64], p: usize) {
        let (n, b) = (self.n, self.b);
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let (head, tail) = x.split_at_mut(i * p);
            let xi = &mut tail[..p];
            for k in lo..i {
                let lik = self.at(i, k);
                if lik != 0.0 {
                    for (a, &y) in xi.iter_mut().zip(&head[k * p..(k + 1) * p]) {
                        *a -= lik * y;
                    }
                }
            }
            let inv = 1.0 / self.at(i, i);
            xi.iter_mut().for_each(|a| *a *= inv);
        }
        for i in (0..n).rev() {
            let inv = 1.0 / self.at(i, i);
            let (head, tail) = x.split_at_mut(i * p);
            let xi = &mut tail[..p];
            xi.iter_mut().for_each(|a| *a *= inv);
            let lo = i.saturating_sub(b);
            for k in lo..i {
                let lik = self.at(i, k);
                if lik != 0.0 {
                    for (a, &y) in head[k * p..(k + 1) * p].iter_mut().zip(xi.iter()) {
                        *a -= lik * y;
                    }
                }
            }
        }
    }
}

/// Modified Gram-Schmidt (two passes) in the `D` inner product against the
/// locked vectors and within the block. Columns that collapse are replaced
/// by fresh random directions.
fn d_orthonormalize(d: &[f64], locked: &[Vec<f64>], block: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for c in 0..block.len() {
        let mut attempt = 0;
        loop {
            let scale0 = d_dot(d, &block[c], &block[c]).sqrt();
            let (done, rest) = block.split_at_mut(c);
            let cur = &mut rest[0];
            for _ in 0..2 {
                for q in locked.iter().chain(done.iter()) {
                    let proj = d_dot(d, q, cur);
                    for (x, y) in cur.iter_mut().zip(q) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = d_dot(d, &block[c], &block[c]).sqrt();
            if nrm > 1e-10 * scale0 && nrm > 0.0 {
                block[c].iter_mut().for_each(|x| *x /= nrm);
                break;
            }
            attempt += 1;
            assert!(attempt < 8, "cannot extend D-orthonormal basis");
            block[c].iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
}

fn subspace(w: &SparseAffinity, d: &[f64], k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = w.n;
    let p = (k + k / 2 + 4).min(n);
    let chol = BandCholesky::factor(w, d, SHIFT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut block: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut locked: Vec<Vec<f64>> = Vec::new();
    let mut locked_vals: Vec<f64> = Vec::new();
    d_orthonormalize(d, &locked, &mut block, &mut rng);
    let mut rhs = vec![0.0; n * p];
    let mut lv = vec![0.0; n];

    for _ in 0..MAX_SWEEPS {
        let m = block.len();
        // Solve (L + σD) Y = D X.
        for (c, col) in block.iter().enumerate() {
            for i in 0..n {
                rhs[i * m + c] = d[i] * col[i];
            }
        }
        chol.solve(&mut rhs[..n * m], m);
        for (c, col) in block.iter_mut().enumerate() {
            for i in 0..n {
                col[i] = rhs[i * m + c];
            }
        }
        d_orthonormalize(d, &locked, &mut block, &mut rng);

        // Rayleigh-Ritz on the active block.
        let lblock: Vec<Vec<f64>> = block
            .iter()
            .map(|x| {
                let mut y = vec![0.0; n];
                laplacian_mul(w, d, x, &mut y);
                y
            })
            .collect();
        let proj = DMatrix::from_fn(m, m, |r, c| {
            let a: f64 = block[r].iter().zip(&lblock[c]).map(|(x, y)| x * y).sum();
            let b: f64 = block[c].iter().zip(&lblock[r]).map(|(x, y)| x * y).sum();
            0.5 * (a + b)
        });
        let (theta, q) = sorted_eigen(proj);
        let rotated: Vec<Vec<f64>> = (0..m)
            .map(|c| {
                let mut v = vec![0.0; n];
                for (r, x) in block.iter().enumerate() {
                    let coef = q[(r, c)];
                    for (a, b) in v.iter_mut().zip(x) {
                        *a += coef * b;
                    }
                }
                v
            })
            .collect();
        block = rotated;

        // Lock the converged prefix.
        let mut newly = 0;
        for (c, v) in block.iter().enumerate() {
            if locked.len() + c >= k {
                break;
            }
            laplacian_mul(w, d, v, &mut lv);
            let r: f64 = lv
                .iter()
                .zip(d)
                .zip(v)
                .map(|((l, di), vi)| (l - theta[c] * di * vi).powi(2))
                .sum::<f64>()
                .sqrt();
            if r <= TARGET * norm(v) {
                newly += 1;
            } else {
                break;
            }
        }
        for (c, v) in block.drain(..newly).enumerate() {
            locked.push(v);
            locked_vals.push(theta[c]);
        }
        if locked.len() >= k {
            let mut pairs: Vec<(f64, Vec<f64>)> = locked_vals.into_iter().zip(locked).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (values, vectors) = pairs.into_iter().unzip();
            return Ok((values, vectors));
        }
        // Keep the block width constant so later sweeps converge as fast.
        while block.len() + locked.len() < p.max(k + 4).min(n) {
            block.push((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        d_orthonormalize(d, &locked, &mut block, &mut rng);
        if block.len() > p {
            block.truncate(p);
        }
    }
    Err(Error::Convergence(format!(
        "only {} of {k} eigenpairs converged after {MAX_SWEEPS} sweeps",
        locked.len()
    )))
}

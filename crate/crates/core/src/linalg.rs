//! Block-tridiagonal Cholesky solves for the Hessian of discrete actions.
//!
//! Blocks are small and dense, stored row-major in flat vectors.

/// Symmetric block-tridiagonal matrix with square `d × d` blocks.
pub(crate) struct BlockTridiag {
    pub d: usize,
    blocks: usize,
    diag: Vec<f64>,
    /// Block `(j, j + 1)`.
    upper: Vec<f64>,
}

pub(crate) struct BlockCholesky {
    d: usize,
    /// Lower-triangular diagonal factors.
    l: Vec<f64>,
    /// `b[j]` is block `(j + 1, j)` of the factor.
    b: Vec<f64>,
}

/// In-place Cholesky of a row-major `d × d` block; lower triangle holds `L`.
fn cholesky(a: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return false;
        }
        let ljj = s.sqrt();
        a[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / ljj;
        }
        for k in j + 1..d {
            a[j * d + k] = 0.0;
        }
    }
    true
}

/// Solves `L x = r` in place for a lower-triangular block.
fn forward(l: &[f64], d: usize, r: &mut [f64]) {
    for i in 0..d {
        let mut s = r[i];
        for k in 0..i {
            s -= l[i * d + k] * r[k];
        }
        r[i] = s / l[i * d + i];
    }
}

/// Solves `Lᵀ x = r` in place.
fn backward(l: &[f64], d: usize, r: &mut [f64]) {
    for i in (0..d).rev() {
        let mut s = r[i];
        for k in i + 1..d {
            s -= l[k * d + i] * r[k];
        }
        r[i] = s / l[i * d + i];
    }
}

/// Solves `A x = rhs` for a dense symmetric positive definite row-major
/// `d × d` matrix; `None` when the factorization fails.
pub(crate) fn solve_spd(a: &[f64], d: usize, rhs: &[f64]) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    if !cholesky(&mut l, d) {
        return None;
    }
    let mut x = rhs.to_vec();
    forward(&l, d, &mut x);
    backward(&l, d, &mut x);
    Some(x)
}

impl BlockTridiag {
    pub fn new(d: usize, blocks: usize) -> Self {
        Self {
            d,
            blocks,
            diag: vec![0.0; blocks * d * d],
            upper: vec![0.0; blocks.saturating_sub(1) * d * d],
        }
    }

    pub fn diag_mut(&mut self, j: usize) -> &mut [f64] {
        let s = self.d * self.d;
        &mut self.diag[j * s..(j + 1) * s]
    }

    pub fn upper_mut(&mut self, j: usize) -> &mut [f64] {
        let s = self.d * self.d;
        &mut self.upper[j * s..(j + 1) * s]
    }

    /// Factor `H + shift·I`; `None` when it is not positive definite.
    pub fn factor(&self, shift: f64) -> Option<BlockCholesky> {
        let d = self.d;
        let s = d * d;
        let mut l = self.diag.clone();
        let mut b = vec![0.0; self.upper.len()];
        for j in 0..self.blocks {
            let (done, rest) = l.split_at_mut(j * s);
            let lj = &mut rest[..s];
            for i in 0..d {
                lj[i * d + i] += shift;
            }
            if j > 0 {
                // B = Oᵀ L⁻ᵀ, row by row: each row of B solves L x = column of O
                let lp = &done[(j - 1) * s..j * s];
                let bj = &mut b[(j - 1) * s..j * s];
                let o = &self.upper[(j - 1) * s..j * s];
                let mut col = vec![0.0; d];
                for r in 0..d {
                    for k in 0..d {
                        col[k] = o[k * d + r];
                    }
                    forward(lp, d, &mut col);
                    bj[r * d..(r + 1) * d].copy_from_slice(&col);
                }
                for r in 0..d {
                    for c in 0..=r {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += bj[r * d + k] * bj[c * d + k];
                        }
                        lj[r * d + c] -= acc;
                        if c != r {
                            lj[c * d + r] -= acc;
                        }
                    }
                }
            }
            if !cholesky(lj, d) {
                return None;
            }
        }
        Some(BlockCholesky { d, l, b })
    }

    /// `H · x` for a stacked vector.
    #[cfg(test)]
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let s = d * d;
        let mut out = vec![0.0; x.len()];
        for j in 0..self.blocks {
            for r in 0..d {
                for c in 0..d {
                    out[j * d + r] += self.diag[j * s + r * d + c] * x[j * d + c];
                }
            }
            if j + 1 < self.blocks {
                for r in 0..d {
                    for c in 0..d {
                        let o = self.upper[j * s + r * d + c];
                        out[j * d + r] += o * x[(j + 1) * d + c];
                        out[(j + 1) * d + c] += o * x[j * d + r];
                    }
                }
            }
        }
        out
    }
}

impl BlockCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let d = self.d;
        let s = d * d;
        let nb = rhs.len() / d;
        let mut y = rhs.to_vec();
        for j in 0..nb {
            if j > 0 {
                let (prev, cur) = y.split_at_mut(j * d);
                let yp = &prev[(j - 1) * d..];
                let bj = &self.b[(j - 1) * s..j * s];
                for r in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += bj[r * d + k] * yp[k];
                    }
                    cur[r] -= acc;
                }
            }
            forward(&self.l[j * s..(j + 1) * s], d, &mut y[j * d..(j + 1) * d]);
        }
        for j in (0..nb).rev() {
            if j + 1 < nb {
                let (cur, next) = y.split_at_mut((j + 1) * d);
                let xn = &next[..d];
                let bj = &self.b[j * s..(j + 1) * s];
                for k in 0..d {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += bj[r * d + k] * xn[r];
                    }
                    cur[j * d + k] -= acc;
                }
            }
            backward(&self.l[j * s..(j + 1) * s], d, &mut y[j * d..(j + 1) * d]);
        }
        y
    }
}

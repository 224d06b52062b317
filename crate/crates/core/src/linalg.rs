//! Fixed-size complex linear algebra for two-qubit operators.
//!
//! Everything in this crate lives in a 4-dimensional Hilbert space, so the
//! matrix type is a plain `[[Complex64; 4]; 4]` wrapper and the eigensolver
//! is a cyclic Jacobi iteration on the 8x8 real-symmetric embedding of a
//! Hermitian matrix. No pivoting heuristics, no allocation, deterministic
//! output for identical input bits.

use num_complex::Complex64;

/// Off-diagonal Frobenius norm below which the Jacobi sweep stops.
const JACOBI_CONVERGENCE: f64 = 1e-13;

/// Hard cap on Jacobi sweeps; an 8x8 symmetric problem converges in well
/// under ten sweeps, so hitting this means the input was not Hermitian.
const JACOBI_MAX_SWEEPS: usize = 64;

/// A dense 4x4 complex matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix4c {
    pub m: [[Complex64; 4]; 4],
}

impl Matrix4c {
    pub fn zero() -> Self {
        Matrix4c {
            m: [[Complex64::new(0.0, 0.0); 4]; 4],
        }
    }

    pub fn identity() -> Self {
        let mut out = Self::zero();
        for i in 0..4 {
            out.m[i][i] = Complex64::new(1.0, 0.0);
        }
        out
    }

    /// Kronecker product of two 2x2 blocks, ordered (first ⊗ second).
    pub fn kron(a: &[[Complex64; 2]; 2], b: &[[Complex64; 2]; 2]) -> Self {
        let mut out = Self::zero();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        out.m[2 * i + k][2 * j + l] = a[i][j] * b[k][l];
                    }
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix4c) -> Matrix4c {
        let mut out = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                out.m[i][j] = self.m[i][j] + other.m[i][j];
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix4c) -> Matrix4c {
        let mut out = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                out.m[i][j] = self.m[i][j] - other.m[i][j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix4c {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix4c) -> Matrix4c {
        let mut out = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..4 {
                    acc += self.m[i][k] * other.m[k][j];
                }
                out.m[i][j] = acc;
            }
        }
        out
    }

    pub fn adjoint(&self) -> Matrix4c {
        let mut out = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                out.m[i][j] = self.m[j][i].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> Complex64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2] + self.m[3][3]
    }

    /// Largest entrywise |self - other|.
    pub fn max_abs_diff(&self, other: &Matrix4c) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                worst = worst.max((self.m[i][j] - other.m[i][j]).norm());
            }
        }
        worst
    }

    /// Largest entrywise deviation from the adjoint, i.e. max |M - M†|.
    pub fn hermiticity_defect(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }

    /// Outer product |v⟩⟨v| of a 4-component vector.
    pub fn outer(v: &[Complex64; 4]) -> Matrix4c {
        let mut out = Self::zero();
        for i in 0..4 {
            for j in 0..4 {
                out.m[i][j] = v[i] * v[j].conj();
            }
        }
        out
    }

    /// Quadratic form ⟨v|M|v⟩; real part only, which is exact for
    /// Hermitian M and unit v.
    pub fn quadratic_form(&self, v: &[Complex64; 4]) -> f64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                acc += v[i].conj() * self.m[i][j] * v[j];
            }
        }
        acc.re
    }

    /// Eigenvalues of a Hermitian matrix, ascending.
    ///
    /// The Hermitian matrix H = A + iB is embedded as the real-symmetric
    /// 8x8 block matrix [[A, -B], [B, A]], whose spectrum is that of H
    /// with every eigenvalue doubled. A cyclic Jacobi iteration
    /// diagonalizes the embedding; sorting the eight values and taking
    /// every second one undoes the doubling regardless of how numerical
    /// noise orders near-degenerate pairs.
    pub fn hermitian_eigenvalues(&self) -> [f64; 4] {
        let mut s = [[0.0f64; 8]; 8];
        for i in 0..4 {
            for j in 0..4 {
                let re = self.m[i][j].re;
                let im = self.m[i][j].im;
                s[i][j] = re;
                s[i + 4][j + 4] = re;
                s[i][j + 4] = -im;
                s[i + 4][j] = im;
            }
        }
        let eigs8 = jacobi_symmetric_8(&mut s);
        [eigs8[0], eigs8[2], eigs8[4], eigs8[6]]
    }
}

fn off_diagonal_norm(s: &[[f64; 8]; 8]) -> f64 {
    let mut acc = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            if i != j {
                acc += s[i][j] * s[i][j];
            }
        }
    }
    acc.sqrt()
}

/// Cyclic Jacobi eigenvalue iteration for an 8x8 real symmetric matrix.
/// Eigenvectors are not accumulated. Returns eigenvalues sorted ascending.
fn jacobi_symmetric_8(s: &mut [[f64; 8]; 8]) -> [f64; 8] {
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(s) < JACOBI_CONVERGENCE {
            break;
        }
        for p in 0..7 {
            for q in (p + 1)..8 {
                let apq = s[p][q];
                if apq == 0.0 {
                    continue;
                }
                // Standard Jacobi rotation choosing the smaller angle.
                let theta = (s[q][q] - s[p][p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                for k in 0..8 {
                    let skp = s[k][p];
                    let skq = s[k][q];
                    s[k][p] = c * skp - sn * skq;
                    s[k][q] = sn * skp + c * skq;
                }
                for k in 0..8 {
                    let spk = s[p][k];
                    let sqk = s[q][k];
                    s[p][k] = c * spk - sn * sqk;
                    s[q][k] = sn * spk + c * sqk;
                }
                // Force exact symmetry on the annihilated pair.
                s[p][q] = 0.0;
                s[q][p] = 0.0;
            }
        }
    }
    let mut eigs = [0.0f64; 8];
    for i in 0..8 {
        eigs[i] = s[i][i];
    }
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    eigs
}

//! Dense polynomials of total degree ≤ 4 in three variables.

use std::sync::OnceLock;

use nalgebra::{SMatrix, Vector3};

use crate::scalar::Real;

pub const MAX_DEGREE: usize = 4;
/// Number of monomials of total degree ≤ 4 in three variables.
pub const N_MONOMIALS: usize = 35;

struct Table {
    exps: Vec<[u8; 3]>,
    index: [[[usize; 5]; 5]; 5],
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut exps = Vec::with_capacity(N_MONOMIALS);
        let mut index = [[[usize::MAX; 5]; 5]; 5];
        for deg in 0..=MAX_DEGREE as u8 {
            for a in (0..=deg).rev() {
                for b in (0..=deg - a).rev() {
                    let c = deg - a - b;
                    index[a as usize][b as usize][c as usize] = exps.len();
                    exps.push([a, b, c]);
                }
            }
        }
        Table { exps, index }
    })
}

/// Exponents of every monomial, graded by total degree.
pub fn exponents() -> &'static [[u8; 3]] {
    &table().exps
}

fn index_of(e: [u8; 3]) -> usize {
    table().index[e[0] as usize][e[1] as usize][e[2] as usize]
}

/// The ten quadratic monomials of the Cayley rotation numerator:
/// `1, s₁, s₂, s₃, s₁², s₂², s₃², s₁s₂, s₁s₃, s₂s₃`.
pub const CAYLEY_MONOMIALS: [[u8; 3]; 10] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [0, 2, 0],
    [0, 0, 2],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Poly3<T: Real> {
    pub coeffs: [T; N_MONOMIALS],
}

impl<T: Real> Poly3<T> {
    pub fn zero() -> Self {
        Self {
            coeffs: [T::zero(); N_MONOMIALS],
        }
    }

    /// `½ mᵀ H m` with `m` the [`CAYLEY_MONOMIALS`].
    pub fn from_quadratic_form(h: &SMatrix<T, 10, 10>) -> Self {
        let mut p = Self::zero();
        let half = T::lit(0.5);
        for i in 0..10 {
            for j in 0..10 {
                let a = CAYLEY_MONOMIALS[i];
                let b = CAYLEY_MONOMIALS[j];
                let e = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                p.coeffs[index_of(e)] += h[(i, j)] * half;
            }
        }
        p
    }

    /// Partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Self {
        let mut out = Self::zero();
        for (k, e) in exponents().iter().enumerate() {
            if e[var] == 0 || self.coeffs[k] == T::zero() {
                continue;
            }
            let mut d = *e;
            d[var] -= 1;
            out.coeffs[index_of(d)] += self.coeffs[k] * T::from_usize_lossy(e[var] as usize);
        }
        out
    }

    pub fn eval(&self, s: &Vector3<T>) -> T {
        let mut pw = [[T::one(); MAX_DEGREE + 1]; 3];
        for v in 0..3 {
            for k in 1..=MAX_DEGREE {
                pw[v][k] = pw[v][k - 1] * s[v];
            }
        }
        exponents()
            .iter()
            .zip(self.coeffs.iter())
            .fold(T::zero(), |acc, (e, &c)| {
                acc + c * pw[0][e[0] as usize] * pw[1][e[1] as usize] * pw[2][e[2] as usize]
            })
    }

    pub fn degree(&self) -> usize {
        exponents()
            .iter()
            .zip(self.coeffs.iter())
            .filter(|(_, c)| **c != T::zero())
            .map(|(e, _)| (e[0] + e[1] + e[2]) as usize)
            .max()
            .unwrap_or(0)
    }
}

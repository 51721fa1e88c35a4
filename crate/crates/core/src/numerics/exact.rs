//! Exact linear algebra over the integers and rationals.
//!
//! Stoichiometric kernels are algebraic objects; floating-point rank
//! decisions would silently turn conservation laws on or off. Everything
//! here runs in `BigRational`, with integer outputs scaled to primitive
//! vectors.

use num::rational::BigRational;
use num::{BigInt, Signed, Zero};

/// Dense rational matrix, row major.
#[derive(Debug, Clone)]
pub struct RationalMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<BigRational>,
}

impl RationalMatrix {
    pub fn from_i64_rows(rows: &[Vec<i64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            for &v in row {
                data.push(BigRational::from(BigInt::from(v)));
            }
        }
        Self { rows: r, cols: c, data }
    }

    pub fn at(&self, i: usize, j: usize) -> &BigRational {
        &self.data[i * self.cols + j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut BigRational {
        &mut self.data[i * self.cols + j]
    }

    /// Transpose.
    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.at(i, j).clone());
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    /// Reduced row echelon form; returns the pivot columns.
    pub fn rref(&mut self) -> Vec<usize> {
        let mut pivots = Vec::new();
        let mut row = 0;
        for col in 0..self.cols {
            if row == self.rows {
                break;
            }
            // Find a nonzero pivot in this column at or below `row`.
            let Some(p) = (row..self.rows).find(|&r| !self.at(r, col).is_zero()) else {
                continue;
            };
            if p != row {
                for j in 0..self.cols {
                    let a = self.at(p, j).clone();
                    let b = self.at(row, j).clone();
                    *self.at_mut(p, j) = b;
                    *self.at_mut(row, j) = a;
                }
            }
            let inv = self.at(row, col).clone();
            for j in 0..self.cols {
                let v = self.at(row, j).clone() / inv.clone();
                *self.at_mut(row, j) = v;
            }
            for r in 0..self.rows {
                if r != row && !self.at(r, col).is_zero() {
                    let factor = self.at(r, col).clone();
                    for j in 0..self.cols {
                        let v = self.at(r, j).clone() - factor.clone() * self.at(row, j).clone();
                        *self.at_mut(r, j) = v;
                    }
                }
            }
            pivots.push(col);
            row += 1;
        }
        pivots
    }
}

/// Exact rank of an integer matrix.
pub fn rank_i64(rows: &[Vec<i64>]) -> usize {
    let mut m = RationalMatrix::from_i64_rows(rows);
    m.rref().len()
}

/// Exact basis of the right null space `{x : M x = 0}` of an integer matrix,
/// returned as primitive integer vectors (rational kernel cleared of
/// denominators, divided by the gcd, sign-normalized).
pub fn integer_kernel_basis(rows: &[Vec<i64>], cols: usize) -> Vec<Vec<BigInt>> {
    if rows.is_empty() {
        // Everything is in the kernel: identity basis.
        return (0..cols)
            .map(|i| {
                (0..cols)
                    .map(|j| if i == j { BigInt::from(1) } else { BigInt::zero() })
                    .collect()
            })
            .collect();
    }
    let mut m = RationalMatrix::from_i64_rows(rows);
    let pivots = m.rref();
    let free: Vec<usize> = (0..cols).filter(|c| !pivots.contains(c)).collect();
    let mut basis = Vec::with_capacity(free.len());
    for &fc in &free {
        let mut v = vec![BigRational::zero(); cols];
        v[fc] = BigRational::from(BigInt::from(1));
        for (r, &pc) in pivots.iter().enumerate() {
            v[pc] = -m.at(r, fc).clone();
        }
        basis.push(primitive_integer(&v));
    }
    basis
}

/// Row-space basis of an integer matrix as primitive integer vectors.
pub fn integer_row_space_basis(rows: &[Vec<i64>]) -> Vec<Vec<BigInt>> {
    let mut m = RationalMatrix::from_i64_rows(rows);
    let pivots = m.rref();
    (0..pivots.len())
        .map(|r| {
            let v: Vec<BigRational> = (0..m.cols).map(|j| m.at(r, j).clone()).collect();
            primitive_integer(&v)
        })
        .collect()
}

/// Clears denominators and common factors, making the leading nonzero entry
/// positive.
fn primitive_integer(v: &[BigRational]) -> Vec<BigInt> {
    let mut lcm = BigInt::from(1);
    for x in v {
        if !x.is_zero() {
            lcm = num::integer::lcm(lcm, x.denom().clone());
        }
    }
    let mut ints: Vec<BigInt> = v.iter().map(|x| (x * BigRational::from(lcm.clone())).to_integer()).collect();
    let mut gcd = BigInt::zero();
    for x in &ints {
        gcd = num::integer::gcd(gcd, x.clone());
    }
    if !gcd.is_zero() {
        for x in ints.iter_mut() {
            *x /= gcd.clone();
        }
    }
    if let Some(first) = ints.iter().find(|x| !x.is_zero()) {
        if first.is_negative() {
            for x in ints.iter_mut() {
                *x = -x.clone();
            }
        }
    }
    ints
}

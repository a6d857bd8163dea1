//! Plain slice kernels shared by the tape and by non-differentiable callers.

use super::grid::Real;

/// Row-major `[m,k] x [k,n]` product into a fresh buffer.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    F::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, &mut c, n as isize, 1, false);
    c
}

/// Normalizes `row` in place to a probability vector over admissible
/// entries; inadmissible entries become exactly zero. Returns `false` when
/// no entry is admissible.
pub fn softmax_in_place<F: Real>(row: &mut [F], mask: Option<&[bool]>) -> bool {
    let admissible = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if admissible(j) && x > max {
            max = x;
        }
    }
    if max == F::neg_infinity() {
        return false;
    }
    let mut total = F::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if admissible(j) {
            *x = (*x - max).exp();
            total = total + *x;
        } else {
            *x = F::zero();
        }
    }
    let inv = F::one() / total;
    row.iter_mut().for_each(|x| *x = *x * inv);
    true
}

/// `log(sum(exp(row)))`, computed stably.
pub fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7]), 1);
    }

    #[test]
    fn softmax_rejects_fully_masked() {
        let mut row = [1.0f64, 2.0];
        assert!(!softmax_in_place(&mut row, Some(&[false, false])));
    }
}

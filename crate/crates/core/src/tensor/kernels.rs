//! Plain-loop kernels written so the compiler can vectorise them.

const MR: usize = 4;
const NR: usize = 8;

/// c[m,n] = a[m,k] * b[k,n]
///
/// Register-tiled: each `MR x NR` tile of `c` is accumulated in locals over
/// ascending `p` and written once. Every entry is summed in the same order as
/// the textbook triple loop, so the result is bitwise independent of tiling.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
    let mut c = alloc::vec![0.0; m * n];
    gemm(a, b, &mut c, m, k, n);
    c
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let (mf, nf) = (m - m % MR, n - n % NR);
    let mut panel = alloc::vec![0.0; k * NR];
    for j in (0..nf).step_by(NR) {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        for i in (0..mf).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bp: &[f64; NR] = panel[p * NR..(p + 1) * NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        acc[r][q] += av * bp[q];
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
            }
        }
    }
    for i in 0..m {
        let js = if i < mf { nf } else { 0 };
        for j in js..n {
            c[i * n + j] = column_dot(a, b, i, j, k, n);
        }
    }
}

#[inline]
fn column_dot(a: &[f64], b: &[f64], i: usize, j: usize, k: usize, n: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..k {
        s += a[i * k + p] * b[p * n + j];
    }
    s
}

/// da[m,k] += dc[m,n] * b[k,n]^T
pub fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    let prod = matmul(dc, &bt, m, n, k);
    da.iter_mut().zip(prod).for_each(|(d, x)| *d += x);
}

/// db[k,n] += a[m,k]^T * dc[m,n]
pub fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    let prod = matmul(&at, dc, k, m, n);
    db.iter_mut().zip(prod).for_each(|(d, x)| *d += x);
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> alloc::vec::Vec<f64> {
    let mut t = alloc::vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

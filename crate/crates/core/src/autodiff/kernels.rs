//! Dense kernels shared by forward and backward rules.

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(x)` is
/// `x` or its transpose. `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m == 1 || k == 1 {
        return gemv_like(trans_b, k, n, a, b, beta, c);
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches is
    // inside the slices for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-vector products and outer products. The blocked kernel repacks its
/// right operand on every call, which dominates when one side is a vector.
fn gemv_like(trans_b: bool, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if k == 1 {
        // op(a) is an m-vector and op(b) an n-vector regardless of transposes.
        for (row, &ai) in c.chunks_exact_mut(n).zip(a) {
            axpy(ai, b, row);
        }
    } else if trans_b {
        // b is stored n×k; each output is a dot product with one row.
        for (cj, brow) in c.iter_mut().zip(b.chunks_exact(k)) {
            *cj += dot(a, brow);
        }
    } else {
        for (&ap, brow) in a.iter().zip(b.chunks_exact(n)) {
            axpy(ap, brow, c);
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    acc.iter().sum::<f64>() + tail
}

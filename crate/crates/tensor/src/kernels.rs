//! Numeric kernels shared by the forward and reverse passes.

use crate::tensor::Tensor;

/// `c = op(a) @ op(b) + beta * c` with `op(a): [m, k]`, `op(b): [k, n]`,
/// `c: [m, n]`, all row-major. With `ta`, `a` is stored as `[k, m]`; with
/// `tb`, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided views require
    // (asserted above) and `c` does not alias `a` or `b`.
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

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let own = crate::tensor::strides(shape);
    (0..r)
        .map(|i| {
            if i + shape.len() < r {
                0
            } else {
                let j = i + shape.len() - r;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visit every output element of a broadcast with its input offsets.
pub fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if a == out && b == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let bn: usize = b.iter().product();
    if a == out && is_suffix(b, out) {
        for c in 0..total / bn {
            let base = c * bn;
            for j in 0..bn {
                f(base + j, base + j, j);
            }
        }
        return;
    }
    let an: usize = a.iter().product();
    if b == out && is_suffix(a, out) {
        for c in 0..total / an {
            let base = c * an;
            for j in 0..an {
                f(base + j, j, base + j);
            }
        }
        return;
    }
    let r = out.len();
    let (sa, sb) = (aligned_strides(a, out), aligned_strides(b, out));
    let inner = out[r - 1];
    let (ia_step, ib_step) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let mut o = 0;
    for _ in 0..total / inner {
        let mut ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let mut ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// `shape` (after dropping leading ones) equals the trailing axes of `out`.
fn is_suffix(shape: &[usize], out: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed
}

pub fn broadcast_map(out: &[usize], a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (av, bv) = (a.data(), b.data());
    if a.shape() == out && b.shape() == out {
        return av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(out, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(av[ia], bv[ib]);
    });
    data
}

/// `(prefix, len, suffix)` element counts around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-column mean and biased variance of a `[rows, cols]` matrix.
pub fn column_moments(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = rows.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for row in data.chunks(cols) {
        for j in 0..cols {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn general_broadcast_offsets() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 1], |i| 10.0 * i as f64);
        let out = broadcast_map(&[2, 4, 3], &a, &b, |x, y| x + y);
        let t = Tensor::new(&[2, 4, 3], out).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(t.at(&[i, j, k]), a.at(&[i, 0, k]) + b.at(&[j, 0]));
                }
            }
        }
    }
}

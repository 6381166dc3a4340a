//! Eigenvalues of general real matrices: Householder reduction to upper
//! Hessenberg form followed by the Francis double-shift QR iteration.

use super::matrix::Matrix;
use crate::error::{invalid, Error, Result};

/// A complex number as a `(re, im)` pair.
pub type Complex = (f64, f64);

pub const MAX_EIG_DIM: usize = 64;

/// All eigenvalues of `m`, unordered. Complex eigenvalues come in conjugate
/// pairs.
pub fn eigvals(m: &Matrix) -> Result<Vec<Complex>> {
    if !m.is_square() {
        return Err(invalid(format!("eigvals of non-square {}x{} matrix", m.rows(), m.cols())));
    }
    if m.rows() > MAX_EIG_DIM {
        return Err(invalid(format!("eigvals supports dimension <= {MAX_EIG_DIM}")));
    }
    if !m.is_finite() {
        return Err(invalid("eigvals of a matrix with non-finite entries"));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    hessenberg(&mut h);
    hqr(h)
}

fn hessenberg(h: &mut [Vec<f64>]) {
    let n = h.len();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i][m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hsum = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hsum += ort[i] * ort[i];
        }
        let mut g = hsum.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hsum -= ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let f = (m..=high).rev().map(|i| ort[i] * h[i][j]).sum::<f64>() / hsum;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for row in h.iter_mut().take(high + 1) {
            let f = (m..=high).rev().map(|j| ort[j] * row[j]).sum::<f64>() / hsum;
            for j in m..=high {
                row[j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m][m - 1] = scale * g;
    }
}

fn hqr(mut h: Vec<Vec<f64>>) -> Result<Vec<Complex>> {
    let nn = h.len();
    let mut d = vec![0.0; nn];
    let mut e = vec![0.0; nn];
    let eps = f64::EPSILON;
    let low: isize = 0;
    let mut n = nn as isize - 1;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
    let (mut s, mut z);
    let (mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[i][j].abs();
        }
    }
    if norm == 0.0 {
        return Ok(vec![(0.0, 0.0); nn]);
    }

    let max_total_iter = 60 * nn.max(1);
    let mut total_iter = 0usize;
    let mut iter = 0;
    macro_rules! at {
        ($i:expr, $j:expr) => {
            h[($i) as usize][($j) as usize]
        };
    }

    while n >= low {
        let mut l = n;
        while l > low {
            s = at!(l - 1, l - 1).abs() + at!(l, l).abs();
            if s == 0.0 {
                s = norm;
            }
            if at!(l, l - 1).abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            at!(n, n) += exshift;
            d[n as usize] = at!(n, n);
            e[n as usize] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            w = at!(n, n - 1) * at!(n - 1, n);
            p = (at!(n - 1, n - 1) - at!(n, n)) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            at!(n, n) += exshift;
            at!(n - 1, n - 1) += exshift;
            x = at!(n, n);
            let (nu, n1) = (n as usize, (n - 1) as usize);
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                d[n1] = x + z;
                d[nu] = d[n1];
                if z != 0.0 {
                    d[nu] = x - w / z;
                }
                e[n1] = 0.0;
                e[nu] = 0.0;
            } else {
                d[n1] = x + p;
                d[nu] = x + p;
                e[n1] = z;
                e[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            x = at!(n, n);
            y = 0.0;
            w = 0.0;
            if l < n {
                y = at!(n - 1, n - 1);
                w = at!(n, n - 1) * at!(n - 1, n);
            }
            // Exceptional shifts break cycles on pathological inputs.
            if iter == 10 {
                exshift += x;
                for i in low..=n {
                    at!(i, i) -= x;
                }
                s = at!(n, n - 1).abs() + at!(n - 1, n - 2).abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=n {
                        at!(i, i) -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            total_iter += 1;
            if total_iter > max_total_iter {
                let last = (0..nn).map(|i| h[i][i]).collect();
                return Err(Error::NoConvergence { iterations: total_iter, last_iterate: last });
            }

            let mut m = n - 2;
            while m >= l {
                z = at!(m, m);
                r = x - z;
                s = y - z;
                p = (r * s - w) / at!(m + 1, m) + at!(m, m + 1);
                q = at!(m + 1, m + 1) - z - r - s;
                r = at!(m + 2, m + 1);
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if at!(m, m - 1).abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (at!(m - 1, m - 1).abs() + z.abs() + at!(m + 1, m + 1).abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in (m + 2)..=n {
                at!(i, i - 2) = 0.0;
                if i > m + 2 {
                    at!(i, i - 3) = 0.0;
                }
            }

            let mut k = m;
            while k < n {
                let notlast = k != n - 1;
                if k != m {
                    p = at!(k, k - 1);
                    q = at!(k + 1, k - 1);
                    r = if notlast { at!(k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        at!(k, k - 1) = -s * x;
                    } else if l != m {
                        at!(k, k - 1) = -at!(k, k - 1);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn as isize {
                        p = at!(k, j) + q * at!(k + 1, j);
                        if notlast {
                            p += r * at!(k + 2, j);
                            at!(k + 2, j) -= p * z;
                        }
                        at!(k, j) -= p * x;
                        at!(k + 1, j) -= p * y;
                    }
                    let imax = n.min(k + 3);
                    for i in 0..=imax {
                        p = x * at!(i, k) + y * at!(i, k + 1);
                        if notlast {
                            p += z * at!(i, k + 2);
                            at!(i, k + 2) -= p * r;
                        }
                        at!(i, k) -= p;
                        at!(i, k + 1) -= p * q;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(d.into_iter().zip(e).collect())
}

pub fn modulus(c: Complex) -> f64 {
    c.0.hypot(c.1)
}

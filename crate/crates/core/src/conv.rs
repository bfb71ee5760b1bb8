//! 3x3 same-padded convolutions lowered to GEMM via im2col.
//!
//! Planes are channel-major (`[channel][row][col]`). Weights for one layer are
//! a row-major `[out][in * 9]` matrix whose column index is `c * 9 + ky * 3 + kx`.

use std::ops::{Add, AddAssign, Mul};

pub(crate) const KERNEL: usize = 3;
pub(crate) const TAPS: usize = KERNEL * KERNEL;

pub trait Real: Copy + Default + PartialOrd + Add<Output = Self> + Mul<Output = Self> + AddAssign + Send + Sync {
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;

    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
                    (rows - 1) * rs + (cols - 1) * cs
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of range");
                    assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of range");
                }
                assert!(last(m, n, rsc, 1) < c.len(), "gemm: C out of range");
                // SAFETY: the asserts above bound every index gemm touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);

/// Unfolds `channels` planes into a `[channels * 9][h * w]` patch matrix.
pub(crate) fn im2col<T: Real>(input: &[T], channels: usize, h: usize, w: usize, cols: &mut Vec<T>) {
    let n = h * w;
    cols.clear();
    cols.resize(channels * TAPS * n, T::ZERO);
    for c in 0..channels {
        let plane = &input[c * n..(c + 1) * n];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(c * TAPS + ky * KERNEL + kx) * n..][..n];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = &plane[sr as usize * w..][..w];
                    let dst = &mut row[r * w..][..w];
                    let (c0, c1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    let d0 = (-dx).max(0) as usize;
                    dst[d0..d0 + (c1 - c0)].copy_from_slice(&src[c0..c1]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch-matrix gradient back onto planes.
pub(crate) fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::ZERO; channels * n];
    for c in 0..channels {
        let plane = &mut out[c * n..(c + 1) * n];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(c * TAPS + ky * KERNEL + kx) * n..][..n];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let (c0, c1) = (dx.max(0) as usize, (w as isize + dx.min(0)) as usize);
                    let d0 = (-dx).max(0) as usize;
                    let src = &row[r * w + d0..][..c1 - c0];
                    let dst = &mut plane[sr as usize * w + c0..][..c1 - c0];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// `out[o] = bias[o] + sum_j weights[o][j] * cols[j]`, for `outputs` rows of `n` pixels.
pub(crate) fn conv_forward<T: Real>(
    weights: &[T],
    bias: &[T],
    cols: &[T],
    inputs: usize,
    outputs: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; outputs * n];
    for (o, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(outputs, inputs * TAPS, n, weights, (inputs * TAPS, 1), cols, (n, 1), T::ONE, &mut out, n);
    out
}

/// Output channels accumulated together by [`conv_hwc`].
pub(crate) const LANES: usize = 8;

/// Rearranges `[outputs][inputs * 9]` weights into the `[tap][input][lane-padded output]`
/// layout [`conv_hwc`] reads.
pub(crate) fn weights_for_hwc(weights: &[f32], inputs: usize, outputs: usize) -> Vec<f32> {
    let padded = outputs.div_ceil(LANES) * LANES;
    let mut out = vec![0.0f32; TAPS * inputs * padded];
    for o in 0..outputs {
        for c in 0..inputs {
            for t in 0..TAPS {
                out[(t * inputs + c) * padded + o] = weights[(o * inputs + c) * TAPS + t];
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution on pixel-major (`[row][col][channel]`) planes,
/// for layers too narrow to amortize im2col and GEMM packing. `weights` comes
/// from [`weights_for_hwc`].
pub(crate) fn conv_hwc(
    weights: &[f32],
    bias: &[f32],
    input: &[f32],
    inputs: usize,
    outputs: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { conv_hwc_avx2(weights, bias, input, inputs, outputs, h, w) };
    }
    conv_hwc_body(weights, bias, input, inputs, outputs, h, w)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_hwc_avx2(
    weights: &[f32],
    bias: &[f32],
    input: &[f32],
    inputs: usize,
    outputs: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    conv_hwc_body(weights, bias, input, inputs, outputs, h, w)
}

/// Pixels per row processed together, each with its own accumulators.
const RUN: usize = 4;

#[inline(always)]
fn conv_hwc_body(
    weights: &[f32],
    bias: &[f32],
    input: &[f32],
    inputs: usize,
    outputs: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let padded = outputs.div_ceil(LANES) * LANES;
    assert_eq!(weights.len(), TAPS * inputs * padded);
    assert_eq!(input.len(), h * w * inputs);
    // Zero border so every tap reads in range.
    let pw = w + 2;
    let mut framed = vec![0.0f32; (h + 2) * pw * inputs];
    for r in 0..h {
        framed[((r + 1) * pw + 1) * inputs..][..w * inputs].copy_from_slice(&input[r * w * inputs..][..w * inputs]);
    }
    let mut out = vec![0.0f32; h * w * outputs];
    for r in 0..h {
        let mut c = 0;
        while c < w {
            if c + RUN <= w {
                run::<RUN>(weights, bias, &framed, &mut out, inputs, outputs, padded, pw, w, r, c);
                c += RUN;
            } else {
                run::<1>(weights, bias, &framed, &mut out, inputs, outputs, padded, pw, w, r, c);
                c += 1;
            }
        }
    }
    out
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn run<const N: usize>(
    weights: &[f32],
    bias: &[f32],
    framed: &[f32],
    out: &mut [f32],
    inputs: usize,
    outputs: usize,
    padded: usize,
    pw: usize,
    w: usize,
    r: usize,
    c: usize,
) {
    for block in (0..outputs).step_by(LANES) {
        let width = LANES.min(outputs - block);
        let mut acc = [[0.0f32; LANES]; N];
        for a in acc.iter_mut() {
            a[..width].copy_from_slice(&bias[block..block + width]);
        }
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let base = ((r + ky) * pw + c + kx) * inputs;
                let tap = &weights[(ky * KERNEL + kx) * inputs * padded..][..inputs * padded];
                for ci in 0..inputs {
                    let wv: &[f32; LANES] = tap[ci * padded + block..][..LANES].try_into().expect("lane block");
                    for (j, a) in acc.iter_mut().enumerate() {
                        let x = framed[base + j * inputs + ci];
                        for l in 0..LANES {
                            a[l] += wv[l] * x;
                        }
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            let p = r * w + c + j;
            out[p * outputs + block..][..width].copy_from_slice(&a[..width]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, used as the reference for the GEMM path.
    fn direct(input: &[f64], weights: &[f64], bias: &[f64], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = bias[o];
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sr, sc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                    continue;
                                }
                                acc += weights[o * cin * 9 + i * 9 + ky * 3 + kx]
                                    * input[i * h * w + sr as usize * w + sc as usize];
                            }
                        }
                    }
                    out[o * h * w + r * w + c] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + salt * 40503) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn gemm_conv_matches_direct() {
        let (cin, cout, h, w) = (3, 4, 5, 7);
        let input = pseudo(cin * h * w, 1);
        let weights = pseudo(cout * cin * 9, 2);
        let bias = pseudo(cout, 3);
        let mut cols = Vec::new();
        im2col(&input, cin, h, w, &mut cols);
        let got = conv_forward(&weights, &bias, &cols, cin, cout, h * w);
        let want = direct(&input, &weights, &bias, cin, cout, h, w);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn hwc_conv_matches_reference() {
        for (cin, cout) in [(3, 2), (4, 8), (2, 11)] {
            let (h, w) = (6, 5);
            let input = pseudo(cin * h * w, 7);
            let weights = pseudo(cout * cin * 9, 8);
            let bias = pseudo(cout, 9);
            let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
            let hwc: Vec<f32> = (0..h * w).flat_map(|p| (0..cin).map(move |c| (p, c))).map(|(p, c)| input[c * h * w + p] as f32).collect();
            let got = conv_hwc(&weights_for_hwc(&narrow(&weights), cin, cout), &narrow(&bias), &hwc, cin, cout, h, w);
            let want = direct(&input, &weights, &bias, cin, cout, h, w);
            for p in 0..h * w {
                for o in 0..cout {
                    assert!((got[p * cout + o] as f64 - want[o * h * w + p]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 6);
        let x = pseudo(c * h * w, 5);
        let y = pseudo(c * 9 * h * w, 6);
        let mut cols = Vec::new();
        im2col(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

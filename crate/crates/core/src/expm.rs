//! Dense matrix exponential by scaling and squaring with Padé approximants.
//!
//! Degree selection and the backward-error thresholds follow Higham's 2005
//! algorithm, which keeps the relative error at the level of unit roundoff.

use nalgebra::DMatrix;

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_230e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17_297_280.0,
    8_648_640.0,
    1_995_840.0,
    277_200.0,
    25_200.0,
    1_512.0,
    56.0,
    1.0,
];
const B9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `(V - U) R = V + U` for the Padé approximant `R`.
fn pade_solve(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for scaled arguments")
}

/// Low-degree approximant built from even powers `[I, A², A⁴, ...]`.
fn pade_low(a: &DMatrix<f64>, evens: &[DMatrix<f64>], b: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let mut u_inner = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for (k, pow) in evens.iter().enumerate() {
        u_inner += pow * b[2 * k + 1];
        v += pow * b[2 * k];
    }
    pade_solve(a * u_inner, v)
}

/// Matrix exponential `e^A`.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);
    if norm == 0.0 {
        return ident;
    }

    let a2 = a * a;
    if norm <= THETA_3 {
        return pade_low(a, &[ident, a2], &B3);
    }
    let a4 = &a2 * &a2;
    if norm <= THETA_5 {
        return pade_low(a, &[ident, a2, a4], &B5);
    }
    let a6 = &a4 * &a2;
    if norm <= THETA_7 {
        return pade_low(a, &[ident, a2, a4, a6], &B7);
    }
    if norm <= THETA_9 {
        let a8 = &a4 * &a4;
        return pade_low(a, &[ident, a2, a4, a6, a8], &B9);
    }

    let squarings = (norm / THETA_13).log2().ceil().max(0.0) as i32;
    let scale = 2f64.powi(-squarings);
    let a1 = a * scale;
    let a2 = a2 * scale.powi(2);
    let a4 = a4 * scale.powi(4);
    let a6 = a6 * scale.powi(6);

    let b = &B13;
    let u_hi = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_inner = &a6 * u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = &a1 * u_inner;
    let v_hi = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let mut r = pade_solve(u, v);
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

//! Branch-free elementwise activations over slices, written so the compiler
//! can vectorize them. An AVX2 build of each loop is selected at run time;
//! both builds perform the same operations in the same order, so results
//! are bit-identical across machines.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const LN2: f64 = std::f64::consts::LN_2;
const SQRT2: f64 = std::f64::consts::SQRT_2;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `exp(x)` for `x <= 0`; zero below the normal range.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    let xc = x.max(-708.0);
    let t = xc * LOG2E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    // Taylor series to r^13; |r| <= ln(2)/2 leaves a remainder below 1e-17.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits()).wrapping_add(1023);
    let scaled = p * f64::from_bits(k << 52);
    if x < -708.0 {
        0.0
    } else {
        scaled
    }
}

/// `ln(1 + e)` for `e` in `[0, 1]`.
#[inline(always)]
fn ln_1p_unit(e: f64) -> f64 {
    let u = 1.0 + e;
    let big = u > SQRT2;
    let m = if big { 0.5 * u } else { u };
    let k = if big { LN2 } else { 0.0 };
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // ln m = 2 atanh(s); |s| < 0.172 so eleven odd terms suffice.
    let mut q = 1.0 / 21.0;
    q = q * s2 + 1.0 / 19.0;
    q = q * s2 + 1.0 / 17.0;
    q = q * s2 + 1.0 / 15.0;
    q = q * s2 + 1.0 / 13.0;
    q = q * s2 + 1.0 / 11.0;
    q = q * s2 + 1.0 / 9.0;
    q = q * s2 + 1.0 / 7.0;
    q = q * s2 + 1.0 / 5.0;
    q = q * s2 + 1.0 / 3.0;
    q = q * s2 + 1.0;
    // Rounding error of `1 + e`, first order.
    let c = e - (u - 1.0);
    (2.0 * s * q + k) + c / u
}

#[inline(always)]
fn softplus_generic(z: &[f64], a: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
    for i in 0..z.len() {
        let x = z[i];
        let e = exp_nonpos(-x.abs());
        let r = 1.0 / (1.0 + e);
        a[i] = x.max(0.0) + ln_1p_unit(e);
        d1[i] = if x >= 0.0 { r } else { e * r };
        d2[i] = e * r * r;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline(always)]
fn gelu_generic(z: &[f64], a: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
    for i in 0..z.len() {
        let x = z[i];
        let u = GELU_C * (x + GELU_K * x * x * x);
        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
        let ddu = 6.0 * GELU_C * GELU_K * x;
        let e = exp_nonpos(-2.0 * u.abs());
        let mag = (1.0 - e) / (1.0 + e);
        let th = if u >= 0.0 { mag } else { -mag };
        let sech2 = 1.0 - th * th;
        a[i] = 0.5 * x * (1.0 + th);
        d1[i] = 0.5 * (1.0 + th) + 0.5 * x * sech2 * du;
        d2[i] = sech2 * du + 0.5 * x * sech2 * (ddu - 2.0 * th * du * du);
    }
}

macro_rules! dispatch {
    ($name:ident, $generic:ident, $avx:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx(z: &[f64], a: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
            $generic(z, a, d1, d2)
        }

        /// Value, first and second derivative for every element of `z`.
        pub(crate) fn $name(z: &[f64], a: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
            assert!(a.len() == z.len() && d1.len() == z.len() && d2.len() == z.len());
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected above.
                unsafe { $avx(z, a, d1, d2) };
                return;
            }
            $generic(z, a, d1, d2)
        }
    };
}

dispatch!(softplus_layer, softplus_generic, softplus_avx2);
dispatch!(gelu_layer, gelu_generic, gelu_avx2);

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..190_000 {
            let x = -(i as f64) * 3.7e-3;
            worst = worst.max(rel(exp_nonpos(x), x.exp()));
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(exp_nonpos(0.0), 1.0);
        assert!(exp_nonpos(-708.5) < 1e-307);
        assert_eq!(exp_nonpos(-1e4), 0.0);
    }

    #[test]
    fn ln_1p_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..=100_000 {
            let e = i as f64 / 100_000.0;
            worst = worst.max(rel(ln_1p_unit(e), e.ln_1p()));
        }
        for k in 1..300 {
            let e = 10f64.powf(-(k as f64) / 10.0);
            worst = worst.max(rel(ln_1p_unit(e), e.ln_1p()));
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(ln_1p_unit(0.0), 0.0);
    }

    #[test]
    fn layers_match_scalar_formulas() {
        let z: Vec<f64> = (0..2001).map(|i| (i as f64 - 1000.0) * 0.037).collect();
        let n = z.len();
        let (mut a, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        softplus_layer(&z, &mut a, &mut d1, &mut d2);
        for i in 0..n {
            let s = crate::nd::tape::sigmoid(z[i]);
            assert!(rel(a[i], crate::nd::tape::softplus(z[i])) < 1e-15);
            assert!(rel(d1[i], s) < 1e-15);
            let e = (-z[i].abs()).exp();
            assert!(rel(d2[i], e / ((1.0 + e) * (1.0 + e))) < 1e-14);
        }
        gelu_layer(&z, &mut a, &mut d1, &mut d2);
        for i in 0..n {
            let u = GELU_C * (z[i] + GELU_K * z[i].powi(3));
            assert!((a[i] - 0.5 * z[i] * (1.0 + u.tanh())).abs() < 1e-15 * z[i].abs().max(1.0));
        }
    }
}

//! Branch-free `exp` that the compiler can vectorize. Relative error stays
//! within a few ulp over the clamped range, which is all the activations
//! and softmax need.

use std::mem::MaybeUninit;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// Adding then subtracting 1.5 * 2^52 rounds to the nearest integer and
// leaves that integer in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;

#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    let x = x.clamp(-700.0, 700.0);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 12 on |r| <= ln2/2, Horner form.
    let mut p = 1.0 / 479_001_600.0;
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
    // Low bits of `shifted` hold n in two's complement; build 2^n directly.
    let bits = shifted.to_bits().wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

/// Defines a function whose body is compiled once per vector width and
/// dispatched on the CPU at run time. Only plain IEEE arithmetic gets
/// widened (no fused multiply-add), so every path gives identical bits.
macro_rules! wide_fn {
    ($(#[$meta:meta])* $vis:vis fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$meta])*
        $vis fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                fn avx512($($arg: $ty),*) $(-> $ret)? $body
                #[target_feature(enable = "avx2")]
                fn avx2($($arg: $ty),*) $(-> $ret)? $body
                if std::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected just above.
                    return unsafe { avx512($($arg),*) };
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $body
        }
    };
}
pub(crate) use wide_fn;

/// Builds a vector of `len` values written by `fill`, skipping the zero
/// fill that `vec![0.0; len]` would spend on a buffer about to be overwritten.
pub(crate) fn collect_with(len: usize, fill: impl FnOnce(&mut [MaybeUninit<f64>])) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let spare = &mut out.spare_capacity_mut()[..len];
    fill(spare);
    // SAFETY: callers write every slot of `spare`; the kernels below iterate
    // over the whole slice.
    unsafe { out.set_len(len) };
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_libm_at_landmarks() {
        for x in [0.0, 1.0, -1.0, 0.5, 10.0, -10.0, 700.0, -700.0, 1e-300] {
            let (a, b) = (exp(x), x.exp());
            assert!(((a - b) / b).abs() < 4.0 * f64::EPSILON, "{x}: {a} vs {b}");
        }
        assert_eq!(exp(0.0), 1.0);
        assert!(exp(-1e6) > 0.0 && exp(1e6).is_finite());
    }

    proptest! {
        #[test]
        fn relative_error_is_a_few_ulp(x in -700.0f64..700.0) {
            let (a, b) = (exp(x), x.exp());
            prop_assert!(((a - b) / b).abs() < 4.0 * f64::EPSILON);
        }
    }
}

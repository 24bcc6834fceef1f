//! Standard normal and Kolmogorov distribution functions.

use crate::float::Real;

/// Standard normal density.
#[inline]
pub fn std_normal_pdf<T: Real>(z: T) -> T {
    let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(z * z) * T::lit(0.5)).exp()
}

/// Standard normal CDF, `0.5 * erfc(-z / sqrt(2))`.
#[inline]
pub fn std_normal_cdf<T: Real>(z: T) -> T {
    T::lit(0.5) * (-z * T::FRAC_1_SQRT_2()).erfc()
}

/// Inverse standard normal CDF for `p` in `(0, 1)`.
///
/// Wichura's AS 241 rational approximation followed by one Newton step on
/// the erfc-based CDF. Returns NaN outside the open unit interval.
pub fn std_normal_quantile<T: Real>(p: T) -> T {
    if !(p > T::zero() && p < T::one()) {
        return T::nan();
    }
    let pf = p.as_f64();
    let q = pf - 0.5;
    let x = if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        q * poly(&AS241_A, r) / poly(&AS241_B, r)
    } else {
        let r = if q < 0.0 { pf } else { 1.0 - pf };
        let r = (-r.ln()).sqrt();
        let v = if r <= 5.0 {
            let r = r - 1.6;
            poly(&AS241_C, r) / poly(&AS241_D, r)
        } else {
            let r = r - 5.0;
            poly(&AS241_E, r) / poly(&AS241_F, r)
        };
        if q < 0.0 {
            -v
        } else {
            v
        }
    };
    let mut x = T::lit(x);
    let dens = std_normal_pdf(x);
    if dens > T::zero() {
        let step = (std_normal_cdf(x) - p) / dens;
        if step.is_finite() {
            x -= step;
        }
    }
    x
}

fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_608,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const AS241_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
///
/// Uses the alternating series for large `lambda` and the theta-function
/// series for small `lambda`, each truncated once terms drop below 1e-17.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let w = -pi2 / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 0..64 {
            let j = (2 * k + 1) as f64;
            let term = (w * j * j).exp();
            s += term;
            if term < 1e-17 {
                break;
            }
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * s;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        let mut sign = 1.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            s += sign * term;
            if term < 1e-17 {
                break;
            }
            sign = -sign;
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if std_normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        for &p in &[1e-12, 1e-6, 0.001, 0.02425, 0.1, 0.3, 0.5, 0.7, 0.9, 0.975, 0.999999] {
            let q = std_normal_quantile(p);
            assert!((q - bisect_quantile(p)).abs() < 1e-9, "p={p}: {q}");
        }
        assert!((std_normal_quantile(0.9f64) - 1.281_552).abs() < 1e-6);
    }

    #[test]
    fn quantile_out_of_domain_is_nan() {
        assert!(std_normal_quantile(0.0f64).is_nan());
        assert!(std_normal_quantile(1.0f64).is_nan());
        assert!(std_normal_quantile(-0.5f64).is_nan());
    }

    #[test]
    fn cdf_symmetry_and_tails() {
        assert_eq!(std_normal_cdf(0.0f64), 0.5);
        assert!((std_normal_cdf(1.0f64) + std_normal_cdf(-1.0f64) - 1.0).abs() < 1e-15);
        assert!(std_normal_cdf(-40.0f64) < 1e-300);
        assert_eq!(std_normal_cdf(40.0f64), 1.0);
    }

    #[test]
    fn kolmogorov_series_agree_near_switch() {
        // both branches evaluated on either side of the switch point
        let a = kolmogorov_survival(1.1799999);
        let b = kolmogorov_survival(1.18);
        assert!((a - b).abs() < 1e-6);
        // known value: Q_KS(1.0) ~= 0.26999967
        assert!((kolmogorov_survival(1.0) - 0.269_999_67).abs() < 1e-7);
        assert!(kolmogorov_survival(0.1) > 0.999_999);
        assert!(kolmogorov_survival(5.0) < 1e-20);
    }
}

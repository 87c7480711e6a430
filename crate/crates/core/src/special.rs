//! Special functions: modified Bessel functions of the second kind and the
//! standard normal distribution.

use core::f64::consts::PI;

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SERIES_LIMIT: f64 = 2.0;
const MAX_ITER: usize = 10_000;

/// `K_0(x)` for `x > 0`.
pub fn bessel_k0(x: f64) -> Result<f64> {
    check_arg(x)?;
    Ok(if x <= SERIES_LIMIT { k01_series(x).0 } else { k01_steed(x).0 })
}

/// `K_1(x)` for `x > 0`.
pub fn bessel_k1(x: f64) -> Result<f64> {
    check_arg(x)?;
    Ok(if x <= SERIES_LIMIT { k01_series(x).1 } else { k01_steed(x).1 })
}

/// `K_ν(x)` for integer or half-integer `ν ≥ 0`.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    check_arg(x)?;
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::InvalidInput(alloc::format!("Bessel order must be >= 0, got {nu}")));
    }
    let twice = 2.0 * nu;
    if libm::fabs(twice - libm::round(twice)) > 1e-12 {
        return Err(Error::InvalidInput(alloc::format!(
            "Bessel K is implemented for integer and half-integer orders, got {nu}"
        )));
    }
    let twice = libm::round(twice) as u64;
    let (mut k_lo, mut k_hi, mut order) = if twice % 2 == 0 {
        let (k0, k1) = if x <= SERIES_LIMIT { k01_series(x) } else { k01_steed(x) };
        (k0, k1, 0.0)
    } else {
        let kh = libm::sqrt(PI / (2.0 * x)) * libm::exp(-x);
        (kh, kh * (1.0 + 1.0 / x), 0.5)
    };
    let target = twice as f64 / 2.0;
    if target == order {
        return Ok(k_lo);
    }
    // Upward recurrence is stable for K: K_{μ+1} = K_{μ-1} + (2μ/x) K_μ.
    order += 1.0;
    while order < target {
        let next = k_lo + 2.0 * order / x * k_hi;
        k_lo = k_hi;
        k_hi = next;
        order += 1.0;
    }
    Ok(k_hi)
}

fn check_arg(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(alloc::format!("Bessel K needs a positive argument, got {x}")))
    }
}

/// Ascending series for `(K_0, K_1)`, accurate for `x ≤ 2`.
fn k01_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let log_half = libm::log(0.5 * x);

    // term_k = q^k / (k!)^2 ; term1_k = q^k / (k! (k+1)!)
    let mut term = 1.0;
    let mut term1 = 1.0;
    let mut harmonic = 0.0; // H_k
    let mut i0 = 0.0;
    let mut i1_sum = 0.0;
    let mut k0_tail = 0.0;
    let mut k1_tail = 0.0;
    for k in 0..MAX_ITER {
        let kf = k as f64;
        let h_next = harmonic + 1.0 / (kf + 1.0);
        i0 += term;
        i1_sum += term1;
        k0_tail += term * harmonic;
        // ψ(k+1) + ψ(k+2) = H_k + H_{k+1} - 2γ
        k1_tail += term1 * (harmonic + h_next - 2.0 * EULER_GAMMA);
        if term1 < 1e-18 * i1_sum && term < 1e-18 * i0 {
            break;
        }
        term *= q / ((kf + 1.0) * (kf + 1.0));
        term1 *= q / ((kf + 1.0) * (kf + 2.0));
        harmonic = h_next;
    }
    let i1 = 0.5 * x * i1_sum;
    let k0 = -(log_half + EULER_GAMMA) * i0 + k0_tail;
    let k1 = 1.0 / x + log_half * i1 - 0.25 * x * k1_tail;
    (k0, k1)
}

/// Steed's continued fraction (Temme's CF2) for `(K_0, K_1)`, `x > 2`.
fn k01_steed(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if libm::fabs(dels / s) < 1e-17 {
            break;
        }
    }
    h *= a1;
    let k0 = libm::sqrt(PI / (2.0 * x)) * libm::exp(-x) / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - libm::log(sd) - 0.5 * libm::log(2.0 * PI)
}

/// Inverse standard normal CDF (Wichura's AS241, ~1e-16 relative).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if libm::fabs(q) <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                + 39307.89580009271061)
                * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = libm::sqrt(-libm::log(r));
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// `log Σ exp(v_i)`, stable; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

//! Fixed-point big-integer evaluation of K₀ and K₁ by their ascending
//! series; ~190 correct decimal digits before rounding to f64.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Fraction bits of the fixed-point representation.
const P: u32 = 640;

const EULER_GAMMA: &str = "0.57721566490153286060651209008240243104215933593992359880576723488486772677766467093694706329174674951463144724980708248096050401448654283622417399764492353625350033374293733773767394279259525824709491600873520394816567";

fn one() -> BigInt {
    BigInt::one() << P
}

fn mul(a: &BigInt, b: &BigInt) -> BigInt {
    (a * b) >> P
}

fn div(a: &BigInt, b: &BigInt) -> BigInt {
    (a << P) / b
}

fn from_f64(x: f64) -> BigInt {
    // exact: every finite f64 is m·2^e
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = if exp == 0 { (bits & ((1 << 52) - 1)) << 1 } else { (bits & ((1 << 52) - 1)) | (1 << 52) };
    let e = exp - 1075 + P as i64;
    let m = BigInt::from(mant);
    let v = if e >= 0 { m << e as u32 } else { m >> (-e) as u32 };
    if x < 0.0 {
        -v
    } else {
        v
    }
}

fn to_f64(v: &BigInt) -> f64 {
    // keep 64 significant bits before scaling
    let bits = v.bits() as i64;
    let shift = (bits - 64).max(0);
    let top = (v >> shift as u32).to_f64().unwrap();
    top * 2f64.powi((shift - P as i64) as i32)
}

fn parse_decimal(s: &str) -> BigInt {
    let (int, frac) = s.split_once('.').unwrap();
    let digits: BigInt = format!("{int}{frac}").parse().unwrap();
    let scale = BigInt::from(10).pow(frac.len() as u32);
    (digits << P) / scale
}

/// atanh(z) for |z| < 1/2.
fn atanh(z: &BigInt) -> BigInt {
    let z2 = mul(z, z);
    let mut term = z.clone();
    let mut sum = BigInt::zero();
    let mut k = 1u32;
    while !term.is_zero() {
        sum += &term / BigInt::from(k);
        term = mul(&term, &z2);
        k += 2;
    }
    sum
}

fn ln(x: &BigInt) -> BigInt {
    assert!(x.is_positive());
    let ln2 = atanh(&(one() / BigInt::from(3))) * 2;
    // x = m·2^k with m ∈ [1, 2)
    let k = x.bits() as i64 - 1 - P as i64;
    let m = if k >= 0 { x >> k as u32 } else { x << (-k) as u32 };
    let z = div(&(&m - one()), &(&m + one()));
    atanh(&z) * 2 + ln2 * BigInt::from(k)
}

/// Returns (K₀(x), K₁(x)) from the ascending series.
pub fn k0_k1(x: f64) -> (f64, f64) {
    let xb = from_f64(x);
    let q = mul(&xb, &xb) >> 2; // x²/4
    let gamma = parse_decimal(EULER_GAMMA);
    let log_half = ln(&(&xb >> 1u32));

    let mut i0 = BigInt::zero();
    let mut i1_over = BigInt::zero(); // Σ q^k/(k!(k+1)!)
    let mut s0 = BigInt::zero(); // Σ q^k/(k!)² H_k
    let mut s1 = BigInt::zero(); // Σ q^k/(k!(k+1)!) (ψ(k+1)+ψ(k+2))
    let mut t = one(); // q^k/(k!)²
    let mut h = BigInt::zero(); // H_k
    let mut k = 0u64;
    loop {
        let tk1 = &t / BigInt::from(k + 1); // q^k/(k!(k+1)!)
        let h_next = &h + &one() / BigInt::from(k + 1);
        i0 += &t;
        i1_over += &tk1;
        s0 += mul(&t, &h);
        // ψ(k+1) + ψ(k+2) = H_k + H_{k+1} − 2γ
        s1 += mul(&tk1, &(&h + &h_next - &gamma * 2));
        if t.is_zero() && k > 10 {
            break;
        }
        k += 1;
        t = mul(&t, &q) / BigInt::from(k * k);
        h = h_next;
    }
    let k0 = -mul(&(&log_half + &gamma), &i0) + s0;
    let i1 = mul(&(&xb >> 1u32), &i1_over);
    let k1 = div(&one(), &xb) + mul(&log_half, &i1) - mul(&(&xb >> 2u32), &s1);
    (to_f64(&k0), to_f64(&k1))
}

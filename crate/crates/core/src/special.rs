//! Special functions used by the Gamma threshold posterior and the entropy
//! estimators. Evaluation happens in `f64`.

use statrs::function::gamma as sg;

pub fn ln_gamma(x: f64) -> f64 {
    sg::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    sg::digamma(x)
}

/// Trigamma function for `x > 0`: upward recurrence then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 8.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/2x^2 + sum B_2k / x^(2k+1)
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))));
    acc + series
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        sg::gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        sg::gamma_ur(a, x)
    }
}

/// `x` with `P(a, x) = p`.
pub fn gamma_p_inv(a: f64, p: f64) -> f64 {
    solve_tail(a, |x| gamma_p(a, x) - p, 1.0)
}

/// `x` with `Q(a, x) = q`.
pub fn gamma_q_inv(a: f64, q: f64) -> f64 {
    solve_tail(a, |x| gamma_q(a, x) - q, -1.0)
}

/// Root of a monotone tail function `f` on `(0, inf)` by Newton steps with
/// a bisection fallback; `slope_sign` is the sign of `f'`, whose magnitude is
/// the Gamma density.
fn solve_tail(a: f64, f: impl Fn(f64) -> f64, slope_sign: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, a.max(1.0));
    while slope_sign * f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if slope_sign * fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = fx / (slope_sign * gamma_pdf(a, x));
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(f64::MIN_POSITIVE) {
            return next;
        }
        x = next;
    }
    x
}

/// Density of the unit-rate Gamma(a) distribution.
pub fn gamma_pdf(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() - x - ln_gamma(a)).exp()
}

/// `dP(a, x)/da` by central differences with step `1e-4 * max(1, a)`.
///
/// The tail with the smaller magnitude is differenced so the result keeps
/// relative precision far from the median.
pub fn gamma_p_da(a: f64, x: f64) -> f64 {
    let h = (1e-4 * a.max(1.0)).min(0.5 * a);
    if x < a {
        (gamma_p(a + h, x) - gamma_p(a - h, x)) / (2.0 * h)
    } else {
        -(gamma_q(a + h, x) - gamma_q(a - h, x)) / (2.0 * h)
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

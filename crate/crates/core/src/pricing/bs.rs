use super::normal::{norm_cdf, norm_pdf};
use super::PricingError;
use crate::scalar::Scalar;

/// Inputs to the Black–Scholes call formula. Rates and volatility are annualized;
/// `t` is in years.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsInputs<T> {
    pub s0: T,
    pub k: T,
    pub r_f: T,
    pub sigma: T,
    pub t: T,
}

/// Upper bound on maturity accepted by [`BsInputs::validate`], in years.
pub const MAX_MATURITY: f64 = 5.0;

impl<T: Scalar> BsInputs<T> {
    pub fn new(s0: T, k: T, r_f: T, sigma: T, t: T) -> Result<Self, PricingError> {
        let inp = BsInputs { s0, k, r_f, sigma, t };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        let bad = |what: &str, v: T| PricingError::InvalidInput(format!("{} = {}", what, v));
        let positive = |v: T| v.is_finite() && v > T::zero();
        if !positive(self.s0) {
            return Err(bad("spot", self.s0));
        }
        if !positive(self.k) {
            return Err(bad("strike", self.k));
        }
        if !positive(self.sigma) {
            return Err(bad("volatility", self.sigma));
        }
        if !positive(self.t) || self.t > T::lit(MAX_MATURITY) {
            return Err(bad("maturity", self.t));
        }
        if !self.r_f.is_finite() {
            return Err(bad("rate", self.r_f));
        }
        Ok(())
    }

    pub fn d1(&self) -> T {
        let half = T::lit(0.5);
        ((self.s0 / self.k).ln() + (self.r_f + half * self.sigma * self.sigma) * self.t) / (self.sigma * self.t.sqrt())
    }

    pub fn d2(&self) -> T {
        self.d1() - self.sigma * self.t.sqrt()
    }

    fn discount(&self) -> T {
        (-self.r_f * self.t).exp()
    }
}

/// European call value `S0 N(d1) - K e^{-r T} N(d2)`.
pub fn bs_call_price<T: Scalar>(inp: &BsInputs<T>) -> T {
    let d1 = inp.d1();
    let d2 = d1 - inp.sigma * inp.t.sqrt();
    let c = inp.s0 * norm_cdf(d1) - inp.k * inp.discount() * norm_cdf(d2);
    // Rounding can push deep out-of-the-money values a hair below zero.
    c.max(T::zero())
}

/// `N(d1)`, the spot sensitivity of the call.
pub fn bs_delta<T: Scalar>(inp: &BsInputs<T>) -> T {
    norm_cdf(inp.d1())
}

/// `S0 φ(d1) √T`, the volatility sensitivity of the call.
pub fn bs_vega<T: Scalar>(inp: &BsInputs<T>) -> T {
    inp.s0 * norm_pdf(inp.d1()) * inp.t.sqrt()
}

/// Lower and upper no-arbitrage bounds on a call price.
pub fn call_bounds<T: Scalar>(s0: T, k: T, r_f: T, t: T) -> (T, T) {
    ((s0 - k * (-r_f * t).exp()).max(T::zero()), s0)
}

/// Volatility search interval.
pub const VOL_LO: f64 = 1e-4;
pub const VOL_HI: f64 = 5.0;
const BISECTION_STEPS: usize = 60;
const NEWTON_STEPS: usize = 8;
const PRICE_TOL: f64 = 1e-8;

/// Inverts the call formula for volatility.
///
/// Sixty bisection steps on `[1e-4, 5]` followed by at most eight Newton steps
/// with analytic vega. Newton iterates that leave the final bisection bracket
/// are discarded.
pub fn implied_vol<T: Scalar>(c_market: T, s0: T, k: T, r_f: T, t: T) -> Result<T, PricingError> {
    let probe = BsInputs::new(s0, k, r_f, T::one(), t)?;
    let (lower, upper) = call_bounds(s0, k, r_f, t);
    if !(c_market.is_finite() && c_market > lower && c_market < upper) {
        return Err(PricingError::Arbitrage { price: c_market.as_f64(), lower: lower.as_f64(), upper: upper.as_f64() });
    }
    let price_at = |sigma: T| bs_call_price(&BsInputs { sigma, ..probe }) - c_market;
    let (mut lo, mut hi) = (T::lit(VOL_LO), T::lit(VOL_HI));
    if price_at(lo) > T::zero() || price_at(hi) < T::zero() {
        return Err(PricingError::NoRoot { price: c_market.as_f64(), lo: VOL_LO, hi: VOL_HI });
    }
    for _ in 0..BISECTION_STEPS {
        let mid = T::lit(0.5) * (lo + hi);
        if price_at(mid) < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut sigma = T::lit(0.5) * (lo + hi);
    for _ in 0..NEWTON_STEPS {
        let f = price_at(sigma);
        if f.abs().as_f64() <= PRICE_TOL * 1e-3 {
            break;
        }
        let vega = bs_vega(&BsInputs { sigma, ..probe });
        if vega <= T::zero() {
            break;
        }
        let next = sigma - f / vega;
        if !(next >= lo && next <= hi) {
            break;
        }
        sigma = next;
    }
    if price_at(sigma).abs().as_f64() > PRICE_TOL {
        return Err(PricingError::NoRoot { price: c_market.as_f64(), lo: VOL_LO, hi: VOL_HI });
    }
    Ok(sigma)
}

/// Delta clamp keeping expert actions strictly inside (0, 1).
pub const DELTA_EPS: f64 = 1e-12;

/// `N(d1)` evaluated at the market implied volatility, clamped to `[1e-12, 1 - 1e-12]`.
pub fn implied_delta<T: Scalar>(s0: T, k: T, r_f: T, sigma_market: T, t: T) -> Result<T, PricingError> {
    let inp = BsInputs::new(s0, k, r_f, sigma_market, t)?;
    Ok(bs_delta(&inp).max(T::lit(DELTA_EPS)).min(T::lit(1.0 - DELTA_EPS)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atm(sigma: f64) -> BsInputs<f64> {
        BsInputs::new(100.0, 100.0, 0.0, sigma, 1.0).unwrap()
    }

    #[test]
    fn at_the_money_reference() {
        assert!((bs_call_price(&atm(0.2)) - 7.965_567_455_405_796).abs() < 1e-9);
        assert!((bs_delta(&atm(0.2)) - 0.539_827_837_277_029).abs() < 1e-12);
    }

    #[test]
    fn limits() {
        let short = BsInputs::new(110.0f64, 100.0, 0.0, 0.2, 1e-10).unwrap();
        assert!((bs_call_price(&short) - 10.0).abs() < 1e-9);
        let wild = BsInputs::new(100.0f64, 100.0, 0.0, 1e4, 1.0).unwrap();
        assert!((bs_call_price(&wild) - 100.0).abs() < 1e-9);
        let calm = BsInputs::new(90.0f64, 100.0, 0.0, 1e-6, 1.0).unwrap();
        assert!(bs_call_price(&calm) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(BsInputs::new(0.0, 100.0, 0.0, 0.2, 1.0).is_err());
        assert!(BsInputs::new(100.0, 100.0, 0.0, 0.2, 6.0).is_err());
        assert!(BsInputs::new(100.0, -1.0, 0.0, 0.2, 1.0).is_err());
    }

    #[test]
    fn implied_vol_round_trip_and_bounds() {
        let c = bs_call_price(&atm(0.2));
        assert!((implied_vol(c, 100.0, 100.0, 0.0, 1.0).unwrap() - 0.2).abs() < 1e-10);
        assert!(matches!(implied_vol(100.0, 100.0, 100.0, 0.0, 1.0), Err(PricingError::Arbitrage { .. })));
        assert!(matches!(implied_vol(9.0, 110.0, 100.0, 0.0, 0.5), Err(PricingError::Arbitrage { .. })));
        // Inside the bounds but above the price at the highest bracketed volatility.
        assert!(matches!(implied_vol(99.9, 100.0, 100.0, 0.0, 1.0), Err(PricingError::NoRoot { .. })));
    }

    #[test]
    fn implied_delta_limits() {
        let d = implied_delta(150.0, 100.0, 0.0, 0.05, 0.05).unwrap();
        assert!(d < 1.0 && d > 1.0 - 1e-11);
        let d = implied_delta(50.0, 100.0, 0.0, 0.05, 0.05).unwrap();
        assert!(d > 0.0 && d < 1e-11);
    }

    #[test]
    fn works_in_single_precision() {
        let inp = BsInputs::new(100.0f32, 100.0, 0.0, 0.2, 1.0).unwrap();
        assert!((bs_call_price(&inp) - 7.965_567).abs() < 1e-3);
    }
}

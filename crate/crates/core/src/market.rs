//! Static Libor Market Model quantities.
//!
//! Dates live on a regular grid `T_i = i·δ`. A swaption with expiry index
//! `S` and end index `N` pays on the forwards `K(0, T_i)`, `i = S..=N`, each
//! covering `[T_i, T_{i+1}]`; a caplet is the one-period case `S = N`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::linalg::{BlockDiagMatrix, SymMatrix};
use crate::math;

/// Discount factors `B(0, T_i)` on a regular grid, with `B(0, T_0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountCurve {
    delta: f64,
    discounts: Vec<f64>,
}

impl DiscountCurve {
    /// `discounts[i]` is `B(0, T_{i+1})`; the unit discount at `T_0` is implied.
    pub fn new(delta: f64, discounts: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(invalid("period must be positive"));
        }
        if discounts.is_empty() {
            return Err(invalid("discount curve is empty"));
        }
        let mut all = Vec::with_capacity(discounts.len() + 1);
        all.push(1.0);
        for (i, &b) in discounts.iter().enumerate() {
            if !(b > 0.0 && b <= 1.0) {
                return Err(invalid(format!("discount factor {b} at T_{} is outside (0, 1]", i + 1)));
            }
            if b > all[i] {
                return Err(invalid(format!("discount curve increases at T_{}", i + 1)));
            }
            all.push(b);
        }
        Ok(Self { delta, discounts: all })
    }

    /// Flat rate with annual compounding: `B(T) = (1 + r)^{-T}`.
    pub fn flat_annual(rate: f64, delta: f64, count: usize) -> Result<Self> {
        let base = math::ln(1.0 + rate);
        Self::new(delta, (1..=count).map(|i| math::exp(-base * i as f64 * delta)).collect())
    }

    /// Flat continuously compounded rate: `B(T) = e^{-rT}`.
    pub fn flat_continuous(rate: f64, delta: f64, count: usize) -> Result<Self> {
        Self::new(delta, (1..=count).map(|i| math::exp(-rate * i as f64 * delta)).collect())
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Largest grid index with a discount factor.
    pub fn last_index(&self) -> usize {
        self.discounts.len() - 1
    }

    pub fn discount(&self, i: usize) -> Result<f64> {
        self.discounts
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("no discount factor at T_{i} (curve ends at T_{})", self.last_index())))
    }

    /// Simple forward `K(0, T_i) = (B_i / B_{i+1} − 1) / δ`.
    pub fn forward(&self, i: usize) -> Result<f64> {
        let k = (self.discount(i)? / self.discount(i + 1)? - 1.0) / self.delta;
        if !(k > 0.0) {
            return Err(invalid(format!("forward rate at T_{i} is not positive")));
        }
        Ok(k)
    }

    fn check(&self, s: usize, n: usize) -> Result<()> {
        if s == 0 || n < s || n + 1 > self.last_index() {
            return Err(invalid(format!(
                "swap indices S={s}, N={n} are invalid for a curve ending at T_{}",
                self.last_index()
            )));
        }
        Ok(())
    }
}

/// Annuity `Σ_{i=S}^{N} δ·B(0, T_{i+1})`.
pub fn level(curve: &DiscountCurve, s: usize, n: usize) -> Result<f64> {
    curve.check(s, n)?;
    (s..=n).map(|i| Ok(curve.delta * curve.discount(i + 1)?)).sum()
}

/// `ω_i = δ·B(0, T_{i+1}) / Level`.
pub fn forward_weights(curve: &DiscountCurve, s: usize, n: usize) -> Result<Vec<f64>> {
    let lvl = level(curve, s, n)?;
    (s..=n).map(|i| Ok(curve.delta * curve.discount(i + 1)? / lvl)).collect()
}

/// Forward swap rate `Σ ω_i K_i`.
pub fn swap_rate(curve: &DiscountCurve, s: usize, n: usize) -> Result<f64> {
    let w = forward_weights(curve, s, n)?;
    (s..=n).zip(&w).map(|(i, wi)| Ok(wi * curve.forward(i)?)).sum()
}

/// Basket weights of the lognormal swap approximation, `ω̂_i = ω_i K_i / swap`.
pub fn hat_weights(curve: &DiscountCurve, s: usize, n: usize) -> Result<Vec<f64>> {
    let w = forward_weights(curve, s, n)?;
    let parts: Vec<f64> = (s..=n).zip(&w).map(|(i, wi)| Ok(wi * curve.forward(i)?)).collect::<Result<_>>()?;
    let swap: f64 = parts.iter().sum();
    Ok(parts.into_iter().map(|p| p / swap).collect())
}

fn black_h(forward: f64, strike: f64, v: f64) -> f64 {
    (math::ln(forward / strike) + 0.5 * v) / math::sqrt(v)
}

fn check_black(forward: f64, strike: f64, level: f64) -> Result<()> {
    if !(forward > 0.0 && strike > 0.0 && level > 0.0) {
        return Err(invalid("forward, strike and level must be positive"));
    }
    Ok(())
}

/// Black-76 payer price from cumulative variance `V = σ²T`.
pub fn black_price(forward: f64, strike: f64, v: f64, level: f64) -> Result<f64> {
    check_black(forward, strike, level)?;
    if v < 0.0 || v.is_nan() {
        return Err(invalid("cumulative variance must be nonnegative"));
    }
    if v == 0.0 {
        return Ok(level * (forward - strike).max(0.0));
    }
    if v.is_infinite() {
        return Ok(level * forward);
    }
    let h = black_h(forward, strike, v);
    Ok(level * (forward * math::norm_cdf(h) - strike * math::norm_cdf(h - math::sqrt(v))))
}

/// Derivative of [`black_price`] with respect to cumulative variance.
pub fn black_variance_vega(forward: f64, strike: f64, v: f64, level: f64) -> Result<f64> {
    check_black(forward, strike, level)?;
    if !(v > 0.0) {
        return Err(invalid("variance vega needs positive cumulative variance"));
    }
    let h = black_h(forward, strike, v);
    Ok(level * forward * math::norm_pdf(h) / (2.0 * math::sqrt(v)))
}

/// Inverts [`black_price`] for the cumulative variance.
pub fn implied_cumvariance(price: f64, forward: f64, strike: f64, level: f64) -> Result<f64> {
    check_black(forward, strike, level)?;
    let lower = level * (forward - strike).max(0.0);
    let upper = level * forward;
    let tol = 1e-12 * upper;
    if !price.is_finite() || price < lower - tol || price >= upper {
        return Err(invalid(format!("price {price} is outside the no-arbitrage range [{lower}, {upper})")));
    }
    if price <= lower + 1e-15 * upper {
        return Ok(0.0);
    }
    // Solve in total volatility s = √V, where the price is increasing.
    let f = |s: f64| level * (forward * math::norm_cdf(black_h(forward, strike, s * s)) - strike * math::norm_cdf(black_h(forward, strike, s * s) - s));
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < price {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(invalid("implied variance does not converge"));
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fs = f(s) - price;
        if fs.abs() <= 1e-3 * tol {
            break;
        }
        if fs > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let dfs = level * forward * math::norm_pdf(black_h(forward, strike, s * s));
        let newton = s - fs / dfs;
        s = if dfs > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    Ok(s * s)
}

/// One swaption (or caplet) quote on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaptionQuote {
    /// Expiry index `S` (`T_S = S·δ`).
    pub expiry: usize,
    /// Index `N` of the last forward in the underlying swap.
    pub end: usize,
    /// Black volatility as a fraction (0.124 for 12.4%).
    pub vol: f64,
    pub bid: Option<f64>,
    pub ask: Option<f64>,
    /// Fixed strike; `None` means at-the-money forward.
    pub strike: Option<f64>,
}

impl SwaptionQuote {
    /// `expiry` periods into a swap of `tenor` periods.
    pub fn new(expiry: usize, tenor: usize, vol: f64) -> Self {
        Self { expiry, end: expiry + tenor.max(1) - 1, vol, bid: None, ask: None, strike: None }
    }

    pub fn caplet(expiry: usize, vol: f64) -> Self {
        Self::new(expiry, 1, vol)
    }

    pub fn with_spread(mut self, bid: f64, ask: f64) -> Self {
        self.bid = Some(bid);
        self.ask = Some(ask);
        self
    }

    pub fn tenor(&self) -> usize {
        self.end + 1 - self.expiry
    }

    fn validate(&self) -> Result<()> {
        if self.expiry == 0 || self.end < self.expiry {
            return Err(invalid(format!("invalid swaption indices S={}, N={}", self.expiry, self.end)));
        }
        if !(self.vol > 0.0) || !self.vol.is_finite() {
            return Err(invalid("volatility must be positive"));
        }
        match (self.bid, self.ask) {
            (Some(b), Some(a)) if !(b > 0.0 && b <= a) => Err(invalid("bid/ask vols must satisfy 0 < bid ≤ ask")),
            (Some(_), None) | (None, Some(_)) => Err(invalid("bid and ask must be given together")),
            _ => Ok(()),
        }
    }
}

/// A quote resolved against a curve: basket weights, forward, annuity.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaptionInstrument {
    pub quote: SwaptionQuote,
    /// `ω̂_S..ω̂_N`, summing to one.
    pub weights: Vec<f64>,
    pub forward: f64,
    pub strike: f64,
    pub level: f64,
    pub delta: f64,
}

impl SwaptionInstrument {
    pub fn new(curve: &DiscountCurve, quote: SwaptionQuote) -> Result<Self> {
        quote.validate()?;
        let weights = hat_weights(curve, quote.expiry, quote.end)?;
        let forward = swap_rate(curve, quote.expiry, quote.end)?;
        let level = level(curve, quote.expiry, quote.end)?;
        let strike = quote.strike.unwrap_or(forward);
        Ok(Self { quote, weights, forward, strike, level, delta: curve.delta })
    }

    /// Builds an instrument from explicit basket weights (no curve).
    pub fn from_weights(quote: SwaptionQuote, weights: Vec<f64>, delta: f64, forward: f64, level: f64) -> Result<Self> {
        quote.validate()?;
        if weights.len() != quote.tenor() || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("weights must be positive, one per forward"));
        }
        let strike = quote.strike.unwrap_or(forward);
        Ok(Self { quote, weights, forward, strike, level, delta })
    }

    pub fn expiry_time(&self) -> f64 {
        self.quote.expiry as f64 * self.delta
    }

    /// Cumulative variance `σ²T_S` of the quote.
    pub fn target(&self) -> f64 {
        self.quote.vol * self.quote.vol * self.expiry_time()
    }

    pub fn bid_target(&self) -> Option<f64> {
        self.quote.bid.map(|v| v * v * self.expiry_time())
    }

    pub fn ask_target(&self) -> Option<f64> {
        self.quote.ask.map(|v| v * v * self.expiry_time())
    }

    /// Black price at cumulative variance `v`.
    pub fn price(&self, v: f64) -> Result<f64> {
        black_price(self.forward, self.strike, v, self.level)
    }

    pub fn variance_vega(&self, v: f64) -> Result<f64> {
        black_variance_vega(self.forward, self.strike, v, self.level)
    }

    /// Volatility recovered from a cumulative variance.
    pub fn vol_from_variance(&self, v: f64) -> f64 {
        math::sqrt(v.max(0.0) / self.expiry_time())
    }
}

/// `Ω = Σ_{j=1}^{S} δ·φ_j`, with `φ_j` holding `ω̂ω̂ᵀ` at rows/columns
/// `j..j+N−S` (1-based), so that `Tr(Ω X)` is the cumulative variance under
/// the stationary covariance `X`.
pub fn build_omega_stationary(inst: &SwaptionInstrument, m: usize) -> Result<SymMatrix> {
    let s = inst.quote.expiry;
    let len = inst.weights.len();
    if s + len - 1 > m {
        return Err(invalid(format!("instrument S={} N={} does not fit in dimension {m}", s, inst.quote.end)));
    }
    let mut omega = SymMatrix::zeros(m);
    for j in 0..s {
        for p in 0..len {
            for q in 0..=p {
                omega.add_at(j + p, j + q, inst.delta * inst.weights[p] * inst.weights[q]);
            }
        }
    }
    Ok(omega)
}

/// Non-stationary form: block `i = 1..M` has dimension `M − i + 1` and, for
/// `i ≤ S`, holds `δ·ω̂ω̂ᵀ` starting at 1-based position `S − i + 1`.
pub fn build_omega_nonstationary(inst: &SwaptionInstrument, m: usize) -> Result<BlockDiagMatrix> {
    let s = inst.quote.expiry;
    let len = inst.weights.len();
    if inst.quote.end > m {
        return Err(invalid(format!("instrument S={} N={} does not fit in horizon {m}", s, inst.quote.end)));
    }
    let blocks = (1..=m)
        .map(|i| {
            let mut blk = SymMatrix::zeros(m - i + 1);
            if i <= s {
                let off = s - i;
                for p in 0..len {
                    for q in 0..=p {
                        blk.set(off + p, off + q, inst.delta * inst.weights[p] * inst.weights[q]);
                    }
                }
            }
            blk
        })
        .collect();
    BlockDiagMatrix::new(blocks)
}

/// Dimensions of the non-stationary block variable for horizon `m`.
pub fn nonstationary_dims(m: usize) -> Vec<usize> {
    (1..=m).map(|i| m - i + 1).collect()
}

/// Market snapshot: curve, horizon and quotes.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    pub curve: DiscountCurve,
    /// Dimension `M` of the stationary covariance.
    pub horizon: usize,
    pub quotes: Vec<SwaptionQuote>,
}

impl MarketData {
    pub fn instruments(&self) -> Result<Vec<SwaptionInstrument>> {
        self.quotes.iter().map(|q| SwaptionInstrument::new(&self.curve, q.clone())).collect()
    }
}

/// `Σ_j δ·ω̂ᵀ X[j..] ω̂` by direct summation (reference for the Ω builders).
pub fn stationary_variance_direct(inst: &SwaptionInstrument, x: &SymMatrix) -> f64 {
    let len = inst.weights.len();
    let mut total = 0.0;
    for j in 0..inst.quote.expiry {
        let mut v = 0.0;
        for p in 0..len {
            for q in 0..len {
                v += inst.weights[p] * x.get(j + p, j + q) * inst.weights[q];
            }
        }
        total += inst.delta * v;
    }
    total
}

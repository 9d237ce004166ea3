#![allow(dead_code)]

use lmmsdp_core::market::{DiscountCurve, MarketData, SwaptionInstrument, SwaptionQuote};

pub const CAPLET_VOLS: [f64; 20] = [
    14.3, 15.6, 15.4, 15.1, 14.8, 14.5, 14.2, 14.0, 13.9, 13.3, 13.0, 12.7, 12.4, 12.2, 12.0, 11.9, 11.8, 11.8, 11.7, 12.0,
];

/// (expiry, tenor, vol %)
pub const SWAPTIONS: [(usize, usize, f64); 8] = [
    (2, 5, 12.4),
    (5, 5, 11.7),
    (5, 2, 14.0),
    (10, 5, 10.0),
    (7, 5, 11.0),
    (10, 2, 12.2),
    (10, 7, 9.6),
    (2, 2, 14.8),
];

pub fn sydney_market() -> MarketData {
    let curve = DiscountCurve::flat_annual(0.06, 1.0, 21).unwrap();
    let mut quotes: Vec<SwaptionQuote> =
        CAPLET_VOLS.iter().enumerate().map(|(i, v)| SwaptionQuote::caplet(i + 1, v / 100.0)).collect();
    quotes.extend(SWAPTIONS.iter().map(|&(s, l, v)| SwaptionQuote::new(s, l, v / 100.0)));
    MarketData { curve, horizon: 20, quotes }
}

pub fn sydney_instruments() -> Vec<SwaptionInstrument> {
    sydney_market().instruments().unwrap()
}

#![no_main]

use bksieve::simlab::{parse_grid, parse_orders};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(g) = parse_grid(s) {
            assert!(!g.is_empty() && g.iter().all(|x| x.is_finite()));
        }
        if let Ok(o) = parse_orders(s) {
            assert!(!o.is_empty() && o.iter().all(|&j| j > 0));
        }
    }
});

#![no_main]

use bksieve::riskapp::{parse_daily, weekly_features};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(days) = parse_daily(data) {
        assert!(days.windows(2).all(|w| w[0].date < w[1].date));
        let _ = weekly_features(&days);
    }
});

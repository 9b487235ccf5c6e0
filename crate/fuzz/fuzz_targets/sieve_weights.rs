#![no_main]

use bksieve::sieve::SieveCopula;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    let _ = SieveCopula::from_csv(data);
});

#![no_main]

use bksieve::data::DataMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DataMatrix::from_csv(data) {
        // whatever parses must survive a write/read cycle
        let names: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
        let mut buf = Vec::new();
        m.to_csv(&names, &mut buf).unwrap();
        assert_eq!(DataMatrix::from_csv(buf.as_slice()).unwrap(), m);
    }
});

//! Replays the checked-in fuzz corpus through every parser so the seeds stay
//! exercised without a nightly toolchain.

use std::path::PathBuf;

use bksieve::data::DataMatrix;
use bksieve::estimate::ModelConfig;
use bksieve::riskapp::{parse_daily, weekly_features};
use bksieve::sieve::SieveCopula;
use bksieve::simlab::{parse_grid, parse_orders};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn daily_csv_seeds() {
    let mut accepted = 0;
    for (_, bytes) in seeds("daily_csv") {
        if let Ok(days) = parse_daily(bytes.as_slice()) {
            assert!(days.windows(2).all(|w| w[0].date < w[1].date));
            let _ = weekly_features(&days);
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn data_csv_seeds() {
    for (name, bytes) in seeds("data_csv") {
        if let Ok(m) = DataMatrix::from_csv(bytes.as_slice()) {
            let names: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
            let mut buf = Vec::new();
            m.to_csv(&names, &mut buf).unwrap();
            assert_eq!(DataMatrix::from_csv(buf.as_slice()).unwrap(), m, "{name}");
        }
    }
}

#[test]
fn sieve_weight_seeds() {
    for (name, bytes) in seeds("sieve_weights") {
        let parsed = SieveCopula::from_csv(bytes.as_slice());
        assert_eq!(parsed.is_ok(), name.starts_with("uniform") || name.starts_with("diagonal") || name.starts_with("order_1"), "{name}");
    }
}

#[test]
fn model_config_seeds() {
    for (name, bytes) in seeds("model_config") {
        let parsed = std::str::from_utf8(&bytes).map(ModelConfig::from_json);
        assert_eq!(matches!(parsed, Ok(Ok(_))), name != "empty.json", "{name}");
    }
}

#[test]
fn grid_spec_seeds() {
    for (name, bytes) in seeds("grid_spec") {
        let s = std::str::from_utf8(&bytes).unwrap();
        if let Ok(g) = parse_grid(s) {
            assert!(!g.is_empty() && g.iter().all(|x| x.is_finite()), "{name}");
        }
        if let Ok(o) = parse_orders(s) {
            assert!(!o.is_empty() && o.iter().all(|&j| j > 0), "{name}");
        }
    }
    assert_eq!(parse_grid("-0.8:0.8:0.1").unwrap().len(), 17);
    assert!(parse_grid("0:1e9:1e-9").is_err());
}

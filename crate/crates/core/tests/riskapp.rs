use std::path::PathBuf;

use bksieve::copulas::{CorrelationMatrix, ParametricCopula};
use bksieve::marginals::MarginalModel;
use bksieve::riskapp::*;
use bksieve::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{Binomial, DiscreteCDF};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn five_row_fixture_round_trips() {
    let recs = ingest_daily(&fixture("daily_5.csv")).unwrap();
    assert_eq!(recs.len(), 5);
    let mut buf = Vec::new();
    write_daily(&recs, &mut buf).unwrap();
    let back = parse_daily(buf.as_slice()).unwrap();
    assert_eq!(back, recs);
    assert_eq!(recs[4].adj_close, 25.42);
}

#[test]
fn ten_day_fixture_matches_hand_calculation() {
    let ws = weekly_features(&ingest_daily(&fixture("daily_10.csv")).unwrap()).unwrap();
    let expected = std::fs::read_to_string(fixture("weekly_10_expected.csv")).unwrap();
    let rows: Vec<Vec<&str>> = expected.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(ws.len(), rows.len());
    for (w, e) in ws.rows.iter().zip(&rows) {
        assert_eq!(w.week_end.to_string(), e[0]);
        assert!((w.r - e[1].parse::<f64>().unwrap()).abs() < 1e-14);
        assert!((w.m - e[2].parse::<f64>().unwrap()).abs() < 1e-14);
        match w.v {
            Some(v) => assert!((v - e[3].parse::<f64>().unwrap()).abs() < 1e-14),
            None => assert!(e[3].is_empty()),
        }
        assert_eq!(w.trading_days.to_string(), e[4]);
    }
    // the holiday week closes on Thursday; the one-day week is flagged
    assert!(!ws.rows[0].is_flagged());
    assert!(ws.rows[1].is_flagged());
}

#[test]
fn ingest_reports_missing_file() {
    assert!(matches!(ingest_daily(&fixture("no_such_file.csv")), Err(Error::Io(_))));
}

#[test]
fn censored_score_matches_fine_grid_sum() {
    let model = MarginalModel::student_t(0.003, 0.045, 4.5).unwrap();
    let weight = ScoreWeight {
        threshold: -0.08,
        steepness: 30.0,
    };
    let r = -0.10;
    let got = censored_score(&model, r, &weight).unwrap();
    // midpoint sum of w f at step 1e-5 over [-40, 40]
    let h = 1e-5;
    let steps = (80.0 / h) as usize;
    let mut wf = 0.0;
    for i in 0..steps {
        let s = -40.0 + (i as f64 + 0.5) * h;
        wf += weight.weight(s) * model.pdf(s) * h;
    }
    let w = 1.0 / (1.0 + (30.0f64 * (-0.08 - r)).exp());
    let oracle = w * model.pdf(r).ln() + (1.0 - w) * (1.0 - wf).ln();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn fixed_independent_t_copula_reproduces_qmle_var() {
    let ws = SyntheticMarket::iid(200, 11).unwrap().generate().unwrap();
    let cfg = BacktestConfig {
        window: 156,
        companion: Companion::Volume,
        fixed_t_copula: Some(ParametricCopula::student_t(CorrelationMatrix::identity(2).unwrap(), 1e9).unwrap()),
        ..Default::default()
    };
    let q = rolling_fit_var(&ws, VarMethod::Qmle, &cfg).unwrap();
    let f = rolling_fit_var(&ws, VarMethod::FmleT, &cfg).unwrap();
    assert_eq!(q.failures + f.failures, 0);
    for (a, b) in q.rows.iter().zip(&f.rows) {
        let (a, b) = (a.var.unwrap(), b.var.unwrap());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

/// Smallest k with P(X <= k) >= p.
fn binomial_quantile(b: &Binomial, p: f64) -> u64 {
    (0..).find(|&k| b.cdf(k) >= p).unwrap()
}

#[test]
fn iid_exceedances_inside_binomial_interval() {
    let ws = SyntheticMarket::iid(400, 3).unwrap().generate().unwrap();
    let cfg = BacktestConfig::default();
    for method in [VarMethod::Qmle, VarMethod::Smle] {
        let s = rolling_fit_var(&ws, method, &cfg).unwrap();
        assert_eq!(s.failures, 0);
        assert!(s.flags_consistent());
        let n = s.evaluated() as u64;
        let b = Binomial::new(0.05, n).unwrap();
        let (lo, hi) = (binomial_quantile(&b, 0.005), binomial_quantile(&b, 0.995));
        let k = s.exceedances() as u64;
        assert!(lo <= k && k <= hi, "{method}: {k} of {n} outside [{lo}, {hi}]");
    }
}

#[test]
fn jackknife_t_ratio_tracks_the_classical_t() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n = 10_000;
    let b: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
    let a: Vec<f64> = b.iter().map(|x| x + 0.03 + noise.sample(&mut rng)).collect();
    let c = compare_scores(&a, &b, 10).unwrap();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = mean / (sd / (n as f64).sqrt());
    let got = c.t_ratio.unwrap();
    assert!((got - t).abs() < 0.1 * t.abs(), "{got} vs {t}");
    assert!((got - c.mean_difference / c.std_error).abs() < 1e-12);
}

#[test]
fn sieve_scores_not_worse_under_known_dependence() {
    let corr = CorrelationMatrix::new(vec![
        vec![1.0, 0.3, -0.6],
        vec![0.3, 1.0, -0.2],
        vec![-0.6, -0.2, 1.0],
    ])
    .unwrap();
    let market = SyntheticMarket {
        copula: ParametricCopula::gaussian_from(corr),
        ..SyntheticMarket::iid(360, 21).unwrap()
    };
    let ws = market.generate().unwrap();
    let cfg = BacktestConfig::default();
    let bt = run_backtest(&ws, &[VarMethod::Qmle, VarMethod::Smle], &cfg).unwrap();
    let c = &bt.comparisons[0];
    assert_eq!((c.method_a.as_str(), c.method_b.as_str()), ("SMLE", "QMLE"));
    assert!(c.mean_difference >= -2.0 * c.std_error, "{c:?}");
    let csv = bt.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * (ws.len() - cfg.window));
    assert!(csv.starts_with("week_end,method,var,realized,exceed,score\n"));
}

use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;

fn tiny_csv() -> String {
    let mut s = String::from("series_id,period_id,step,f0\n");
    for i in 0..2 {
        for j in 0..3 {
            for t in 0..4 {
                s.push_str(&format!("{i},{j},{t},{}\n", (i * 100 + j * 10 + t) as f64 * 0.5));
            }
        }
    }
    s
}

#[test]
fn loads_the_documented_layout() {
    let c = read_csv(tiny_csv().as_bytes()).unwrap();
    assert_eq!((c.series(), c.periods(), c.dim()), (2, 3, 1));
    assert!((0..3).all(|j| c.period_len(j) == 4));
    assert_eq!(c.period(1, 2).data(), &[60.0, 60.5, 61.0, 61.5]);
}

#[test]
fn short_period_is_reported() {
    let text: String = tiny_csv()
        .lines()
        .filter(|l| !l.starts_with("1,2,3,"))
        .map(|l| format!("{l}\n"))
        .collect();
    let err = read_csv(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("period length mismatch"), "{err}");
    assert!(err.contains("series 1 period 2"), "{err}");
}

#[test]
fn non_numeric_cell_names_the_row() {
    let text = tiny_csv().replacen("0,1,2,6", "0,1,2,six", 1);
    let err = read_csv(text.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("row 8"), "{err}");
}

#[test]
fn unsorted_rows_and_bad_headers_are_rejected() {
    let text = tiny_csv().replacen("0,0,1,", "0,0,2,", 1);
    assert!(read_csv(text.as_bytes()).is_err());
    assert!(read_csv("series,period_id,step,f0\n0,0,0,1\n".as_bytes()).is_err());
    assert!(read_csv("series_id,period_id,step,x\n0,0,0,1\n".as_bytes()).is_err());
    assert!(read_csv("series_id,period_id,step,f0\n".as_bytes()).is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let cfg = SynthConfig {
        periods: 3,
        period_len: 6,
        ..SynthConfig::default()
    };
    let c = synth_drift(&cfg).unwrap().corpus;
    let mut buf = Vec::new();
    write_csv_to(&mut buf, &c).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, c);
    let mut again = Vec::new();
    write_csv_to(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn split_cases() {
    let s = split(10).unwrap();
    assert_eq!((s.train, s.val, s.test), (0..8, 8, 9));
    let s = split(3).unwrap();
    assert_eq!((s.train, s.val, s.test), (0..1, 1, 2));
    assert!(split(2).is_err());
}

proptest! {
    #[test]
    fn split_partitions_all_periods(n in 3usize..200) {
        let s = split(n).unwrap();
        let mut seen: Vec<usize> = s.train.clone().collect();
        prop_assert!(!s.train.contains(&s.val) && !s.train.contains(&s.test) && s.val != s.test);
        seen.push(s.val);
        seen.push(s.test);
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

fn corpus_of(values: Vec<Vec<Vec<f64>>>, dim: usize) -> TimeSeriesCorpus {
    TimeSeriesCorpus::new(
        values
            .into_iter()
            .map(|s| s.into_iter().map(|p| Tensor::new(&[p.len() / dim, dim], p)).collect())
            .collect(),
    )
    .unwrap()
}

#[test]
fn standardized_training_data_is_unchanged() {
    // training periods 0 and 1 hold [-1, 1, -1, 1]: mean 0, std 1
    let c = corpus_of(
        vec![vec![vec![-1.0, 1.0], vec![-1.0, 1.0], vec![3.0, 4.0], vec![5.0, 6.0]]],
        1,
    );
    let (n, stats) = normalize(&c).unwrap();
    assert_eq!(stats.mean, vec![vec![0.0]]);
    for j in 0..4 {
        for (a, b) in n.period(0, j).data().iter().zip(c.period(0, j).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_feature_normalizes_to_zero_and_back() {
    let c = corpus_of(
        vec![vec![
            vec![2.5, 1.0, 2.5, 2.0],
            vec![2.5, 3.0, 2.5, 4.0],
            vec![2.5, 9.0, 2.5, 9.0],
        ]],
        2,
    );
    let (n, stats) = normalize(&c).unwrap();
    assert_eq!(stats.floored, vec![(0, 0)]);
    assert_eq!(n.period(0, 0).data()[0], 0.0);
    let back = denormalize(&n, &stats).unwrap();
    assert_eq!(back.period(0, 2).data()[0], 2.5);
}

#[test]
fn normalized_training_statistics_are_standard() {
    let out = synth_drift(&SynthConfig::default()).unwrap();
    let (n, stats) = normalize(&out.corpus).unwrap();
    let sp = split(n.periods()).unwrap();
    for i in 0..n.series() {
        let t = n.concat(i, sp.train.clone());
        for f in 0..n.dim() {
            let col: Vec<f64> = (0..t.rows()).map(|r| t.at2(r, f)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }
    let back = denormalize(&n, &stats).unwrap();
    for i in 0..n.series() {
        for j in 0..n.periods() {
            for (a, b) in back.period(i, j).data().iter().zip(out.corpus.period(i, j).data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn synth_is_seed_deterministic() {
    let cfg = SynthConfig::default();
    assert_eq!(synth_drift(&cfg).unwrap().corpus, synth_drift(&cfg).unwrap().corpus);
    let other = SynthConfig { seed: 1, ..cfg.clone() };
    assert_ne!(synth_drift(&cfg).unwrap().corpus, synth_drift(&other).unwrap().corpus);
}

fn mean_pairwise_corr(x: &[Vec<f64>]) -> f64 {
    let n = x[0].len() as f64;
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|s| {
            let m = s.iter().sum::<f64>() / n;
            let sd = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            s.iter().map(|v| (v - m) / sd).collect()
        })
        .collect();
    let mut tot = 0.0;
    let mut pairs = 0.0;
    for a in 0..z.len() {
        for b in a + 1..z.len() {
            tot += z[a].iter().zip(&z[b]).map(|(p, q)| p * q).sum::<f64>() / n;
            pairs += 1.0;
        }
    }
    tot / pairs
}

#[test]
fn uncoupled_drivers_are_uncorrelated() {
    let cfg = SynthConfig {
        series: 8,
        periods: 20,
        coupling: 0.0,
        seed: 7,
        ..SynthConfig::default()
    };
    let r = mean_pairwise_corr(&synth_drift(&cfg).unwrap().drivers);
    assert!(r.abs() < 0.2, "{r}");
}

#[test]
fn amplitude_ramp_rms_increases_without_noise() {
    let cfg = SynthConfig {
        noise: 0.0,
        latent_noise: 0.0,
        periods: 12,
        ..SynthConfig::default()
    };
    let out = synth_drift(&cfg).unwrap();
    for i in 0..cfg.series {
        let rms: Vec<f64> = (0..cfg.periods)
            .map(|j| {
                let p = out.corpus.period(i, j);
                (p.data().iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt()
            })
            .collect();
        for j in 1..rms.len() {
            // whole cycles per period: RMS is amplitude / sqrt(2)
            let want = out.amplitude[i][j] / 2f64.sqrt();
            assert!((rms[j] - want).abs() < 1e-12);
            assert!(rms[j] > rms[j - 1]);
        }
    }
}

#[test]
fn other_drift_kinds_generate() {
    for drift in [DriftKind::FrequencyRamp, DriftKind::RegimeSwitch] {
        let out = synth_drift(&SynthConfig {
            drift,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(out.corpus.periods(), 8);
        assert!(out.frequency[0].windows(2).any(|w| w[0] != w[1]), "{drift}");
    }
}

#[test]
fn invalid_synth_configs_fail() {
    assert!(synth_drift(&SynthConfig {
        series: 0,
        ..SynthConfig::default()
    })
    .is_err());
    assert!(synth_drift(&SynthConfig {
        coupling: 1.5,
        ..SynthConfig::default()
    })
    .is_err());
    assert!(SynthConfig::default().validate(60).is_err());
}

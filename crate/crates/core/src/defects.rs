//! Spatially patterned stuck-at faults over a crossbar array.
//!
//! Cell (i, j) is tested at its normalized center ((i+0.5)/rows,
//! (j+0.5)/cols) inside the unit square; circular geometry measures
//! Euclidean distance from the array center (0.5, 0.5). Offsets are
//! computed as ((i+0.5) - rows/2)/rows, the same real number, so masks are
//! float-exactly mirror symmetric about both axes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{batch_inference, CrossbarStack};
use crate::dataset::DigitImage;
use crate::device::{PairOrigin, ReramPair};
use crate::error::{Error, Result};
use crate::report::fmt_f64;

/// Pattern geometry; radii are fractions of the normalized array extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Pattern {
    Circular { r: f64 },
    Ring { r_in: f64, r_out: f64 },
    Row { start: usize, count: usize },
    Column { start: usize, count: usize },
    CircularComplement { r: f64 },
}

impl Pattern {
    pub fn family(&self) -> PatternFamily {
        match self {
            Pattern::Circular { .. } => PatternFamily::Circular,
            Pattern::Ring { .. } => PatternFamily::Ring,
            Pattern::Row { .. } => PatternFamily::Row,
            Pattern::Column { .. } => PatternFamily::Column,
            Pattern::CircularComplement { .. } => PatternFamily::CircularComplement,
        }
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let radius_ok = |r: f64| r.is_finite() && (0.0..=1.0).contains(&r);
        match *self {
            Pattern::Circular { r } | Pattern::CircularComplement { r } if !radius_ok(r) => {
                Err(Error::OutOfRange(format!("radius {r} outside [0, 1]")))
            }
            Pattern::Ring { r_in, r_out } if !radius_ok(r_in) || !radius_ok(r_out) => Err(
                Error::OutOfRange(format!("ring radii ({r_in}, {r_out}) outside [0, 1]")),
            ),
            Pattern::Ring { r_in, r_out } if r_in >= r_out => Err(Error::OutOfRange(format!(
                "ring needs r_in < r_out, got ({r_in}, {r_out})"
            ))),
            Pattern::Row { start, count } if start + count > rows => {
                Err(Error::OutOfRange(format!(
                    "rows {start}..{} exceed array height {rows}",
                    start + count
                )))
            }
            Pattern::Column { start, count } if start + count > cols => {
                Err(Error::OutOfRange(format!(
                    "columns {start}..{} exceed array width {cols}",
                    start + count
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternFamily {
    Circular,
    Ring,
    Row,
    Column,
    CircularComplement,
}

impl PatternFamily {
    pub const ALL: [PatternFamily; 5] = [
        PatternFamily::Circular,
        PatternFamily::Ring,
        PatternFamily::Row,
        PatternFamily::Column,
        PatternFamily::CircularComplement,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PatternFamily::Circular => "circular",
            PatternFamily::Ring => "ring",
            PatternFamily::Row => "row",
            PatternFamily::Column => "column",
            PatternFamily::CircularComplement => "circular_complement",
        }
    }
}

/// One side of a stuck-at pair: overwrite with a conductance, or keep the
/// mapped value. Serialized as a number or the string "preserve".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SideRepr", into = "SideRepr")]
pub enum Side {
    Preserve,
    Value(f64),
}

impl Side {
    fn apply(&self, mapped: f64) -> f64 {
        match *self {
            Side::Preserve => mapped,
            Side::Value(v) => v,
        }
    }
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(untagged)]
enum SideRepr {
    Word(String),
    Num(f64),
}

impl TryFrom<SideRepr> for Side {
    type Error = Error;

    fn try_from(repr: SideRepr) -> Result<Self> {
        match repr {
            SideRepr::Word(w) if w == "preserve" => Ok(Side::Preserve),
            SideRepr::Word(w) => Err(Error::Config(format!(
                "stuck-at side must be a conductance or \"preserve\", got \"{w}\""
            ))),
            SideRepr::Num(v) if v.is_finite() && v >= 0.0 => Ok(Side::Value(v)),
            SideRepr::Num(v) => Err(Error::OutOfRange(format!(
                "stuck-at conductance must be finite and >= 0, got {v}"
            ))),
        }
    }
}

impl From<Side> for SideRepr {
    fn from(side: Side) -> Self {
        match side {
            Side::Preserve => SideRepr::Word("preserve".into()),
            Side::Value(v) => SideRepr::Num(v),
        }
    }
}

/// What masked pairs are overwritten with. Stuck-on forces both physical
/// devices to `g_on`, stuck-off to 0 S (dead device, no conduction);
/// stuck-at freezes each side independently and the values may lie outside
/// the calibrated range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FaultMode {
    StuckOn,
    StuckOff,
    StuckAt { g_plus: Side, g_minus: Side },
}

impl FaultMode {
    fn validate(&self) -> Result<()> {
        if let FaultMode::StuckAt { g_plus, g_minus } = self {
            for side in [g_plus, g_minus] {
                if let Side::Value(v) = side {
                    if !v.is_finite() || *v < 0.0 {
                        return Err(Error::OutOfRange(format!(
                            "stuck-at conductance must be finite and >= 0, got {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn overwrite(&self, old: &ReramPair, g_on: f64) -> ReramPair {
        match *self {
            FaultMode::StuckOn => ReramPair {
                g_plus: g_on,
                g_minus: g_on,
                origin: PairOrigin::StuckOn,
            },
            FaultMode::StuckOff => ReramPair {
                g_plus: 0.0,
                g_minus: 0.0,
                origin: PairOrigin::StuckOff,
            },
            FaultMode::StuckAt { g_plus, g_minus } => ReramPair {
                g_plus: g_plus.apply(old.g_plus),
                g_minus: g_minus.apply(old.g_minus),
                origin: PairOrigin::StuckAt,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub target_array: usize,
    pub pattern: Pattern,
    #[serde(flatten)]
    pub mode: FaultMode,
}

/// Realized boolean mask over one array, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
    pair_count: usize,
}

impl DefectMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn is_defective(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn defective_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &hit)| hit)
            .map(move |(idx, _)| (idx / cols, idx % cols))
    }

    /// 0/1 grid, one CSV row per array row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|j| if self.is_defective(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary image, defective cells white (255).
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n# defect mask, 1=defective=255\n{} {}\n255\n", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|j| if self.is_defective(i, j) { "255" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

fn center_offset(index: usize, extent: usize) -> f64 {
    ((index as f64 + 0.5) - extent as f64 / 2.0) / extent as f64
}

/// Realize a pattern on a `rows x cols` grid.
pub fn build_mask(pattern: &Pattern, rows: usize, cols: usize) -> Result<DefectMask> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension("mask needs a non-empty grid".into()));
    }
    pattern.validate(rows, cols)?;
    let mut cells = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let hit = match *pattern {
                Pattern::Circular { r } => distance(i, j, rows, cols) <= r,
                Pattern::Ring { r_in, r_out } => {
                    let d = distance(i, j, rows, cols);
                    r_in < d && d <= r_out
                }
                Pattern::CircularComplement { r } => distance(i, j, rows, cols) > r,
                Pattern::Row { start, count } => i >= start && i < start + count,
                Pattern::Column { start, count } => j >= start && j < start + count,
            };
            cells[i * cols + j] = hit;
        }
    }
    let pair_count = cells.iter().filter(|&&c| c).count();
    Ok(DefectMask {
        rows,
        cols,
        cells,
        pair_count,
    })
}

fn distance(i: usize, j: usize, rows: usize, cols: usize) -> f64 {
    let dx = center_offset(i, rows);
    let dy = center_offset(j, cols);
    (dx * dx + dy * dy).sqrt()
}

/// Overwrite masked pairs per the fault mode; returns a new stack, the
/// input is untouched.
pub fn apply_defects(stack: &CrossbarStack, spec: &DefectSpec) -> Result<CrossbarStack> {
    spec.mode.validate()?;
    let g_on = stack.device().g_on;
    let arr = stack.array(spec.target_array)?;
    let mask = build_mask(&spec.pattern, arr.rows(), arr.cols())?;
    let mut out = stack.clone();
    let target = out.array_mut(spec.target_array)?;
    for (i, j) in mask.defective_cells() {
        let old = *target.pair(i, j);
        target.set_pair(i, j, spec.mode.overwrite(&old, g_on));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pattern: Pattern,
    pub pair_count: usize,
    pub accuracy: f64,
}

/// Accuracy over `images` for each pattern in the schedule, applied to
/// `target_array` with the same fault mode. Entries run in parallel on
/// private defective copies; output order follows the schedule.
pub fn sweep_patterns(
    stack: &CrossbarStack,
    target_array: usize,
    schedule: &[Pattern],
    mode: &FaultMode,
    images: &[DigitImage],
) -> Result<Vec<SweepPoint>> {
    schedule
        .par_iter()
        .map(|pattern| {
            let spec = DefectSpec {
                target_array,
                pattern: *pattern,
                mode: *mode,
            };
            let arr = stack.array(target_array)?;
            let mask = build_mask(pattern, arr.rows(), arr.cols())?;
            let defective = apply_defects(stack, &spec)?;
            let report = batch_inference(&defective, images)?;
            Ok(SweepPoint {
                pattern: *pattern,
                pair_count: mask.pair_count(),
                accuracy: report.accuracy,
            })
        })
        .collect()
}

/// CSV for one family's sweep: pair_count plus one accuracy column per
/// mode, rows aligned across modes by schedule position.
pub fn sweep_csv(mode_names: &[&str], curves: &[Vec<SweepPoint>]) -> String {
    let mut out = String::from("pair_count");
    for name in mode_names {
        out.push_str(&format!(",accuracy_{name}"));
    }
    out.push('\n');
    if curves.is_empty() {
        return out;
    }
    for i in 0..curves[0].len() {
        out.push_str(&curves[0][i].pair_count.to_string());
        for curve in curves {
            out.push(',');
            out.push_str(&fmt_f64(curve[i].accuracy));
        }
        out.push('\n');
    }
    out
}

/// The family pattern whose realized pair count lands nearest `target`
/// (ties prefer fewer pairs). Circular searches the exact achievable-count
/// ladder; rings fix `r_in = r_out / 2`; row/column bands are centered.
pub fn pattern_for_target_pairs(
    family: PatternFamily,
    rows: usize,
    cols: usize,
    target: usize,
) -> Result<Pattern> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension("mask needs a non-empty grid".into()));
    }
    let candidates: Vec<Pattern> = match family {
        PatternFamily::Circular => radius_thresholds(rows, cols)
            .into_iter()
            .map(|r| Pattern::Circular { r })
            .collect(),
        PatternFamily::CircularComplement => radius_thresholds(rows, cols)
            .into_iter()
            .map(|r| Pattern::CircularComplement { r })
            .collect(),
        PatternFamily::Ring => {
            // An annulus strictly below the innermost cells realizes zero
            // pairs; the threshold ladder covers the rest.
            let d_min = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| distance(i, j, rows, cols)))
                .filter(|&d| d > 0.0)
                .fold(f64::INFINITY, f64::min);
            let mut candidates = Vec::new();
            if d_min.is_finite() {
                candidates.push(Pattern::Ring {
                    r_in: d_min / 4.0,
                    r_out: d_min / 2.0,
                });
            }
            candidates.extend(
                radius_thresholds(rows, cols)
                    .into_iter()
                    .filter(|&r| r > 0.0)
                    .map(|r_out| Pattern::Ring {
                        r_in: r_out / 2.0,
                        r_out,
                    }),
            );
            candidates
        }
        PatternFamily::Row => (0..=rows)
            .map(|count| Pattern::Row {
                start: (rows - count) / 2,
                count,
            })
            .collect(),
        PatternFamily::Column => (0..=cols)
            .map(|count| Pattern::Column {
                start: (cols - count) / 2,
                count,
            })
            .collect(),
    };
    let mut best: Option<(usize, Pattern)> = None;
    for pattern in candidates {
        let count = build_mask(&pattern, rows, cols)?.pair_count();
        let better = match &best {
            None => true,
            Some((c, _)) => {
                count.abs_diff(target) < c.abs_diff(target)
                    || (count.abs_diff(target) == c.abs_diff(target) && count < *c)
            }
        };
        if better {
            best = Some((count, pattern));
        }
    }
    Ok(best.expect("candidate list is non-empty").1)
}

/// Radii r_0 < r_1 < ... that step the circular mask through every
/// achievable pair count: midpoints between consecutive distinct cell
/// distances, plus one below the minimum and one above the maximum.
fn radius_thresholds(rows: usize, cols: usize) -> Vec<f64> {
    let mut distances: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| distance(i, j, rows, cols)))
        .collect();
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    distances.dedup();
    let mut thresholds = vec![0.0];
    for pair in distances.windows(2) {
        thresholds.push(0.5 * (pair[0] + pair[1]));
    }
    let max = distances.last().expect("non-empty grid");
    thresholds.push((max + 0.01).min(1.0));
    thresholds
}

//! Filament-gap to conductance law for the analog memory cell.
//!
//! Conductance decays exponentially with tunneling-gap width:
//! `G(g) = G_on * exp(-(g - gap_min) / g0)` with `g0` chosen so the gap
//! range maps exactly onto `[G_off, G_on]`. Endpoints are special-cased so
//! the extremes are exact, not within-rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conductance at minimum gap (fully formed filament), siemens.
pub const G_ON: f64 = 1.8e-3;
/// Conductance at maximum gap (dissolved filament), siemens.
pub const G_OFF: f64 = 4.4e-6;
/// Minimum tunneling gap, nanometers.
pub const GAP_MIN_NM: f64 = 0.2;
/// Maximum tunneling gap, nanometers.
pub const GAP_MAX_NM: f64 = 1.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    pub g_on: f64,
    pub g_off: f64,
    pub gap_min_nm: f64,
    pub gap_max_nm: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            g_on: G_ON,
            g_off: G_OFF,
            gap_min_nm: GAP_MIN_NM,
            gap_max_nm: GAP_MAX_NM,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.g_on.is_finite()
            && self.g_off.is_finite()
            && self.gap_min_nm.is_finite()
            && self.gap_max_nm.is_finite()
            && self.g_off > 0.0
            && self.g_on > self.g_off
            && self.gap_min_nm >= 0.0
            && self.gap_max_nm > self.gap_min_nm;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "device parameters need 0 < g_off < g_on and 0 <= gap_min < gap_max, got {self:?}"
            )))
        }
    }

    /// Decay constant, nanometers.
    pub fn g0_nm(&self) -> f64 {
        (self.gap_max_nm - self.gap_min_nm) / (self.g_on / self.g_off).ln()
    }

    /// Conductance for a gap in `[gap_min_nm, gap_max_nm]`. Exact at the
    /// endpoints.
    pub fn conductance_from_gap(&self, gap_nm: f64) -> Result<f64> {
        if !gap_nm.is_finite() || gap_nm < self.gap_min_nm || gap_nm > self.gap_max_nm {
            return Err(Error::OutOfRange(format!(
                "gap {gap_nm} nm outside [{}, {}] nm",
                self.gap_min_nm, self.gap_max_nm
            )));
        }
        if gap_nm == self.gap_min_nm {
            return Ok(self.g_on);
        }
        if gap_nm == self.gap_max_nm {
            return Ok(self.g_off);
        }
        Ok(self.g_on * (-(gap_nm - self.gap_min_nm) / self.g0_nm()).exp())
    }

    /// Gap for a conductance in `[g_off, g_on]`. Exact at the endpoints.
    pub fn gap_from_conductance(&self, g: f64) -> Result<f64> {
        if !g.is_finite() || g < self.g_off || g > self.g_on {
            return Err(Error::OutOfRange(format!(
                "conductance {g} S outside [{}, {}] S",
                self.g_off, self.g_on
            )));
        }
        if g == self.g_on {
            return Ok(self.gap_min_nm);
        }
        if g == self.g_off {
            return Ok(self.gap_max_nm);
        }
        Ok(self.gap_min_nm + self.g0_nm() * (self.g_on / g).ln())
    }
}

/// How a pair's conductances came to be. Mapped pairs keep the reference
/// side at `g_off`; stuck pairs record the fault that overwrote them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    Mapped,
    StuckOn,
    StuckOff,
    StuckAt,
}

/// One signed weight stored as two physical devices on paired columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReramPair {
    pub g_plus: f64,
    pub g_minus: f64,
    pub origin: PairOrigin,
}

impl ReramPair {
    /// Signed differential conductance `G+ - G-`.
    pub fn differential(&self) -> f64 {
        self.g_plus - self.g_minus
    }
}

/// Encode a weight as a differential pair: the weight side gets
/// `g_off + (|w|/w_max)(g_on - g_off)`, the reference side stays at `g_off`.
pub fn map_weight(w: f64, w_max: f64, params: &DeviceParams) -> Result<ReramPair> {
    if w_max <= 0.0 || !w_max.is_finite() {
        return Err(Error::OutOfRange(format!("w_max must be positive, got {w_max}")));
    }
    if !w.is_finite() {
        return Err(Error::OutOfRange(format!("non-finite weight {w}")));
    }
    if w.abs() > w_max {
        return Err(Error::OutOfRange(format!("|{w}| exceeds w_max {w_max}")));
    }
    let g_weight = params.g_off + (w.abs() / w_max) * (params.g_on - params.g_off);
    let (g_plus, g_minus) = if w >= 0.0 {
        (g_weight, params.g_off)
    } else {
        (params.g_off, g_weight)
    };
    Ok(ReramPair {
        g_plus,
        g_minus,
        origin: PairOrigin::Mapped,
    })
}

/// Invert [`map_weight`]: the weight a pair realizes at a given `w_max`.
pub fn weight_from_pair(pair: &ReramPair, w_max: f64, params: &DeviceParams) -> f64 {
    pair.differential() / (params.g_on - params.g_off) * w_max
}

/// [`DeviceParams::conductance_from_gap`] with the pinned defaults.
pub fn conductance_from_gap(gap_nm: f64) -> Result<f64> {
    DeviceParams::default().conductance_from_gap(gap_nm)
}

/// [`DeviceParams::gap_from_conductance`] with the pinned defaults.
pub fn gap_from_conductance(g: f64) -> Result<f64> {
    DeviceParams::default().gap_from_conductance(g)
}

//! Flat resistor netlist for a mapped (possibly defective) stack, plus the
//! built-in reader used to verify exports.
//!
//! One resistor element per physical device. Naming convention:
//! element `R_A{k}_R{i}_C{j}_{P|M}` sits at row i, logical column j of
//! array k; side P is the weight device (G+), side M the reference (G-).
//! Nodes: `a{k}_r{i}` row line, `a{k}_c{j}p` / `a{k}_c{j}m` column lines.
//! A device with G = 0 has no finite resistance and is emitted as an
//! open-circuit stub comment (`* open <name> <node> <node>`). Output
//! stages appear as behavioral one-liners, one per logical column.

use std::collections::HashMap;
use std::path::Path;

use crate::crossbar::CrossbarStack;
use crate::error::{Error, Result};
use crate::report::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairSide {
    Plus,
    Minus,
}

impl PairSide {
    fn letter(&self) -> &'static str {
        match self {
            PairSide::Plus => "P",
            PairSide::Minus => "M",
        }
    }
}

pub fn export_netlist(stack: &CrossbarStack) -> String {
    let mut out = String::new();
    out.push_str("* analog crossbar resistor netlist\n");
    out.push_str("* nodes: a{k}_r{i} row line; a{k}_c{j}p / a{k}_c{j}m weight/reference column lines\n");
    out.push_str("* elements: R_A{k}_R{i}_C{j}_{P|M} resistor, value ohms; G = 0 devices are open stubs\n");
    out.push_str("* output stages: B_A{k}_C{j} behavioral comparator, T in V/A, rect 1 = rectifying\n");
    for (k, arr) in stack.arrays().iter().enumerate() {
        out.push_str(&format!(
            "* array {k}: {} rows x {} logical columns, w_max {}\n",
            arr.rows(),
            arr.cols(),
            fmt_f64(arr.w_max())
        ));
        for i in 0..arr.rows() {
            for j in 0..arr.cols() {
                let pair = arr.pair(i, j);
                for (side, g) in [(PairSide::Plus, pair.g_plus), (PairSide::Minus, pair.g_minus)] {
                    let name = format!("R_A{k}_R{i}_C{j}_{}", side.letter());
                    let col_node = format!("a{k}_c{j}{}", side.letter().to_lowercase());
                    if g == 0.0 {
                        out.push_str(&format!("* open {name} a{k}_r{i} {col_node}\n"));
                    } else {
                        out.push_str(&format!(
                            "{name} a{k}_r{i} {col_node} {}\n",
                            fmt_f64(1.0 / g)
                        ));
                    }
                }
            }
        }
        for j in 0..arr.cols() {
            out.push_str(&format!(
                "B_A{k}_C{j} a{k}_c{j}p a{k}_c{j}m out_a{k}_c{j} comparator T={} rect={}\n",
                fmt_f64(arr.transimpedance()),
                u8::from(arr.rectify())
            ));
        }
    }
    out.push_str(".end\n");
    out
}

pub fn write_netlist(stack: &CrossbarStack, path: &Path) -> Result<()> {
    let text = export_netlist(stack);
    verify_netlist(stack, &text)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ParsedNetlist {
    conductances: HashMap<(usize, usize, usize, PairSide), f64>,
    pub resistor_elements: usize,
    pub open_stubs: usize,
    pub behavioral_elements: usize,
}

impl ParsedNetlist {
    /// Device elements of both kinds; must equal 2 x logical pairs.
    pub fn device_elements(&self) -> usize {
        self.resistor_elements + self.open_stubs
    }

    pub fn conductance(&self, array: usize, row: usize, col: usize, side: PairSide) -> Option<f64> {
        self.conductances.get(&(array, row, col, side)).copied()
    }
}

fn parse_element_name(name: &str) -> Result<(usize, usize, usize, PairSide)> {
    let bad = || Error::Netlist(format!("malformed element name {name}"));
    let mut parts = name.split('_');
    if parts.next() != Some("R") {
        return Err(bad());
    }
    let idx = |part: Option<&str>, prefix: &str| -> Result<usize> {
        part.and_then(|p| p.strip_prefix(prefix))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)
    };
    let array = idx(parts.next(), "A")?;
    let row = idx(parts.next(), "R")?;
    let col = idx(parts.next(), "C")?;
    let side = match parts.next() {
        Some("P") => PairSide::Plus,
        Some("M") => PairSide::Minus,
        _ => return Err(bad()),
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((array, row, col, side))
}

pub fn parse_netlist(text: &str) -> Result<ParsedNetlist> {
    let mut parsed = ParsedNetlist {
        conductances: HashMap::new(),
        resistor_elements: 0,
        open_stubs: 0,
        behavioral_elements: 0,
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let err = |msg: &str| Error::Netlist(format!("line {}: {msg}", lineno + 1));
        if line.is_empty() || line == ".end" {
            continue;
        }
        if let Some(stub) = line.strip_prefix("* open ") {
            let tokens: Vec<&str> = stub.split_whitespace().collect();
            if tokens.len() != 3 {
                return Err(err("open stub needs name and two nodes"));
            }
            let key = parse_element_name(tokens[0])?;
            if parsed.conductances.insert(key, 0.0).is_some() {
                return Err(err("duplicate element"));
            }
            parsed.open_stubs += 1;
            continue;
        }
        if line.starts_with('*') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if line.starts_with('R') {
            if tokens.len() != 4 {
                return Err(err("resistor needs name, two nodes, value"));
            }
            let key = parse_element_name(tokens[0])?;
            let ohms: f64 = tokens[3]
                .parse()
                .map_err(|_| err("unparseable resistance"))?;
            if ohms <= 0.0 || !ohms.is_finite() {
                return Err(err("resistance must be positive and finite"));
            }
            if parsed.conductances.insert(key, 1.0 / ohms).is_some() {
                return Err(err("duplicate element"));
            }
            parsed.resistor_elements += 1;
        } else if line.starts_with('B') {
            parsed.behavioral_elements += 1;
        } else {
            return Err(err("unrecognized element"));
        }
    }
    Ok(parsed)
}

/// Re-parse an export and check element count and per-device conductance
/// round-trip (relative 1e-9; zeros must come back exactly 0).
pub fn verify_netlist(stack: &CrossbarStack, text: &str) -> Result<()> {
    let parsed = parse_netlist(text)?;
    let expect = 2 * stack.total_pairs();
    if parsed.device_elements() != expect {
        return Err(Error::Netlist(format!(
            "element count {} != 2 x {} pairs",
            parsed.device_elements(),
            stack.total_pairs()
        )));
    }
    for (k, arr) in stack.arrays().iter().enumerate() {
        for i in 0..arr.rows() {
            for j in 0..arr.cols() {
                let pair = arr.pair(i, j);
                for (side, want) in
                    [(PairSide::Plus, pair.g_plus), (PairSide::Minus, pair.g_minus)]
                {
                    let got = parsed.conductance(k, i, j, side).ok_or_else(|| {
                        Error::Netlist(format!("missing device A{k} R{i} C{j} {side:?}"))
                    })?;
                    let ok = if want == 0.0 {
                        got == 0.0
                    } else {
                        ((got - want) / want).abs() <= 1e-9
                    };
                    if !ok {
                        return Err(Error::Netlist(format!(
                            "conductance mismatch at A{k} R{i} C{j} {side:?}: {got} vs {want}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::map_network;
    use crate::defects::{apply_defects, DefectSpec, FaultMode, Pattern};
    use crate::device::DeviceParams;
    use crate::mlp::{dense_topology, MlpModel};

    fn digit_stack() -> CrossbarStack {
        let model = MlpModel::init(dense_topology(64, &[50, 20, 8], 10), 3).unwrap();
        map_network(&model, &DeviceParams::default()).unwrap()
    }

    #[test]
    fn digit_stack_has_9056_device_elements() {
        let stack = digit_stack();
        let parsed = parse_netlist(&export_netlist(&stack)).unwrap();
        assert_eq!(parsed.device_elements(), 9056);
        assert_eq!(parsed.resistor_elements, 9056);
        assert_eq!(parsed.open_stubs, 0);
        assert_eq!(parsed.behavioral_elements, 50 + 20 + 8 + 10);
    }

    #[test]
    fn round_trip_conductances_within_1e9() {
        let stack = digit_stack();
        verify_netlist(&stack, &export_netlist(&stack)).unwrap();
    }

    #[test]
    fn stuck_off_cells_become_open_stubs() {
        let stack = digit_stack();
        let spec = DefectSpec {
            target_array: 0,
            pattern: Pattern::Row { start: 0, count: 1 },
            mode: FaultMode::StuckOff,
        };
        let defective = apply_defects(&stack, &spec).unwrap();
        let text = export_netlist(&defective);
        let parsed = parse_netlist(&text).unwrap();
        assert_eq!(parsed.open_stubs, 100);
        assert_eq!(parsed.device_elements(), 9056);
        assert_eq!(parsed.conductance(0, 0, 0, PairSide::Plus), Some(0.0));
        assert!(!text.lines().any(|l| l.starts_with("R_A0_R0_C0_P")));
        verify_netlist(&defective, &text).unwrap();
    }

    #[test]
    fn verify_catches_tampering() {
        let stack = digit_stack();
        let text = export_netlist(&stack);
        let tampered = text.replacen("R_A0_R0_C0_P", "R_A0_R9_C0_P", 1);
        assert!(verify_netlist(&stack, &tampered).is_err());
        let truncated: String = text
            .lines()
            .filter(|l| !l.starts_with("R_A1"))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(verify_netlist(&stack, &truncated).is_err());
    }

    #[test]
    fn parser_rejects_malformed_lines() {
        assert!(parse_netlist("R_A0_R0_C0_P a b\n").is_err());
        assert!(parse_netlist("R_bogus a b 1.0\n").is_err());
        assert!(parse_netlist("X1 a b c\n").is_err());
        assert!(parse_netlist("R_A0_R0_C0_P a b -5.0\n").is_err());
        assert!(parse_netlist("* open R_A0_R0_C0_P a\n").is_err());
    }

    #[test]
    fn parser_ignores_comments_and_end() {
        let parsed = parse_netlist("* comment\n\n.end\n").unwrap();
        assert_eq!(parsed.device_elements(), 0);
    }
}

use serde::{Deserialize, Serialize};

use super::CostModel;

/// Filter selectivities the fusion gain table is evaluated at.
pub const SELECTIVITIES: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];

/// Fractional latency saving of the fused plan over the sequential one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub selectivity: f64,
    pub map_filter: f64,
    pub filter_map: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GainTable {
    /// One row per entry of `SELECTIVITIES`, in that order.
    pub rows: Vec<GainRow>,
}

/// Violations of the target fusion pattern; empty when it holds:
/// Map→Filter gain in [15%, 30%] everywhere; Filter→Map gain negative at
/// 10%, crossing zero in (30%, 50%], above 15% at 100%, and nondecreasing.
pub fn check_gain_table(t: &GainTable) -> Vec<String> {
    let mut v = Vec::new();
    let at = |s: f64| t.rows.iter().find(|r| (r.selectivity - s).abs() < 1e-9);
    for s in SELECTIVITIES {
        if at(s).is_none() {
            v.push(format!("missing row for selectivity {s}"));
        }
    }
    if !v.is_empty() {
        return v;
    }
    for r in &t.rows {
        if !(0.15..=0.30).contains(&r.map_filter) {
            v.push(format!("map→filter gain {:.4} at s={} outside [0.15, 0.30]", r.map_filter, r.selectivity));
        }
    }
    let fm = |s: f64| at(s).expect("checked").filter_map;
    if fm(0.1) >= 0.0 {
        v.push(format!("filter→map gain {:.4} at s=0.1 is not negative", fm(0.1)));
    }
    if !(fm(0.3) < 0.0 && fm(0.5) >= 0.0) {
        v.push(format!("filter→map gain does not cross zero in (0.3, 0.5]: {:.4} → {:.4}", fm(0.3), fm(0.5)));
    }
    if fm(1.0) <= 0.15 {
        v.push(format!("filter→map gain {:.4} at s=1.0 is not above 0.15", fm(1.0)));
    }
    let mut rows = t.rows.clone();
    rows.sort_by(|a, b| a.selectivity.total_cmp(&b.selectivity));
    for w in rows.windows(2) {
        if w[1].filter_map < w[0].filter_map {
            v.push(format!("filter→map gain decreases from s={} to s={}", w[0].selectivity, w[1].selectivity));
        }
    }
    v
}

/// Candidate coefficients, searched in field order with the last field varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationGrid {
    pub base_latency_s: Vec<f64>,
    pub completion_token_cost_s: Vec<f64>,
    pub uncached_prompt_token_cost_s: Vec<f64>,
    /// Multiples of the uncached cost; only values below 1 are admissible.
    pub cached_cost_ratio: Vec<f64>,
}

fn steps(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((start + step * i as f64) * 1e6).round() / 1e6).collect()
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        CalibrationGrid {
            base_latency_s: steps(0.05, 0.01, 46),
            completion_token_cost_s: vec![0.02],
            uncached_prompt_token_cost_s: steps(0.0005, 0.0005, 20),
            cached_cost_ratio: vec![0.05, 0.1, 0.2],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("no grid point satisfies the fusion gain pattern")]
    CalibrationFailed,
    #[error("gain evaluation failed: {0}")]
    Evaluation(String),
}

/// First model in grid order whose gain table passes `check_gain_table`.
pub fn calibrate<F, E>(grid: &CalibrationGrid, mut gains: F) -> Result<CostModel, CalibrationError>
where
    F: FnMut(&CostModel) -> Result<GainTable, E>,
    E: std::fmt::Display,
{
    for &b in &grid.base_latency_s {
        for &m in &grid.completion_token_cost_s {
            for &u in &grid.uncached_prompt_token_cost_s {
                for &r in &grid.cached_cost_ratio {
                    let model = CostModel {
                        base_latency_s: b,
                        uncached_prompt_token_cost_s: u,
                        cached_prompt_token_cost_s: ((u * r) * 1e9).round() / 1e9,
                        completion_token_cost_s: m,
                    };
                    if r >= 1.0 || model.validate().is_err() {
                        continue;
                    }
                    let table = gains(&model).map_err(|e| CalibrationError::Evaluation(e.to_string()))?;
                    if check_gain_table(&table).is_empty() {
                        return Ok(model);
                    }
                }
            }
        }
    }
    Err(CalibrationError::CalibrationFailed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(mf: [f64; 5], fm: [f64; 5]) -> GainTable {
        GainTable {
            rows: SELECTIVITIES
                .iter()
                .enumerate()
                .map(|(i, &s)| GainRow { selectivity: s, map_filter: mf[i], filter_map: fm[i] })
                .collect(),
        }
    }

    #[test]
    fn published_pattern_satisfies_constraints() {
        let t = table([0.2311, 0.2340, 0.2172, 0.2116, 0.1942], [-0.1035, -0.0399, 0.0321, 0.1627, 0.2117]);
        assert_eq!(check_gain_table(&t), Vec::<String>::new());
    }

    #[test]
    fn violations_are_reported() {
        let t = table([0.1, 0.2, 0.2, 0.2, 0.2], [0.01, 0.02, 0.01, 0.1, 0.1]);
        let v = check_gain_table(&t);
        assert_eq!(v.len(), 5, "{v:?}");
    }

    #[test]
    fn calibration_is_first_in_grid_order() {
        let grid = CalibrationGrid::default();
        let m = calibrate(&grid, |m| {
            let ok = m.base_latency_s >= 0.2 && m.uncached_prompt_token_cost_s >= 0.002;
            let good = table([0.2; 5], [-0.1, -0.01, 0.05, 0.1, 0.2]);
            Ok::<_, String>(if ok { good } else { GainTable::default() })
        })
        .unwrap();
        assert_eq!((m.base_latency_s, m.uncached_prompt_token_cost_s), (0.2, 0.002));
        assert!(matches!(calibrate(&grid, |_| Ok::<_, String>(GainTable::default())), Err(CalibrationError::CalibrationFailed)));
    }
}

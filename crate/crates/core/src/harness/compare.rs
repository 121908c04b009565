//! Side-by-side reports over run summaries, plus the bundled published
//! reference tables.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Mode;

use super::run::RunSummary;

const REFERENCE_JSON: &str = include_str!("../../data/reference_tables.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRow {
    pub model: String,
    pub dataset: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityTable {
    pub columns: Vec<String>,
    pub rows: Vec<VulnerabilityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub model: String,
    pub dataset: String,
    pub clean: f64,
    pub attack: f64,
    pub ours: f64,
}

impl DefenseRow {
    pub fn attack_over_ours(&self) -> f64 {
        self.attack / self.ours
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTable {
    pub attack: String,
    pub rate: f64,
    pub rows: Vec<DefenseRow>,
}

/// Published perplexities (not reproduced here) shown as context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTables {
    pub note: String,
    pub vulnerability: VulnerabilityTable,
    pub defense: DefenseTable,
}

impl ReferenceTables {
    pub fn bundled() -> &'static ReferenceTables {
        static TABLES: OnceLock<ReferenceTables> = OnceLock::new();
        TABLES.get_or_init(|| serde_json::from_str(REFERENCE_JSON).expect("bundled reference data parses"))
    }

    /// Largest attacked/defended perplexity ratio across the defense table.
    pub fn max_improvement(&self) -> Option<(&DefenseRow, f64)> {
        self.defense
            .rows
            .iter()
            .map(|r| (r, r.attack_over_ours()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mode: Mode,
    pub attack: String,
    pub rate: f64,
    pub final_loss: f64,
    pub final_ppl: f64,
    pub final_eval_loss: f64,
    /// `final_loss` relative to the first run.
    pub loss_ratio: f64,
    pub detection_rate: Option<f64>,
    pub messages_total: u64,
    pub recomputations: u64,
    /// Messages relative to the overhead reference run.
    pub message_overhead: f64,
    pub recomputation_overhead: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Label of the run overheads are measured against: the first clean
    /// baseline run, else the first run.
    pub overhead_reference: String,
    /// Undefended attacked loss over clean loss.
    pub attacked_over_clean: Option<f64>,
    /// Undefended attacked loss over defended loss.
    pub attacked_over_defended: Option<f64>,
    pub defended_over_clean: Option<f64>,
    /// Largest attacked/defended ratio in the bundled reference table, for
    /// reading `attacked_over_defended` against.
    pub reference_attack_over_ours: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        if num == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num as f64 / den as f64
    }
}

/// Tabulates labelled summaries. The first clean run is "clean", the first
/// attacked baseline run "attacked", and the first attacked robust run
/// "defended".
pub fn compare_runs(runs: &[(String, RunSummary)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Comparison("at least two summaries are required".into()));
    }
    let first = &runs[0].1;
    for (label, s) in &runs[1..] {
        if s.spec != first.spec {
            return Err(Error::Comparison(format!(
                "`{label}` ran a different task ({:?}) than `{}` ({:?})",
                s.spec, runs[0].0, first.spec
            )));
        }
    }
    let reference = runs
        .iter()
        .find(|(_, s)| s.is_clean() && s.mode == Mode::Baseline)
        .unwrap_or(&runs[0]);
    let rows = runs
        .iter()
        .map(|(label, s)| ComparisonRow {
            label: label.clone(),
            mode: s.mode,
            attack: s.attack.as_str().to_string(),
            rate: s.attack_rate,
            final_loss: s.final_loss,
            final_ppl: s.final_ppl,
            final_eval_loss: s.final_eval_loss,
            loss_ratio: s.final_loss / first.final_loss,
            detection_rate: s.detection_rate,
            messages_total: s.messages_total,
            recomputations: s.recomputations,
            message_overhead: ratio(s.messages_total, reference.1.messages_total),
            recomputation_overhead: (reference.1.recomputations > 0)
                .then(|| ratio(s.recomputations, reference.1.recomputations)),
        })
        .collect();

    let pick = |f: &dyn Fn(&RunSummary) -> bool| runs.iter().map(|(_, s)| s).find(|s| f(s));
    let clean = pick(&|s| s.is_clean());
    let attacked = pick(&|s| !s.is_clean() && s.mode == Mode::Baseline);
    let defended = pick(&|s| !s.is_clean() && s.mode.is_robust());
    let over = |a: Option<&RunSummary>, b: Option<&RunSummary>| {
        a.zip(b).map(|(a, b)| a.final_loss / b.final_loss)
    };
    Ok(Comparison {
        rows,
        overhead_reference: reference.0.clone(),
        attacked_over_clean: over(attacked, clean),
        attacked_over_defended: over(attacked, defended),
        defended_over_clean: over(defended, clean),
        reference_attack_over_ours: ReferenceTables::bundled().max_improvement().map(|(_, r)| r),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.label.len()).chain([3]).max().unwrap_or(3);
        writeln!(
            f,
            "{:<w$} {:<15} {:<16} {:>5} {:>11} {:>11} {:>10} {:>9} {:>9} {:>9}",
            "run", "mode", "attack", "rate", "final_loss", "final_ppl", "loss_ratio", "detect", "msg_x", "recomp_x"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<w$} {:<15} {:<16} {:>5.2} {:>11.5} {:>11.4} {:>10.4} {:>9} {:>9.3} {:>9}",
                r.label,
                r.mode.as_str(),
                r.attack,
                r.rate,
                r.final_loss,
                r.final_ppl,
                r.loss_ratio,
                opt(r.detection_rate),
                r.message_overhead,
                opt(r.recomputation_overhead),
            )?;
        }
        writeln!(f)?;
        writeln!(f, "overheads relative to: {}", self.overhead_reference)?;
        writeln!(f, "attacked / clean:    {}", opt(self.attacked_over_clean))?;
        writeln!(f, "attacked / defended: {}", opt(self.attacked_over_defended))?;
        writeln!(f, "defended / clean:    {}", opt(self.defended_over_clean))?;
        writeln!(f, "reference attack / ours (max): {}", opt(self.reference_attack_over_ours))?;
        Ok(())
    }
}

impl fmt::Display for ReferenceTables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Reference perplexities ({})", self.note)?;
        write!(f, "{:<12} {:<12}", "model", "dataset")?;
        for c in &self.vulnerability.columns {
            write!(f, " {c:>12}")?;
        }
        writeln!(f)?;
        for r in &self.vulnerability.rows {
            write!(f, "{:<12} {:<12}", r.model, r.dataset)?;
            for v in &r.values {
                write!(f, " {v:>12.2}")?;
            }
            writeln!(f)?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<12} {:<12} {:>10} {:>10} {:>10} {:>12}   ({} attack, rate {})",
            "model", "dataset", "clean", "attack", "ours", "attack/ours", self.defense.attack, self.defense.rate
        )?;
        for r in &self.defense.rows {
            writeln!(
                f,
                "{:<12} {:<12} {:>10.2} {:>10.2} {:>10.2} {:>12.2}",
                r.model,
                r.dataset,
                r.clean,
                r.attack,
                r.ours,
                r.attack_over_ours()
            )?;
        }
        if let Some((row, best)) = self.max_improvement() {
            writeln!(f, "largest attack/ours ratio: {best:.2} ({} on {})", row.model, row.dataset)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables_parse() {
        let t = ReferenceTables::bundled();
        assert_eq!(t.vulnerability.rows.len(), 6);
        assert_eq!(t.defense.rows.len(), 8);
        assert!(t.vulnerability.rows.iter().all(|r| r.values.len() == t.vulnerability.columns.len()));
    }
}

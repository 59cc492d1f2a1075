//! Static insertion counts, the linear overhead model and measured overhead.
//!
//! The model multiplies each function's inserted instructions by how often
//! the function ran. Instructions only reached when a check fails
//! (`trap_only`) are never executed on a completed run, so they are left out
//! of the per-call cost.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::{RunResult, TrapReason};
use crate::ir::{Instr, Module};
use crate::passes::table_shuffle::ShuffleReport;
use crate::passes::{CategoryCounts, FunctionStats};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverheadError {
    #[error("function {index} is `{before}` before the transform but `{after}` after")]
    FunctionMismatch {
        index: usize,
        before: String,
        after: String,
    },
    #[error("transformed module has {after} functions, fewer than the original {before}")]
    MissingFunctions { before: usize, after: usize },
    #[error("function `{0}` lost instructions in the transform")]
    NegativeCount(String),
    #[error("{which} run trapped ({reason}); overhead is undefined on trapping paths")]
    Trapped {
        which: &'static str,
        reason: TrapReason,
    },
}

fn canary_traps(body: &[Instr]) -> u64 {
    body.iter().filter(|i| **i == Instr::CanaryTrap).count() as u64
}

/// Per-function `after - before` by category.
///
/// Functions appended by the transform (the embedded PRNG) count as fully
/// inserted; their bodies run only because of the instrumentation.
pub fn static_insertion_stats(
    before: &Module,
    after: &Module,
) -> Result<Vec<FunctionStats>, OverheadError> {
    let n = before.functions.len();
    if after.functions.len() < n {
        return Err(OverheadError::MissingFunctions {
            before: n,
            after: after.functions.len(),
        });
    }
    let mut out = Vec::with_capacity(after.functions.len());
    for (i, g) in after.functions.iter().enumerate() {
        let name = after.function_key(i);
        let (base, base_traps) = match before.functions.get(i) {
            Some(f) => {
                let old = before.function_key(i);
                if old != name {
                    return Err(OverheadError::FunctionMismatch {
                        index: i,
                        before: old,
                        after: name,
                    });
                }
                (CategoryCounts::of(&f.body), canary_traps(&f.body))
            }
            None => (CategoryCounts::default(), 0),
        };
        let inserted = CategoryCounts::of(&g.body)
            .checked_sub(&base)
            .ok_or_else(|| OverheadError::NegativeCount(name.clone()))?;
        let unchanged = i < n && g.body == before.functions[i].body;
        out.push(FunctionStats {
            name,
            skipped: unchanged,
            inserted,
            trap_only: canary_traps(&g.body).saturating_sub(base_traps),
        });
    }
    Ok(out)
}

/// Instructions a completed call to the function executes beyond the original.
pub fn executed_per_call(stats: &FunctionStats) -> u64 {
    stats.inserted.total() - stats.trap_only
}

/// Sum over functions of per-call inserted cost times call count.
pub fn predict_overhead(stats: &[FunctionStats], calls: &BTreeMap<String, u64>) -> u64 {
    stats
        .iter()
        .map(|f| executed_per_call(f) * calls.get(&f.name).copied().unwrap_or(0))
        .sum()
}

/// `protected.total - base.total` for two completed runs on the same input.
pub fn measure_overhead(base: &RunResult, protected: &RunResult) -> Result<i64, OverheadError> {
    for (which, run) in [("base", base), ("protected", protected)] {
        if let Some(reason) = run.trap() {
            return Err(OverheadError::Trapped { which, reason });
        }
    }
    Ok(protected.total as i64 - base.total as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub arithmetic: u64,
    pub variable: u64,
    pub memory: u64,
    pub control: u64,
    pub reference: bool,
}

impl ReferenceRow {
    pub fn total(&self) -> u64 {
        self.arithmetic + self.variable + self.memory + self.control
    }

    pub fn counts(&self) -> CategoryCounts {
        CategoryCounts {
            arithmetic: self.arithmetic,
            variable: self.variable,
            memory: self.memory,
            control: self.control,
            other: 0,
        }
    }
}

/// Published per-function instruction overhead, reproduced as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRows {
    pub aslr: ReferenceRow,
    pub canary: ReferenceRow,
}

pub const REFERENCE_ROWS: ReferenceRows = ReferenceRows {
    aslr: ReferenceRow {
        arithmetic: 21,
        variable: 12,
        memory: 0,
        control: 0,
        reference: true,
    },
    canary: ReferenceRow {
        arithmetic: 16,
        variable: 16,
        memory: 2,
        control: 5,
        reference: true,
    },
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub name: String,
    pub inserted: CategoryCounts,
    pub calls: u64,
    #[serde(default)]
    pub trap_only: u64,
}

impl FunctionEntry {
    pub fn stats(&self) -> FunctionStats {
        FunctionStats {
            name: self.name.clone(),
            skipped: self.inserted.total() == 0,
            inserted: self.inserted,
            trap_only: self.trap_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub passes: Vec<String>,
    pub functions: Vec<FunctionEntry>,
    #[serde(rename = "paper_reference")]
    pub reference_rows: ReferenceRows,
    pub predicted_extra: Option<u64>,
    pub measured_extra: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_shuffle: Option<serde_json::Value>,
}

impl OverheadReport {
    pub fn new(passes: &[&str], stats: &[FunctionStats], shuffle: Option<&ShuffleReport>) -> Self {
        OverheadReport {
            passes: passes.iter().map(|p| p.to_string()).collect(),
            functions: stats
                .iter()
                .map(|s| FunctionEntry {
                    name: s.name.clone(),
                    inserted: s.inserted,
                    calls: 0,
                    trap_only: s.trap_only,
                })
                .collect(),
            reference_rows: REFERENCE_ROWS,
            predicted_extra: None,
            measured_extra: None,
            table_shuffle: shuffle.map(|r| serde_json::to_value(r).expect("report serializes")),
        }
    }

    pub fn stats(&self) -> Vec<FunctionStats> {
        self.functions.iter().map(FunctionEntry::stats).collect()
    }

    /// Fills call counts from the protected run and both overhead figures.
    pub fn with_runs(
        mut self,
        base: &RunResult,
        protected: &RunResult,
    ) -> Result<Self, OverheadError> {
        let measured = measure_overhead(base, protected)?;
        for f in &mut self.functions {
            f.calls = protected.calls_to(&f.name);
        }
        self.predicted_extra = Some(predict_overhead(&self.stats(), &protected.calls));
        self.measured_extra = Some(measured);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

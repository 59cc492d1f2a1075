//! Experimental: compile-time permutation of indirect-table slots.
//!
//! Entries only move among slots whose occupants share a signature, so the
//! runtime signature check of `call_indirect` sees the same types per slot.
//! Call sites are rewritten only for the `i32.const k; call_indirect`
//! pattern. Any other call site is reported as uncovered.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::ir::{ConstExpr, Instr, Module, ValType};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShuffleError {
    #[error("element segment {0} has a non-constant offset; table shuffle unsupported")]
    NonConstantOffset(usize),
    #[error("element segment {0} has a negative offset")]
    NegativeOffset(usize),
    #[error("{0} indirect call site(s) cannot be rewritten; refusing in strict mode")]
    UncoveredCallSites(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlotMove {
    pub slot: u32,
    pub function: String,
    pub new_slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallSite {
    pub function: String,
    /// Instruction position of the `call_indirect` in the function body.
    pub position: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_index: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_index: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ShuffleReport {
    pub permutation: Vec<SlotMove>,
    pub rewritten: Vec<CallSite>,
    pub uncovered: Vec<CallSite>,
}

impl ShuffleReport {
    pub fn new_slot(&self, slot: u32) -> Option<u32> {
        self.permutation
            .iter()
            .find(|m| m.slot == slot)
            .map(|m| m.new_slot)
    }
}

type SigKey = (Vec<ValType>, Option<ValType>);

/// Final slot occupancy after applying every element segment in order.
pub fn table_slots(module: &Module) -> Result<BTreeMap<u32, u32>, ShuffleError> {
    let mut slots = BTreeMap::new();
    for (i, seg) in module.elems.iter().enumerate() {
        let base = match seg.offset {
            ConstExpr::I32(v) if v >= 0 => v as u32,
            ConstExpr::I32(_) => return Err(ShuffleError::NegativeOffset(i)),
            ConstExpr::GlobalGet(_) => return Err(ShuffleError::NonConstantOffset(i)),
        };
        for (j, &f) in seg.funcs.iter().enumerate() {
            slots.insert(base + j as u32, f);
        }
    }
    Ok(slots)
}

fn func_label(module: &Module, idx: u32) -> String {
    match module.func_name(idx) {
        Some(n) => format!("${n}"),
        None => format!("func[{idx}]"),
    }
}

/// Permutes table slots within signature classes and rewrites constant
/// call-site indices accordingly.
pub fn shuffle_elem_segment(
    module: &mut Module,
    rng: &mut dyn RngCore,
    strict: bool,
) -> Result<ShuffleReport, ShuffleError> {
    let slots = table_slots(module)?;

    let mut uncovered = Vec::new();
    for (fi, f) in module.functions.iter().enumerate() {
        for (pos, ins) in f.body.iter().enumerate() {
            if matches!(ins, Instr::CallIndirect(_))
                && !(pos > 0 && matches!(f.body[pos - 1], Instr::I32Const(_)))
            {
                uncovered.push(CallSite {
                    function: module.function_key(fi),
                    position: pos,
                    old_index: None,
                    new_index: None,
                });
            }
        }
    }
    if strict && !uncovered.is_empty() {
        return Err(ShuffleError::UncoveredCallSites(uncovered.len()));
    }

    let mut classes: BTreeMap<SigKey, Vec<u32>> = BTreeMap::new();
    for (&slot, &f) in &slots {
        let key = module
            .func_type(f)
            .map(|t| (t.params.clone(), t.result))
            .unwrap_or_default();
        classes.entry(key).or_default().push(slot);
    }

    // old slot -> new slot
    let mut moves: BTreeMap<u32, u32> = BTreeMap::new();
    for members in classes.values() {
        let mut targets = members.clone();
        for i in (1..targets.len()).rev() {
            let j = rng.gen_range(0..=i);
            targets.swap(i, j);
        }
        for (&from, &to) in members.iter().zip(&targets) {
            moves.insert(from, to);
        }
    }

    let mut occupant = slots.clone();
    for (&from, &to) in &moves {
        occupant.insert(to, slots[&from]);
    }
    for seg in &mut module.elems {
        let ConstExpr::I32(base) = seg.offset else {
            unreachable!("checked by table_slots")
        };
        for (j, f) in seg.funcs.iter_mut().enumerate() {
            *f = occupant[&(base as u32 + j as u32)];
        }
    }

    let mut rewritten = Vec::new();
    for fi in 0..module.functions.len() {
        let key = module.function_key(fi);
        let body = &mut module.functions[fi].body;
        for pos in 1..body.len() {
            if !matches!(body[pos], Instr::CallIndirect(_)) {
                continue;
            }
            if let Instr::I32Const(k) = body[pos - 1] {
                if let Some(&to) = moves.get(&(k as u32)) {
                    body[pos - 1] = Instr::I32Const(to as i32);
                    rewritten.push(CallSite {
                        function: key.clone(),
                        position: pos,
                        old_index: Some(k as u32),
                        new_index: Some(to),
                    });
                }
            }
        }
    }

    let permutation = moves
        .iter()
        .map(|(&slot, &new_slot)| SlotMove {
            slot,
            function: func_label(module, slots[&slot]),
            new_slot,
        })
        .collect();
    Ok(ShuffleReport {
        permutation,
        rewritten,
        uncovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wat::parse_module;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TABLE: &str = r#"(module
  (type $v (func (result i32)))
  (type $u (func (param i32) (result i32)))
  (func $a (type $v) i32.const 1)
  (func $b (type $v) i32.const 2)
  (func $c (type $u) local.get 0)
  (func $d (type $u) local.get 0)
  (func $main (result i32)
    i32.const 0
    call_indirect (type $v))
  (table 4 funcref)
  (elem (i32.const 0) func $a $b $c $d))"#;

    #[test]
    fn single_entry_is_identity() {
        let mut m =
            parse_module("(module (func $a) (table 1 funcref) (elem (i32.const 0) func $a))")
                .unwrap();
        let report =
            shuffle_elem_segment(&mut m, &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
        assert_eq!(report.new_slot(0), Some(0));
        assert_eq!(m.elems[0].funcs, vec![0]);
    }

    #[test]
    fn swaps_and_rewrites_constant_site() {
        let mut m = parse_module(TABLE).unwrap();
        // StepRng(0, 0) always yields 0, so each Fisher-Yates step swaps with index 0.
        let report = shuffle_elem_segment(&mut m, &mut StepRng::new(0, 0), false).unwrap();
        assert_eq!(report.new_slot(0), Some(1));
        assert_eq!(report.new_slot(1), Some(0));
        assert_eq!(m.elems[0].funcs, vec![1, 0, 3, 2]);
        assert_eq!(m.functions[4].body[0], Instr::I32Const(1));
        assert_eq!(report.rewritten.len(), 1);
        assert!(report.uncovered.is_empty());
    }

    #[test]
    fn no_cross_signature_moves() {
        for seed in 0..32 {
            let mut m = parse_module(TABLE).unwrap();
            let before = table_slots(&m).unwrap();
            shuffle_elem_segment(&mut m, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
            let after = table_slots(&m).unwrap();
            for (slot, f) in &before {
                let old = m.func_type(*f).unwrap();
                let new = m.func_type(after[slot]).unwrap();
                assert!(old.same_signature(new));
            }
        }
    }

    #[test]
    fn uncovered_site_reported_and_strict_refuses() {
        let src = TABLE.replace(
            "i32.const 0\n    call_indirect",
            "i32.const 0\n    nop\n    call_indirect",
        );
        let mut m = parse_module(&src).unwrap();
        let report = shuffle_elem_segment(&mut m, &mut StepRng::new(0, 0), false).unwrap();
        assert_eq!(report.uncovered.len(), 1);
        assert_eq!(report.uncovered[0].function, "$main");
        let mut m = parse_module(&src).unwrap();
        let before = m.clone();
        assert_eq!(
            shuffle_elem_segment(&mut m, &mut StepRng::new(0, 0), true),
            Err(ShuffleError::UncoveredCallSites(1))
        );
        assert_eq!(m, before);
    }

    #[test]
    fn global_offset_unsupported() {
        let mut m = parse_module(
            "(module (global $g i32 (i32.const 0)) (func $a) (table 1 funcref) (elem (global.get $g) func $a))",
        )
        .unwrap();
        assert_eq!(
            shuffle_elem_segment(&mut m, &mut StepRng::new(0, 0), false),
            Err(ShuffleError::NonConstantOffset(0))
        );
    }
}

//! Stack canary: a random word stored just below the caller-visible stack
//! pointer on entry and checked before the function exits.
//!
//! The reference copy lives in a function local, which linear-memory stores
//! cannot reach.

use super::{refuse_runtime, InjectionSite, PassError, Runtime};
use crate::ir::{Function, Instr, MemArg, ValType};

/// Bytes reserved for the canary slot.
pub const CANARY_SIZE: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanaryLocals {
    pub value: u32,
    pub addr: u32,
}

/// Adds the canary prologue and epilogue to a wrapped function.
///
/// Prologue: draw a value into a fresh local, move the stack pointer down by
/// four, store the value at the new stack pointer and remember that address.
/// Epilogue: reload the slot, trap on mismatch, release the four bytes.
pub fn inject_canary(
    func: &mut Function,
    site: &mut InjectionSite,
    rt: &Runtime,
) -> Result<CanaryLocals, PassError> {
    refuse_runtime(func)?;
    let value = func.fresh_local(ValType::I32);
    let addr = func.fresh_local(ValType::I32);
    let sp = rt.sp.global_idx;

    site.ensure_seeded(&rt.prng);
    site.prologue.extend([
        Instr::Call(rt.prng.rand_func),
        Instr::LocalSet(value),
        Instr::GlobalGet(sp),
        Instr::I32Const(CANARY_SIZE),
        Instr::I32Sub,
        Instr::LocalSet(addr),
        Instr::LocalGet(addr),
        Instr::LocalGet(value),
        Instr::I32Store(MemArg::natural(4)),
        Instr::LocalGet(addr),
        Instr::GlobalSet(sp),
    ]);
    site.prepend_epilogue(vec![
        Instr::Block(None),
        Instr::LocalGet(addr),
        Instr::I32Load(MemArg::natural(4)),
        Instr::LocalGet(value),
        Instr::I32Eq,
        Instr::BrIf(0),
        Instr::CanaryTrap,
        Instr::End,
        Instr::GlobalGet(sp),
        Instr::I32Const(CANARY_SIZE),
        Instr::I32Add,
        Instr::GlobalSet(sp),
    ]);
    Ok(CanaryLocals { value, addr })
}

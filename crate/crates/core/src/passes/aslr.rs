//! Per-call stack offset randomization.
//!
//! On entry the stack pointer is lowered by a random, word-aligned offset in
//! `[0, 256)`; the entry value is restored from a saved snapshot on exit.

use super::{refuse_runtime, InjectionSite, PassError, Runtime};
use crate::ir::{Function, Instr, ValType};

pub const OFFSET_SHIFT_RIGHT: i32 = 26;
pub const OFFSET_SHIFT_LEFT: i32 = 2;

/// Number of distinct offsets the shift sequence can produce.
pub const OFFSET_COUNT: u32 = 1 << (32 - OFFSET_SHIFT_RIGHT);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AslrLocals {
    pub sp_save: u32,
}

/// Keeps the top six bits of `r`, scaled to a word offset.
///
/// The shift is logical: an arithmetic shift would turn draws with the top
/// bit set into negative offsets that move the stack pointer into the
/// caller's frame.
pub fn offset_from_random(r: u32) -> u32 {
    (r >> OFFSET_SHIFT_RIGHT) << OFFSET_SHIFT_LEFT
}

pub fn inject_aslr(
    func: &mut Function,
    site: &mut InjectionSite,
    rt: &Runtime,
) -> Result<AslrLocals, PassError> {
    refuse_runtime(func)?;
    let sp_save = func.fresh_local(ValType::I32);
    let sp = rt.sp.global_idx;

    site.ensure_seeded(&rt.prng);
    site.prologue.extend([
        Instr::GlobalGet(sp),
        Instr::LocalTee(sp_save),
        Instr::Call(rt.prng.rand_func),
        Instr::I32Const(OFFSET_SHIFT_RIGHT),
        Instr::I32ShrU,
        Instr::I32Const(OFFSET_SHIFT_LEFT),
        Instr::I32Shl,
        Instr::I32Sub,
        Instr::GlobalSet(sp),
    ]);
    site.prepend_epilogue(vec![Instr::LocalGet(sp_save), Instr::GlobalSet(sp)]);
    Ok(AslrLocals { sp_save })
}

//! Runtime random source injected into protected modules.
//!
//! The module gains a host `env.time` import, a `$__prng_state` global and
//! two functions: `$__seed (param i32)` and `$__rand (result i32)`, a
//! xorshift32 generator written in the i32 subset.

use thiserror::Error;

use crate::ir::*;

pub const TIME_IMPORT_MODULE: &str = "env";
pub const TIME_IMPORT_FIELD: &str = "time";
pub const TIME_SYMBOL: &str = "__time";
pub const STATE_SYMBOL: &str = "__prng_state";
pub const SEED_SYMBOL: &str = "__seed";
pub const RAND_SYMBOL: &str = "__rand";

/// Mixed into the seed so that a zero time does not yield the zero state.
pub const SEED_MIX: u32 = 0x9E37_79B9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("cannot embed random source: symbol `${0}` already defined")]
    SymbolCollision(String),
    #[error("cannot embed random source: module already imports \"env\" \"time\"")]
    TimeImportPresent,
    #[error("module does not import \"env\" \"time\"")]
    MissingTimeImport,
    #[error("no host implementation for import \"{0}\" \"{1}\"")]
    UnsupportedImport(String, String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("xorshift32 state must be nonzero")]
pub struct ZeroState;

/// Function and global indices of an embedded random source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrngHandles {
    pub time_func: u32,
    pub seed_func: u32,
    pub rand_func: u32,
    pub state_global: u32,
}

/// One xorshift32 step (shifts 13, 17, 5).
pub fn xorshift32_step(state: u32) -> Result<u32, ZeroState> {
    if state == 0 {
        return Err(ZeroState);
    }
    let mut s = state;
    s ^= s << 13;
    s ^= s >> 17;
    s ^= s << 5;
    Ok(s)
}

/// State after seeding with `seed`.
pub fn seeded_state(seed: u32) -> u32 {
    match seed ^ SEED_MIX {
        0 => SEED_MIX,
        s => s,
    }
}

/// First draw after seeding with `seed`; what every protected function sees
/// for a given host time.
pub fn first_draw(seed: u32) -> u32 {
    xorshift32_step(seeded_state(seed)).expect("seeded state is nonzero")
}

/// Draws `n` values after seeding with `seed`, in the order a protected
/// function consumes them.
pub fn draw_sequence(seed: u32, n: usize) -> Vec<u32> {
    let mut s = seeded_state(seed);
    (0..n)
        .map(|_| {
            s = xorshift32_step(s).expect("xorshift keeps state nonzero");
            s
        })
        .collect()
}

fn seed_body(state: u32) -> Vec<Instr> {
    let mix = SEED_MIX as i32;
    // state = (p ^ MIX) | ((p ^ MIX) == 0) * MIX, without branches
    vec![
        Instr::LocalGet(0),
        Instr::I32Const(mix),
        Instr::I32Xor,
        Instr::LocalSet(0),
        Instr::LocalGet(0),
        Instr::LocalGet(0),
        Instr::I32Eqz,
        Instr::I32Const(mix),
        Instr::I32Mul,
        Instr::I32Or,
        Instr::GlobalSet(state),
    ]
}

fn rand_body(state: u32) -> Vec<Instr> {
    let mut body = Vec::new();
    for (shift, right) in [(13, false), (17, true), (5, false)] {
        body.extend([
            Instr::GlobalGet(state),
            Instr::GlobalGet(state),
            Instr::I32Const(shift),
            if right { Instr::I32ShrU } else { Instr::I32Shl },
            Instr::I32Xor,
            Instr::GlobalSet(state),
        ]);
    }
    body.push(Instr::GlobalGet(state));
    body
}

/// Adds the time import, the state global and the seed/draw functions.
pub fn embed_prng(module: &mut Module) -> Result<PrngHandles, EmbedError> {
    let symbols = module.symbols();
    for sym in [TIME_SYMBOL, STATE_SYMBOL, SEED_SYMBOL, RAND_SYMBOL] {
        if symbols.contains(sym) {
            return Err(EmbedError::SymbolCollision(sym.to_string()));
        }
    }
    if module
        .imports
        .iter()
        .any(|i| i.module == TIME_IMPORT_MODULE && i.field == TIME_IMPORT_FIELD)
    {
        return Err(EmbedError::TimeImportPresent);
    }

    let time_ty = module.intern_type(vec![], Some(ValType::I32));
    let seed_ty = module.intern_type(vec![ValType::I32], None);
    let time_func = module.add_func_import(Import {
        module: TIME_IMPORT_MODULE.into(),
        field: TIME_IMPORT_FIELD.into(),
        name: Some(TIME_SYMBOL.into()),
        type_idx: time_ty,
    });
    let state_global = module.add_global(Global {
        name: Some(STATE_SYMBOL.into()),
        ty: ValType::I32,
        mutable: true,
        init: 0,
    });
    let seed_func = module.add_function(Function {
        name: Some(SEED_SYMBOL.into()),
        type_idx: seed_ty,
        param_names: vec![None],
        locals: vec![],
        body: seed_body(state_global),
    });
    let rand_func = module.add_function(Function {
        name: Some(RAND_SYMBOL.into()),
        type_idx: time_ty,
        param_names: vec![],
        locals: vec![],
        body: rand_body(state_global),
    });
    Ok(PrngHandles {
        time_func,
        seed_func,
        rand_func,
        state_global,
    })
}

/// Names of the functions added by [`embed_prng`]; passes never instrument them.
pub fn is_runtime_function(name: Option<&str>) -> bool {
    matches!(
        name,
        Some(SEED_SYMBOL) | Some(RAND_SYMBOL) | Some(TIME_SYMBOL)
    )
}

/// Emits a CommonJS script exporting `createImports()`, which returns the
/// import object for the module. `env.time` returns epoch seconds as a signed
/// 32-bit integer, or `fixed_time` when given.
pub fn emit_host_glue(module: &Module, fixed_time: Option<i32>) -> Result<String, EmbedError> {
    if !module
        .imports
        .iter()
        .any(|i| i.module == TIME_IMPORT_MODULE && i.field == TIME_IMPORT_FIELD)
    {
        return Err(EmbedError::MissingTimeImport);
    }
    let mut by_module: Vec<(&str, Vec<&str>)> = Vec::new();
    for imp in &module.imports {
        if (imp.module.as_str(), imp.field.as_str()) != (TIME_IMPORT_MODULE, TIME_IMPORT_FIELD) {
            return Err(EmbedError::UnsupportedImport(
                imp.module.clone(),
                imp.field.clone(),
            ));
        }
        match by_module.iter_mut().find(|(m, _)| *m == imp.module) {
            Some((_, fields)) => fields.push(&imp.field),
            None => by_module.push((&imp.module, vec![&imp.field])),
        }
    }
    let fixed = match fixed_time {
        Some(t) => t.to_string(),
        None => "null".to_string(),
    };
    let mut out = String::new();
    out.push_str("// Host imports for a protected module.\n");
    out.push_str("'use strict';\n\n");
    out.push_str(&format!("const FIXED_TIME = {fixed};\n\n"));
    out.push_str("function time() {\n");
    out.push_str("  if (FIXED_TIME !== null) return FIXED_TIME;\n");
    out.push_str("  return Math.floor(Date.now() / 1000) | 0;\n");
    out.push_str("}\n\n");
    out.push_str("function createImports() {\n  return {\n");
    for (m, fields) in &by_module {
        out.push_str(&format!("    {}: {{\n", serde_json::to_string(m).unwrap()));
        for f in fields {
            out.push_str(&format!(
                "      {}: time,\n",
                serde_json::to_string(f).unwrap()
            ));
        }
        out.push_str("    },\n");
    }
    out.push_str("  };\n}\n\n");
    out.push_str("module.exports = { createImports };\n");
    Ok(out)
}

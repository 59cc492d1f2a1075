//! In-memory model of a text-format module.
//!
//! Indices follow the usual WebAssembly index spaces: imported functions come
//! first in the function index space, followed by defined functions. Symbolic
//! names are kept alongside so the printer can reproduce them.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: usize = 65_536;

/// Conventional symbol of the unmanaged stack pointer global.
pub const STACK_POINTER_SYMBOL: &str = "__stack_pointer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValType {
    I32,
}

impl fmt::Display for ValType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValType::I32 => f.write_str("i32"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuncType {
    pub name: Option<String>,
    pub params: Vec<ValType>,
    pub result: Option<ValType>,
}

impl FuncType {
    pub fn new(params: Vec<ValType>, result: Option<ValType>) -> Self {
        FuncType {
            name: None,
            params,
            result,
        }
    }

    /// Signature equality, ignoring the symbolic name.
    pub fn same_signature(&self, other: &FuncType) -> bool {
        self.params == other.params && self.result == other.result
    }
}

/// A function import. Only function imports are part of the subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Import {
    pub module: String,
    pub field: String,
    pub name: Option<String>,
    pub type_idx: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Local {
    pub name: Option<String>,
    pub ty: ValType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: Option<String>,
    pub type_idx: u32,
    /// One entry per parameter of the signature; the types live in the type.
    pub param_names: Vec<Option<String>>,
    pub locals: Vec<Local>,
    pub body: Vec<Instr>,
}

impl Function {
    pub fn num_params(&self) -> u32 {
        self.param_names.len() as u32
    }

    /// Number of addressable locals, parameters included.
    pub fn num_locals_total(&self) -> u32 {
        self.num_params() + self.locals.len() as u32
    }

    /// Appends a fresh local and returns its index.
    pub fn fresh_local(&mut self, ty: ValType) -> u32 {
        let idx = self.num_locals_total();
        self.locals.push(Local { name: None, ty });
        idx
    }

    pub fn local_name(&self, idx: u32) -> Option<&str> {
        let np = self.num_params();
        if idx < np {
            self.param_names[idx as usize].as_deref()
        } else {
            self.locals
                .get((idx - np) as usize)
                .and_then(|l| l.name.as_deref())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: Option<String>,
    pub ty: ValType,
    pub mutable: bool,
    pub init: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    pub name: Option<String>,
    pub min: u32,
    pub max: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: Option<String>,
    pub min: u32,
    pub max: Option<u32>,
}

/// Offset expression of a data or element segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstExpr {
    I32(i32),
    GlobalGet(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSegment {
    pub offset: ConstExpr,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElemSegment {
    pub offset: ConstExpr,
    pub funcs: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Func,
    Global,
    Memory,
    Table,
}

impl ExportKind {
    pub fn keyword(self) -> &'static str {
        match self {
            ExportKind::Func => "func",
            ExportKind::Global => "global",
            ExportKind::Memory => "memory",
            ExportKind::Table => "table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Export {
    pub name: String,
    pub kind: ExportKind,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemArg {
    pub offset: u32,
    /// Alignment in bytes.
    pub align: u32,
}

impl MemArg {
    pub fn natural(width: u32) -> Self {
        MemArg {
            offset: 0,
            align: width,
        }
    }
}

/// Result type of a `block` or `loop`.
pub type BlockType = Option<ValType>;

/// One instruction of the supported subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    I32Const(i32),
    I32Add,
    I32Sub,
    I32Mul,
    I32And,
    I32Or,
    I32Xor,
    I32Shl,
    I32ShrS,
    I32ShrU,
    I32Eq,
    I32Ne,
    I32LtU,
    I32GtU,
    I32Eqz,
    I32Load(MemArg),
    I32Store(MemArg),
    I32Load8U(MemArg),
    I32Store8(MemArg),
    MemorySize,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    Block(BlockType),
    Loop(BlockType),
    End,
    Br(u32),
    BrIf(u32),
    Return,
    Unreachable,
    /// An `unreachable` emitted by the canary epilogue. Printed as plain
    /// `unreachable`; the interpreter reports it as a canary mismatch.
    CanaryTrap,
    Nop,
    Drop,
    Call(u32),
    CallIndirect(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Arithmetic,
    Variable,
    Memory,
    Control,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Arithmetic,
        Category::Variable,
        Category::Memory,
        Category::Control,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Arithmetic => "arithmetic",
            Category::Variable => "variable",
            Category::Memory => "memory",
            Category::Control => "control",
            Category::Other => "other",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown instruction mnemonic `{0}`")]
pub struct UnknownMnemonic(pub String);

/// Every mnemonic of the supported subset, with its category.
pub const MNEMONICS: &[(&str, Category)] = &[
    ("i32.const", Category::Arithmetic),
    ("i32.add", Category::Arithmetic),
    ("i32.sub", Category::Arithmetic),
    ("i32.mul", Category::Arithmetic),
    ("i32.and", Category::Arithmetic),
    ("i32.or", Category::Arithmetic),
    ("i32.xor", Category::Arithmetic),
    ("i32.shl", Category::Arithmetic),
    ("i32.shr_s", Category::Arithmetic),
    ("i32.shr_u", Category::Arithmetic),
    ("i32.eq", Category::Arithmetic),
    ("i32.ne", Category::Arithmetic),
    ("i32.lt_u", Category::Arithmetic),
    ("i32.gt_u", Category::Arithmetic),
    ("i32.eqz", Category::Arithmetic),
    ("i32.load", Category::Memory),
    ("i32.store", Category::Memory),
    ("i32.load8_u", Category::Memory),
    ("i32.store8", Category::Memory),
    ("memory.size", Category::Memory),
    ("local.get", Category::Variable),
    ("local.set", Category::Variable),
    ("local.tee", Category::Variable),
    ("global.get", Category::Variable),
    ("global.set", Category::Variable),
    ("block", Category::Control),
    ("loop", Category::Control),
    ("end", Category::Control),
    ("br", Category::Control),
    ("br_if", Category::Control),
    ("return", Category::Control),
    ("unreachable", Category::Control),
    ("nop", Category::Control),
    ("drop", Category::Control),
    ("call", Category::Control),
    ("call_indirect", Category::Control),
];

pub fn classify_instruction(mnemonic: &str) -> Result<Category, UnknownMnemonic> {
    MNEMONICS
        .iter()
        .find(|(m, _)| *m == mnemonic)
        .map(|(_, c)| *c)
        .ok_or_else(|| UnknownMnemonic(mnemonic.to_string()))
}

impl Instr {
    pub fn mnemonic(&self) -> &'static str {
        use Instr::*;
        match self {
            I32Const(_) => "i32.const",
            I32Add => "i32.add",
            I32Sub => "i32.sub",
            I32Mul => "i32.mul",
            I32And => "i32.and",
            I32Or => "i32.or",
            I32Xor => "i32.xor",
            I32Shl => "i32.shl",
            I32ShrS => "i32.shr_s",
            I32ShrU => "i32.shr_u",
            I32Eq => "i32.eq",
            I32Ne => "i32.ne",
            I32LtU => "i32.lt_u",
            I32GtU => "i32.gt_u",
            I32Eqz => "i32.eqz",
            I32Load(_) => "i32.load",
            I32Store(_) => "i32.store",
            I32Load8U(_) => "i32.load8_u",
            I32Store8(_) => "i32.store8",
            MemorySize => "memory.size",
            LocalGet(_) => "local.get",
            LocalSet(_) => "local.set",
            LocalTee(_) => "local.tee",
            GlobalGet(_) => "global.get",
            GlobalSet(_) => "global.set",
            Block(_) => "block",
            Loop(_) => "loop",
            End => "end",
            Br(_) => "br",
            BrIf(_) => "br_if",
            Return => "return",
            Unreachable | CanaryTrap => "unreachable",
            Nop => "nop",
            Drop => "drop",
            Call(_) => "call",
            CallIndirect(_) => "call_indirect",
        }
    }

    pub fn category(&self) -> Category {
        // every mnemonic produced above is in the table
        classify_instruction(self.mnemonic()).expect("mnemonic table is complete")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackPointerRef {
    pub global_idx: u32,
    pub name: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("no stack pointer found: no mutable i32 global in module")]
    NoStackPointer,
    #[error(
        "ambiguous stack pointer: {0} mutable i32 globals and none named ${STACK_POINTER_SYMBOL}; \
         pass the stack pointer symbol explicitly (--sp NAME)"
    )]
    AmbiguousStackPointer(usize),
    #[error("stack pointer override `${0}` does not name a global")]
    UnknownOverride(String),
    #[error("stack pointer `${0}` is not a mutable i32 global")]
    NotMutableI32(String),
    #[error("{what} index {index} out of range in {context}")]
    IndexOutOfRange {
        what: &'static str,
        index: u32,
        context: String,
    },
    #[error("unbalanced body in {0}")]
    Unbalanced(String),
    #[error("more than one {0}")]
    Duplicate(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Module {
    pub name: Option<String>,
    pub types: Vec<FuncType>,
    pub imports: Vec<Import>,
    pub functions: Vec<Function>,
    pub globals: Vec<Global>,
    pub memory: Option<Memory>,
    pub data: Vec<DataSegment>,
    pub table: Option<Table>,
    pub elems: Vec<ElemSegment>,
    pub exports: Vec<Export>,
    pub start: Option<u32>,
}

fn strip_sigil(name: &str) -> &str {
    name.strip_prefix('$').unwrap_or(name)
}

impl Module {
    pub fn num_imported_funcs(&self) -> u32 {
        self.imports.len() as u32
    }

    pub fn num_funcs(&self) -> u32 {
        self.num_imported_funcs() + self.functions.len() as u32
    }

    /// Type index of a function in the function index space.
    pub fn func_type_idx(&self, func_idx: u32) -> Option<u32> {
        let ni = self.num_imported_funcs();
        if func_idx < ni {
            Some(self.imports[func_idx as usize].type_idx)
        } else {
            self.functions
                .get((func_idx - ni) as usize)
                .map(|f| f.type_idx)
        }
    }

    pub fn func_type(&self, func_idx: u32) -> Option<&FuncType> {
        self.func_type_idx(func_idx)
            .and_then(|t| self.types.get(t as usize))
    }

    pub fn func_name(&self, func_idx: u32) -> Option<&str> {
        let ni = self.num_imported_funcs();
        if func_idx < ni {
            self.imports[func_idx as usize].name.as_deref()
        } else {
            self.functions
                .get((func_idx - ni) as usize)
                .and_then(|f| f.name.as_deref())
        }
    }

    /// Function index of the function (imported or defined) carrying `name`.
    pub fn func_by_name(&self, name: &str) -> Option<u32> {
        let name = strip_sigil(name);
        (0..self.num_funcs()).find(|&i| self.func_name(i) == Some(name))
    }

    pub fn global_by_name(&self, name: &str) -> Option<u32> {
        let name = strip_sigil(name);
        self.globals
            .iter()
            .position(|g| g.name.as_deref() == Some(name))
            .map(|i| i as u32)
    }

    /// Stable display key of a defined function: `$name`, or `#<defined index>`
    /// when unnamed. Keys survive the function-index shift caused by new imports.
    pub fn function_key(&self, defined_idx: usize) -> String {
        match &self.functions[defined_idx].name {
            Some(n) => format!("${n}"),
            None => format!("#{defined_idx}"),
        }
    }

    pub fn export_func(&self, name: &str) -> Option<u32> {
        self.exports
            .iter()
            .find(|e| e.kind == ExportKind::Func && e.name == name)
            .map(|e| e.index)
    }

    /// Returns the index of a type with the given signature, appending it if absent.
    pub fn intern_type(&mut self, params: Vec<ValType>, result: Option<ValType>) -> u32 {
        let ty = FuncType::new(params, result);
        if let Some(i) = self.types.iter().position(|t| t.same_signature(&ty)) {
            return i as u32;
        }
        self.types.push(ty);
        (self.types.len() - 1) as u32
    }

    /// Appends a function import. Defined functions move up by one index, so
    /// every function reference in the module is renumbered.
    pub fn add_func_import(&mut self, import: Import) -> u32 {
        let new_idx = self.num_imported_funcs();
        let shift = |idx: &mut u32| {
            if *idx >= new_idx {
                *idx += 1;
            }
        };
        for f in &mut self.functions {
            for ins in &mut f.body {
                if let Instr::Call(idx) = ins {
                    shift(idx);
                }
            }
        }
        for seg in &mut self.elems {
            seg.funcs.iter_mut().for_each(shift);
        }
        for e in &mut self.exports {
            if e.kind == ExportKind::Func {
                shift(&mut e.index);
            }
        }
        if let Some(s) = &mut self.start {
            shift(s);
        }
        self.imports.push(import);
        new_idx
    }

    /// Appends a defined function and returns its function index.
    pub fn add_function(&mut self, f: Function) -> u32 {
        self.functions.push(f);
        self.num_funcs() - 1
    }

    pub fn add_global(&mut self, g: Global) -> u32 {
        self.globals.push(g);
        (self.globals.len() - 1) as u32
    }

    /// Checks index ranges and block balance.
    pub fn validate(&self) -> Result<(), IrError> {
        let range = |what, index: u32, limit: u32, context: &dyn Fn() -> String| {
            if index < limit {
                Ok(())
            } else {
                Err(IrError::IndexOutOfRange {
                    what,
                    index,
                    context: context(),
                })
            }
        };
        let ntypes = self.types.len() as u32;
        let nfuncs = self.num_funcs();
        let nglobals = self.globals.len() as u32;
        for (i, imp) in self.imports.iter().enumerate() {
            range("type", imp.type_idx, ntypes, &|| format!("import {i}"))?;
        }
        for (i, f) in self.functions.iter().enumerate() {
            let ctx = || format!("function {}", self.function_key(i));
            range("type", f.type_idx, ntypes, &ctx)?;
            let nlocals = f.num_locals_total();
            let mut depth: i64 = 0;
            for ins in &f.body {
                match ins {
                    Instr::LocalGet(x) | Instr::LocalSet(x) | Instr::LocalTee(x) => {
                        range("local", *x, nlocals, &ctx)?
                    }
                    Instr::GlobalGet(x) | Instr::GlobalSet(x) => {
                        range("global", *x, nglobals, &ctx)?
                    }
                    Instr::Call(x) => range("function", *x, nfuncs, &ctx)?,
                    Instr::CallIndirect(t) => range("type", *t, ntypes, &ctx)?,
                    Instr::Block(_) | Instr::Loop(_) => depth += 1,
                    Instr::End => {
                        depth -= 1;
                        if depth < 0 {
                            return Err(IrError::Unbalanced(ctx()));
                        }
                    }
                    _ => {}
                }
            }
            if depth != 0 {
                return Err(IrError::Unbalanced(ctx()));
            }
        }
        for seg in &self.elems {
            for &fi in &seg.funcs {
                range("function", fi, nfuncs, &|| "element segment".to_string())?;
            }
            if let ConstExpr::GlobalGet(g) = seg.offset {
                range("global", g, nglobals, &|| "element segment offset".into())?;
            }
        }
        for seg in &self.data {
            if let ConstExpr::GlobalGet(g) = seg.offset {
                range("global", g, nglobals, &|| "data segment offset".into())?;
            }
        }
        for e in &self.exports {
            let limit = match e.kind {
                ExportKind::Func => nfuncs,
                ExportKind::Global => nglobals,
                ExportKind::Memory => self.memory.is_some() as u32,
                ExportKind::Table => self.table.is_some() as u32,
            };
            range(e.kind.keyword(), e.index, limit, &|| {
                format!("export \"{}\"", e.name)
            })?;
        }
        if let Some(s) = self.start {
            range("function", s, nfuncs, &|| "start".into())?;
        }
        Ok(())
    }

    /// Names used at module scope (functions, imports, globals, types).
    pub fn symbols(&self) -> HashSet<&str> {
        let mut out = HashSet::new();
        out.extend(self.imports.iter().filter_map(|i| i.name.as_deref()));
        out.extend(self.functions.iter().filter_map(|f| f.name.as_deref()));
        out.extend(self.globals.iter().filter_map(|g| g.name.as_deref()));
        out.extend(self.types.iter().filter_map(|t| t.name.as_deref()));
        out
    }
}

/// Picks the stack pointer global: the override if given, else the mutable
/// i32 global named `$__stack_pointer`, else the only mutable i32 global.
pub fn find_stack_pointer(
    module: &Module,
    sp_override: Option<&str>,
) -> Result<StackPointerRef, IrError> {
    let is_mut_i32 = |g: &Global| g.mutable && g.ty == ValType::I32;
    if let Some(sym) = sp_override {
        let sym = strip_sigil(sym);
        let idx = module
            .global_by_name(sym)
            .ok_or_else(|| IrError::UnknownOverride(sym.to_string()))?;
        if !is_mut_i32(&module.globals[idx as usize]) {
            return Err(IrError::NotMutableI32(sym.to_string()));
        }
        return Ok(StackPointerRef {
            global_idx: idx,
            name: Some(sym.to_string()),
        });
    }
    if let Some(idx) = module.global_by_name(STACK_POINTER_SYMBOL) {
        if !is_mut_i32(&module.globals[idx as usize]) {
            return Err(IrError::NotMutableI32(STACK_POINTER_SYMBOL.to_string()));
        }
        return Ok(StackPointerRef {
            global_idx: idx,
            name: Some(STACK_POINTER_SYMBOL.to_string()),
        });
    }
    let candidates: Vec<usize> = module
        .globals
        .iter()
        .enumerate()
        .filter(|(_, g)| is_mut_i32(g))
        .map(|(i, _)| i)
        .collect();
    match candidates.as_slice() {
        [] => Err(IrError::NoStackPointer),
        [one] => Ok(StackPointerRef {
            global_idx: *one as u32,
            name: module.globals[*one].name.clone(),
        }),
        many => Err(IrError::AmbiguousStackPointer(many.len())),
    }
}

/// Retags canary-epilogue `unreachable`s in modules that lost the tag by
/// going through text. Matches the exact epilogue shape:
/// `block; local.get a; i32.load; local.get c; i32.eq; br_if 0; unreachable; end`.
/// Returns the number of traps tagged.
pub fn tag_canary_checks(module: &mut Module) -> usize {
    let mut tagged = 0;
    for f in &mut module.functions {
        let body = &mut f.body;
        if body.len() < 8 {
            continue;
        }
        for i in 0..=body.len() - 8 {
            let shape = matches!(
                &body[i..i + 8],
                [
                    Instr::Block(None),
                    Instr::LocalGet(_),
                    Instr::I32Load(_),
                    Instr::LocalGet(_),
                    Instr::I32Eq,
                    Instr::BrIf(0),
                    Instr::Unreachable,
                    Instr::End,
                ]
            );
            if shape {
                body[i + 6] = Instr::CanaryTrap;
                tagged += 1;
            }
        }
    }
    tagged
}

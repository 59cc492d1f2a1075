//! Reference interpreter for the supported subset.
//!
//! Locals, globals, the operand stack and the call stack live in Rust data
//! structures; only linear memory is byte-addressable. That mirrors the
//! managed/unmanaged split of a real engine: no store can reach a local.
//!
//! Every executed instruction is counted by category. A taken branch to a
//! block lands on that block's `end`, which is then executed and counted, so
//! each `block ... end` pair costs two instructions however it is left.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::*;
use crate::passes::CategoryCounts;
use crate::rng::{TIME_IMPORT_FIELD, TIME_IMPORT_MODULE};

pub const MAX_CALL_DEPTH: usize = 10_000;
/// Implementation limit on linear memory size (64 MiB).
pub const MAX_PAGES: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSource {
    System,
    Fixed(i32),
}

impl TimeSource {
    fn now(self) -> i32 {
        match self {
            TimeSource::Fixed(t) => t,
            TimeSource::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as i32)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrapReason {
    Unreachable,
    CanaryMismatch,
    OutOfBoundsMemory,
    UndefinedTableEntry,
    SignatureMismatch,
    StackExhausted,
}

impl fmt::Display for TrapReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Values(Vec<i32>),
    Trap(TrapReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub outcome: Outcome,
    pub counters: CategoryCounts,
    pub total: u64,
    /// Invocations per function, keyed like `Module::function_key`; imports
    /// appear under `$name` or `env.field`. Functions never called are absent.
    pub calls: BTreeMap<String, u64>,
}

impl RunResult {
    pub fn values(&self) -> Option<&[i32]> {
        match &self.outcome {
            Outcome::Values(v) => Some(v),
            Outcome::Trap(_) => None,
        }
    }

    pub fn trap(&self) -> Option<TrapReason> {
        match self.outcome {
            Outcome::Trap(r) => Some(r),
            Outcome::Values(_) => None,
        }
    }

    pub fn calls_to(&self, key: &str) -> u64 {
        self.calls.get(key).copied().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstantiateError {
    #[error("unknown import \"{0}\" \"{1}\"")]
    UnknownImport(String, String),
    #[error("import \"env\" \"time\" must have type () -> i32")]
    TimeImportType,
    #[error("data segment {0} out of bounds")]
    DataOutOfBounds(usize),
    #[error("element segment {0} out of bounds")]
    ElemOutOfBounds(usize),
    #[error("memory of {0} pages exceeds the {MAX_PAGES}-page limit")]
    MemoryTooLarge(u32),
    #[error("start function trapped: {0}")]
    StartTrapped(TrapReason),
    #[error("invalid module: {0}")]
    Invalid(#[from] IrError),
    #[error(transparent)]
    Invoke(Box<InvokeError>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvokeError {
    #[error("no exported function named \"{0}\"")]
    NoSuchExport(String),
    #[error("expected {expected} argument(s), got {got}")]
    ArgumentCount { expected: usize, got: usize },
    #[error("malformed code in {function} at instruction {pc}: {reason}")]
    Malformed {
        function: String,
        pc: usize,
        reason: &'static str,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("memory range {addr}..{end} outside linear memory of {size} bytes")]
pub struct MemoryAccessError {
    pub addr: u64,
    pub end: u64,
    pub size: usize,
}

/// An instantiated module.
#[derive(Debug, Clone)]
pub struct Instance {
    module: Module,
    memory: Vec<u8>,
    globals: Vec<i32>,
    table: Vec<Option<u32>>,
    time: TimeSource,
    /// Per defined function: `end` position for each `block`/`loop` position.
    block_ends: Vec<Vec<usize>>,
}

fn match_ends(body: &[Instr]) -> Vec<usize> {
    let mut ends = vec![usize::MAX; body.len()];
    let mut open = Vec::new();
    for (pc, ins) in body.iter().enumerate() {
        match ins {
            Instr::Block(_) | Instr::Loop(_) => open.push(pc),
            Instr::End => {
                if let Some(start) = open.pop() {
                    ends[start] = pc;
                }
            }
            _ => {}
        }
    }
    ends
}

fn eval_const(expr: &ConstExpr, globals: &[i32]) -> i32 {
    match *expr {
        ConstExpr::I32(v) => v,
        ConstExpr::GlobalGet(g) => globals[g as usize],
    }
}

impl Instance {
    pub fn instantiate(module: &Module, time: TimeSource) -> Result<Instance, InstantiateError> {
        module.validate()?;
        for imp in &module.imports {
            if (imp.module.as_str(), imp.field.as_str()) != (TIME_IMPORT_MODULE, TIME_IMPORT_FIELD)
            {
                return Err(InstantiateError::UnknownImport(
                    imp.module.clone(),
                    imp.field.clone(),
                ));
            }
            let ty = &module.types[imp.type_idx as usize];
            if !ty.params.is_empty() || ty.result != Some(ValType::I32) {
                return Err(InstantiateError::TimeImportType);
            }
        }
        let pages = module.memory.as_ref().map(|m| m.min).unwrap_or(0);
        if pages > MAX_PAGES {
            return Err(InstantiateError::MemoryTooLarge(pages));
        }
        let mut memory = vec![0u8; pages as usize * PAGE_SIZE];
        let globals: Vec<i32> = module.globals.iter().map(|g| g.init).collect();
        for (i, seg) in module.data.iter().enumerate() {
            let start = eval_const(&seg.offset, &globals) as u32 as usize;
            let end = start + seg.bytes.len();
            if end > memory.len() {
                return Err(InstantiateError::DataOutOfBounds(i));
            }
            memory[start..end].copy_from_slice(&seg.bytes);
        }
        let table_size = module.table.as_ref().map(|t| t.min).unwrap_or(0) as usize;
        let mut table = vec![None; table_size];
        for (i, seg) in module.elems.iter().enumerate() {
            let start = eval_const(&seg.offset, &globals) as u32 as usize;
            let end = start + seg.funcs.len();
            if end > table.len() {
                return Err(InstantiateError::ElemOutOfBounds(i));
            }
            for (slot, &f) in table[start..end].iter_mut().zip(&seg.funcs) {
                *slot = Some(f);
            }
        }
        let block_ends = module
            .functions
            .iter()
            .map(|f| match_ends(&f.body))
            .collect();
        let mut inst = Instance {
            module: module.clone(),
            memory,
            globals,
            table,
            time,
            block_ends,
        };
        if let Some(start) = module.start {
            let res = inst
                .invoke_func(start, &[])
                .map_err(|e| InstantiateError::Invoke(Box::new(e)))?;
            if let Some(reason) = res.trap() {
                return Err(InstantiateError::StartTrapped(reason));
            }
        }
        Ok(inst)
    }

    pub fn module(&self) -> &Module {
        &self.module
    }

    pub fn memory(&self) -> &[u8] {
        &self.memory
    }

    pub fn table(&self) -> &[Option<u32>] {
        &self.table
    }

    pub fn globals(&self) -> &[i32] {
        &self.globals
    }

    pub fn global(&self, name: &str) -> Option<i32> {
        self.module
            .global_by_name(name)
            .map(|i| self.globals[i as usize])
    }

    /// Overwrites a global; `false` if the index is out of range.
    pub fn set_global(&mut self, idx: u32, value: i32) -> bool {
        match self.globals.get_mut(idx as usize) {
            Some(g) => {
                *g = value;
                true
            }
            None => false,
        }
    }

    pub fn set_time(&mut self, time: TimeSource) {
        self.time = time;
    }

    fn check_range(
        &self,
        addr: u32,
        len: usize,
    ) -> Result<std::ops::Range<usize>, MemoryAccessError> {
        let end = addr as u64 + len as u64;
        if end > self.memory.len() as u64 {
            return Err(MemoryAccessError {
                addr: addr as u64,
                end,
                size: self.memory.len(),
            });
        }
        Ok(addr as usize..end as usize)
    }

    /// Writes attacker- or test-supplied bytes straight into linear memory.
    pub fn poke_input(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MemoryAccessError> {
        let range = self.check_range(addr, bytes.len())?;
        self.memory[range].copy_from_slice(bytes);
        Ok(())
    }

    pub fn read_memory(&self, addr: u32, len: usize) -> Result<&[u8], MemoryAccessError> {
        let range = self.check_range(addr, len)?;
        Ok(&self.memory[range])
    }

    pub fn invoke(&mut self, export: &str, args: &[i32]) -> Result<RunResult, InvokeError> {
        let idx = self
            .module
            .export_func(export)
            .ok_or_else(|| InvokeError::NoSuchExport(export.to_string()))?;
        self.invoke_func(idx, args)
    }

    pub fn invoke_func(&mut self, func_idx: u32, args: &[i32]) -> Result<RunResult, InvokeError> {
        let ty = self
            .module
            .func_type(func_idx)
            .ok_or_else(|| InvokeError::NoSuchExport(format!("func[{func_idx}]")))?;
        if ty.params.len() != args.len() {
            return Err(InvokeError::ArgumentCount {
                expected: ty.params.len(),
                got: args.len(),
            });
        }
        let mut m = Machine {
            module: &self.module,
            block_ends: &self.block_ends,
            memory: &mut self.memory,
            globals: &mut self.globals,
            table: &self.table,
            time: self.time,
            stack: args.to_vec(),
            frames: Vec::new(),
            counters: CategoryCounts::default(),
            calls: vec![0; self.module.num_funcs() as usize],
        };
        let outcome = match m.run(func_idx)? {
            Ok(values) => Outcome::Values(values),
            Err(reason) => Outcome::Trap(reason),
        };
        let mut calls = BTreeMap::new();
        let ni = self.module.num_imported_funcs() as usize;
        for (i, &n) in m.calls.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let key = if i < ni {
                let imp = &self.module.imports[i];
                match &imp.name {
                    Some(name) => format!("${name}"),
                    None => format!("{}.{}", imp.module, imp.field),
                }
            } else {
                self.module.function_key(i - ni)
            };
            calls.insert(key, n);
        }
        Ok(RunResult {
            outcome,
            total: m.counters.total(),
            counters: m.counters,
            calls,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Label {
    is_loop: bool,
    start: usize,
    end: usize,
    height: usize,
    arity: usize,
}

#[derive(Debug)]
struct Frame {
    func: usize,
    locals: Vec<i32>,
    pc: usize,
    labels: Vec<Label>,
    stack_base: usize,
    arity: usize,
}

struct Machine<'a> {
    module: &'a Module,
    block_ends: &'a [Vec<usize>],
    memory: &'a mut Vec<u8>,
    globals: &'a mut Vec<i32>,
    table: &'a [Option<u32>],
    time: TimeSource,
    stack: Vec<i32>,
    frames: Vec<Frame>,
    counters: CategoryCounts,
    calls: Vec<u64>,
}

/// Inner result: `Err` carries a trap, the outer `Result` a malformed module.
type Exec<T> = Result<Result<T, TrapReason>, InvokeError>;

macro_rules! trap {
    ($r:expr) => {
        return Ok(Err($r))
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e? {
            Ok(v) => v,
            Err(r) => return Ok(Err(r)),
        }
    };
}

enum Flow {
    Continue,
    Return,
}

impl Machine<'_> {
    fn malformed(&self, reason: &'static str) -> InvokeError {
        let (function, pc) = match self.frames.last() {
            Some(f) => (self.module.function_key(f.func), f.pc),
            None => ("<entry>".to_string(), 0),
        };
        InvokeError::Malformed {
            function,
            pc,
            reason,
        }
    }

    fn pop(&mut self) -> Result<i32, InvokeError> {
        let base = self.frames.last().map(|f| f.stack_base).unwrap_or(0);
        if self.stack.len() <= base {
            return Err(self.malformed("operand stack underflow"));
        }
        Ok(self.stack.pop().unwrap())
    }

    fn binop(&mut self, op: impl Fn(i32, i32) -> i32) -> Result<(), InvokeError> {
        let b = self.pop()?;
        let a = self.pop()?;
        self.stack.push(op(a, b));
        Ok(())
    }

    fn effective(&self, base: i32, arg: &MemArg, width: usize) -> Result<usize, TrapReason> {
        let addr = base as u32 as u64 + arg.offset as u64;
        if addr + width as u64 > self.memory.len() as u64 {
            return Err(TrapReason::OutOfBoundsMemory);
        }
        Ok(addr as usize)
    }

    /// Enters `func_idx` with its arguments on top of the operand stack.
    fn call(&mut self, func_idx: u32) -> Exec<()> {
        let ty = self
            .module
            .func_type(func_idx)
            .ok_or_else(|| self.malformed("call to unknown function"))?;
        self.calls[func_idx as usize] += 1;
        let ni = self.module.num_imported_funcs();
        if func_idx < ni {
            // only env.time links
            self.stack.push(self.time.now());
            return Ok(Ok(()));
        }
        if self.frames.len() >= MAX_CALL_DEPTH {
            trap!(TrapReason::StackExhausted);
        }
        let defined = (func_idx - ni) as usize;
        let f = &self.module.functions[defined];
        let nparams = ty.params.len();
        let base = self.frames.last().map(|f| f.stack_base).unwrap_or(0);
        if self.stack.len() < base + nparams {
            return Err(self.malformed("missing call arguments"));
        }
        let mut locals = self.stack.split_off(self.stack.len() - nparams);
        locals.resize(nparams + f.locals.len(), 0);
        self.frames.push(Frame {
            func: defined,
            locals,
            pc: 0,
            labels: Vec::new(),
            stack_base: self.stack.len(),
            arity: ty.result.is_some() as usize,
        });
        Ok(Ok(()))
    }

    fn do_return(&mut self) -> Result<(), InvokeError> {
        let frame = self.frames.last().expect("active frame");
        if self.stack.len() < frame.stack_base + frame.arity {
            return Err(self.malformed("missing return value"));
        }
        let frame = self.frames.pop().unwrap();
        let results = self.stack.split_off(self.stack.len() - frame.arity);
        self.stack.truncate(frame.stack_base);
        self.stack.extend(results);
        Ok(())
    }

    fn branch(&mut self, depth: u32) -> Result<Flow, InvokeError> {
        let frame = self.frames.last_mut().expect("active frame");
        let n = frame.labels.len();
        let depth = depth as usize;
        if depth == n {
            return Ok(Flow::Return);
        }
        if depth > n {
            return Err(self.malformed("branch depth exceeds nesting"));
        }
        let idx = n - 1 - depth;
        let label = frame.labels[idx];
        if label.is_loop {
            frame.labels.truncate(idx + 1);
            frame.pc = label.start + 1;
            self.stack.truncate(label.height);
        } else {
            if self.stack.len() < label.height + label.arity {
                return Err(self.malformed("missing branch value"));
            }
            let vals = self.stack.split_off(self.stack.len() - label.arity);
            self.stack.truncate(label.height);
            self.stack.extend(vals);
            frame.labels.truncate(idx + 1);
            frame.pc = label.end;
        }
        Ok(Flow::Continue)
    }

    fn run(&mut self, entry: u32) -> Exec<Vec<i32>> {
        let entry_depth = self.frames.len();
        let ty = self
            .module
            .func_type(entry)
            .ok_or_else(|| self.malformed("unknown entry function"))?;
        let arity = ty.result.is_some() as usize;
        tri!(self.call(entry));
        if self.frames.len() == entry_depth {
            // host import invoked directly
            return Ok(Ok(self.stack.split_off(self.stack.len() - arity)));
        }
        while self.frames.len() > entry_depth {
            let frame = self.frames.last().unwrap();
            let body = &self.module.functions[frame.func].body;
            if frame.pc >= body.len() {
                self.do_return()?;
                continue;
            }
            let ins = &body[frame.pc];
            self.counters.add(ins.category(), 1);
            let flow = tri!(self.step(ins));
            if let Flow::Return = flow {
                self.do_return()?;
            }
        }
        Ok(Ok(self
            .stack
            .split_off(self.stack.len().saturating_sub(arity))))
    }

    fn step(&mut self, ins: &Instr) -> Exec<Flow> {
        let fidx = self.frames.len() - 1;
        let mut next_pc = self.frames[fidx].pc + 1;
        match ins {
            Instr::I32Const(v) => self.stack.push(*v),
            Instr::I32Add => self.binop(i32::wrapping_add)?,
            Instr::I32Sub => self.binop(i32::wrapping_sub)?,
            Instr::I32Mul => self.binop(i32::wrapping_mul)?,
            Instr::I32And => self.binop(|a, b| a & b)?,
            Instr::I32Or => self.binop(|a, b| a | b)?,
            Instr::I32Xor => self.binop(|a, b| a ^ b)?,
            Instr::I32Shl => self.binop(|a, b| a.wrapping_shl(b as u32))?,
            Instr::I32ShrS => self.binop(|a, b| a.wrapping_shr(b as u32))?,
            Instr::I32ShrU => self.binop(|a, b| (a as u32).wrapping_shr(b as u32) as i32)?,
            Instr::I32Eq => self.binop(|a, b| (a == b) as i32)?,
            Instr::I32Ne => self.binop(|a, b| (a != b) as i32)?,
            Instr::I32LtU => self.binop(|a, b| ((a as u32) < (b as u32)) as i32)?,
            Instr::I32GtU => self.binop(|a, b| ((a as u32) > (b as u32)) as i32)?,
            Instr::I32Eqz => {
                let a = self.pop()?;
                self.stack.push((a == 0) as i32);
            }
            Instr::I32Load(arg) => {
                let base = self.pop()?;
                let at = match self.effective(base, arg, 4) {
                    Ok(a) => a,
                    Err(r) => trap!(r),
                };
                let bytes: [u8; 4] = self.memory[at..at + 4].try_into().unwrap();
                self.stack.push(i32::from_le_bytes(bytes));
            }
            Instr::I32Load8U(arg) => {
                let base = self.pop()?;
                let at = match self.effective(base, arg, 1) {
                    Ok(a) => a,
                    Err(r) => trap!(r),
                };
                self.stack.push(self.memory[at] as i32);
            }
            Instr::I32Store(arg) => {
                let value = self.pop()?;
                let base = self.pop()?;
                let at = match self.effective(base, arg, 4) {
                    Ok(a) => a,
                    Err(r) => trap!(r),
                };
                self.memory[at..at + 4].copy_from_slice(&value.to_le_bytes());
            }
            Instr::I32Store8(arg) => {
                let value = self.pop()?;
                let base = self.pop()?;
                let at = match self.effective(base, arg, 1) {
                    Ok(a) => a,
                    Err(r) => trap!(r),
                };
                self.memory[at] = value as u8;
            }
            Instr::MemorySize => self.stack.push((self.memory.len() / PAGE_SIZE) as i32),
            Instr::LocalGet(i) => {
                let v = self.frames[fidx].locals[*i as usize];
                self.stack.push(v);
            }
            Instr::LocalSet(i) => {
                let v = self.pop()?;
                self.frames[fidx].locals[*i as usize] = v;
            }
            Instr::LocalTee(i) => {
                let v = self.pop()?;
                self.frames[fidx].locals[*i as usize] = v;
                self.stack.push(v);
            }
            Instr::GlobalGet(g) => self.stack.push(self.globals[*g as usize]),
            Instr::GlobalSet(g) => {
                let v = self.pop()?;
                self.globals[*g as usize] = v;
            }
            Instr::Block(bt) | Instr::Loop(bt) => {
                let frame = &mut self.frames[fidx];
                let end = self.block_ends[frame.func][frame.pc];
                let is_loop = matches!(ins, Instr::Loop(_));
                frame.labels.push(Label {
                    is_loop,
                    start: frame.pc,
                    end,
                    height: self.stack.len(),
                    arity: if is_loop { 0 } else { bt.is_some() as usize },
                });
            }
            Instr::End => {
                if self.frames[fidx].labels.pop().is_none() {
                    return Err(self.malformed("`end` without open block"));
                }
            }
            Instr::Br(d) => {
                let flow = self.branch(*d)?;
                if let Flow::Return = flow {
                    return Ok(Ok(Flow::Return));
                }
                return Ok(Ok(Flow::Continue));
            }
            Instr::BrIf(d) => {
                if self.pop()? != 0 {
                    let flow = self.branch(*d)?;
                    return Ok(Ok(flow));
                }
            }
            Instr::Return => return Ok(Ok(Flow::Return)),
            Instr::Unreachable => trap!(TrapReason::Unreachable),
            Instr::CanaryTrap => trap!(TrapReason::CanaryMismatch),
            Instr::Nop => {}
            Instr::Drop => {
                self.pop()?;
            }
            Instr::Call(f) => {
                self.frames[fidx].pc = next_pc;
                tri!(self.call(*f));
                return Ok(Ok(Flow::Continue));
            }
            Instr::CallIndirect(type_idx) => {
                let slot = self.pop()? as u32 as usize;
                let Some(Some(target)) = self.table.get(slot).copied() else {
                    trap!(TrapReason::UndefinedTableEntry);
                };
                let expected = &self.module.types[*type_idx as usize];
                let actual = self
                    .module
                    .func_type(target)
                    .ok_or_else(|| self.malformed("table entry names unknown function"))?;
                if !expected.same_signature(actual) {
                    trap!(TrapReason::SignatureMismatch);
                }
                self.frames[fidx].pc = next_pc;
                tri!(self.call(target));
                return Ok(Ok(Flow::Continue));
            }
        }
        if matches!(ins, Instr::End) {
            next_pc = self.frames[fidx].pc + 1;
        }
        self.frames[fidx].pc = next_pc;
        Ok(Ok(Flow::Continue))
    }
}

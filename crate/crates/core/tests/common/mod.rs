//! Seeded generator of small executable modules.
//!
//! Every generated function has type `(param i32 i32) (result i32)`, one
//! scratch local and a body that leaves exactly one i32. Calls only reach
//! lower-numbered functions, so there is no recursion. Stores stay inside
//! `[1024, 2048)` and loops run a bounded number of times.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wat_protector::ir::*;

pub const SCRATCH_LO: u32 = 1024;
pub const SCRATCH_HI: u32 = 2048;

#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub functions: usize,
    /// Attach `$names` to functions, params, locals and globals.
    pub names: bool,
    /// Import `env.time` ahead of the defined functions.
    pub time_import: bool,
    pub extras: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            functions: 4,
            names: true,
            time_import: false,
            extras: false,
        }
    }
}

struct Gen {
    rng: ChaCha8Rng,
    ni: u32,
    g: u32,
    budget: usize,
}

const BINOPS: [Instr; 14] = [
    Instr::I32Add,
    Instr::I32Sub,
    Instr::I32Mul,
    Instr::I32And,
    Instr::I32Or,
    Instr::I32Xor,
    Instr::I32Shl,
    Instr::I32ShrS,
    Instr::I32ShrU,
    Instr::I32Eq,
    Instr::I32Ne,
    Instr::I32LtU,
    Instr::I32GtU,
    Instr::I32Add,
];

impl Gen {
    fn constant(&mut self) -> i32 {
        if self.rng.gen_bool(0.7) {
            self.rng.gen_range(-8..64)
        } else {
            self.rng.gen()
        }
    }

    fn scratch_addr(&mut self, out: &mut Vec<Instr>, f: u32, depth: u32) {
        self.expr(out, f, depth);
        out.extend([Instr::I32Const(1020), Instr::I32And]);
    }

    /// Emits code pushing one i32. `depth` counts enclosing labels.
    fn expr(&mut self, out: &mut Vec<Instr>, f: u32, depth: u32) {
        let leaf = self.budget == 0 || depth > 5;
        self.budget = self.budget.saturating_sub(1);
        let choice = if leaf {
            self.rng.gen_range(0..2)
        } else {
            self.rng.gen_range(0..15)
        };
        match choice {
            0 => out.push(Instr::I32Const(self.constant())),
            1 => out.push(Instr::LocalGet(self.rng.gen_range(0..3))),
            2 | 3 => {
                self.expr(out, f, depth);
                self.expr(out, f, depth);
                out.push(BINOPS[self.rng.gen_range(0..BINOPS.len())].clone());
            }
            4 => {
                out.push(Instr::Block(Some(ValType::I32)));
                self.expr(out, f, depth + 1);
                out.push(Instr::End);
            }
            5 => {
                // value-carrying conditional branch out of a block
                out.push(Instr::Block(Some(ValType::I32)));
                self.expr(out, f, depth + 1);
                self.expr(out, f, depth + 1);
                out.push(Instr::BrIf(0));
                out.push(Instr::Drop);
                self.expr(out, f, depth + 1);
                out.push(Instr::End);
            }
            6 => {
                // early return from inside one or more nested blocks
                let extra = self.rng.gen_range(0..3);
                for _ in 0..=extra {
                    out.push(Instr::Block(None));
                }
                let inner = depth + 1 + extra;
                self.expr(out, f, inner);
                out.extend([Instr::I32Eqz, Instr::BrIf(self.rng.gen_range(0..=extra))]);
                self.expr(out, f, inner);
                out.push(Instr::Return);
                for _ in 0..=extra {
                    out.push(Instr::End);
                }
                self.expr(out, f, depth);
            }
            7 => {
                self.scratch_addr(out, f, depth);
                self.expr(out, f, depth);
                if self.rng.gen_bool(0.5) {
                    out.push(Instr::I32Store(MemArg {
                        offset: SCRATCH_LO,
                        align: 4,
                    }));
                } else {
                    out.push(Instr::I32Store8(MemArg {
                        offset: SCRATCH_LO,
                        align: 1,
                    }));
                }
                self.expr(out, f, depth);
            }
            8 => {
                self.scratch_addr(out, f, depth);
                if self.rng.gen_bool(0.5) {
                    out.push(Instr::I32Load(MemArg {
                        offset: SCRATCH_LO,
                        align: 4,
                    }));
                } else {
                    out.push(Instr::I32Load8U(MemArg {
                        offset: SCRATCH_LO,
                        align: 1,
                    }));
                }
            }
            9 | 10 if f > 0 => {
                self.expr(out, f, depth);
                self.expr(out, f, depth);
                let callee = self.rng.gen_range(0..f);
                if choice == 9 {
                    out.push(Instr::Call(self.ni + callee));
                } else {
                    out.extend([Instr::I32Const(callee as i32), Instr::CallIndirect(0)]);
                }
            }
            11 => {
                self.expr(out, f, depth);
                out.push(Instr::LocalTee(self.rng.gen_range(0..3)));
            }
            12 => {
                self.expr(out, f, depth);
                out.extend([Instr::GlobalSet(self.g), Instr::GlobalGet(self.g)]);
            }
            13 => {
                let n = self.rng.gen_range(1..4);
                out.extend([
                    Instr::I32Const(n),
                    Instr::LocalSet(2),
                    Instr::Loop(None),
                    Instr::LocalGet(2),
                    Instr::I32Const(1),
                    Instr::I32Sub,
                    Instr::LocalTee(2),
                    Instr::BrIf(0),
                    Instr::End,
                ]);
                self.expr(out, f, depth);
            }
            14 => out.push(Instr::MemorySize),
            _ => out.push(Instr::I32Const(self.constant())),
        }
    }
}

/// Builds a module with exports `main` (the last function) and `f<i>`.
pub fn gen_program(seed: u64, opts: GenOptions) -> Module {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = |rng: &mut ChaCha8Rng, n: String| {
        if opts.names && rng.gen_bool(0.8) {
            Some(n)
        } else {
            None
        }
    };
    let mut m = Module::default();
    m.types.push(FuncType {
        name: named(&mut rng, "bin".into()),
        params: vec![ValType::I32, ValType::I32],
        result: Some(ValType::I32),
    });
    m.types.push(FuncType::new(vec![], Some(ValType::I32)));
    if opts.time_import {
        m.imports.push(Import {
            module: "env".into(),
            field: "time".into(),
            name: named(&mut rng, "now".into()),
            type_idx: 1,
        });
    }
    let ni = m.imports.len() as u32;
    m.globals.push(Global {
        name: Some(STACK_POINTER_SYMBOL.into()),
        ty: ValType::I32,
        mutable: true,
        init: 65536,
    });
    m.globals.push(Global {
        name: named(&mut rng, "acc".into()),
        ty: ValType::I32,
        mutable: true,
        init: rng.gen_range(-100..100),
    });
    m.memory = Some(Memory {
        name: named(&mut rng, "mem".into()),
        min: 1,
        max: None,
    });
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        ni,
        g: 1,
        budget: 0,
    };
    let n = opts.functions.max(1);
    for i in 0..n {
        gen.budget = 24;
        let mut body = Vec::new();
        gen.expr(&mut body, i as u32, 0);
        m.functions.push(Function {
            name: named(&mut rng, format!("f{i}")),
            type_idx: 0,
            param_names: vec![named(&mut rng, "a".into()), named(&mut rng, "b".into())],
            locals: vec![Local {
                name: named(&mut rng, "k".into()),
                ty: ValType::I32,
            }],
            body,
        });
        m.exports.push(Export {
            name: format!("f{i}"),
            kind: ExportKind::Func,
            index: ni + i as u32,
        });
    }
    m.exports.push(Export {
        name: "main".into(),
        kind: ExportKind::Func,
        index: ni + n as u32 - 1,
    });
    m.table = Some(Table {
        name: None,
        min: n as u32,
        max: None,
    });
    m.elems.push(ElemSegment {
        offset: ConstExpr::I32(0),
        funcs: (0..n as u32).map(|i| ni + i).collect(),
    });
    if opts.extras {
        let len = rng.gen_range(0..12);
        m.data.push(DataSegment {
            offset: ConstExpr::I32(rng.gen_range(0..512)),
            bytes: (0..len).map(|_| rng.gen()).collect(),
        });
        m.exports.push(Export {
            name: "acc".into(),
            kind: ExportKind::Global,
            index: 1,
        });
        m.exports.push(Export {
            name: "memory".into(),
            kind: ExportKind::Memory,
            index: 0,
        });
        if rng.gen_bool(0.5) {
            m.name = Some("generated".into());
        }
    }
    m.validate().expect("generator produces valid modules");
    m
}

/// Small argument pairs that exercise both branches of most conditions.
pub fn arg_pairs() -> Vec<[i32; 2]> {
    vec![
        [0, 0],
        [1, 2],
        [-1, 7],
        [37, 0],
        [i32::MIN, i32::MAX],
        [1000, -3],
    ]
}

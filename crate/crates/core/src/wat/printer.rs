use std::fmt::Write;

use crate::ir::*;

/// Renders a module as flat-form text that parses back to the same module.
pub fn print_module(m: &Module) -> String {
    let mut p = Printer {
        m,
        out: String::new(),
    };
    p.module();
    p.out
}

struct Printer<'a> {
    m: &'a Module,
    out: String,
}

fn quote(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() + 2);
    s.push('"');
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\{b:02x}");
            }
        }
    }
    s.push('"');
    s
}

fn limits(min: u32, max: Option<u32>) -> String {
    match max {
        Some(max) => format!("{min} {max}"),
        None => min.to_string(),
    }
}

impl Printer<'_> {
    fn type_ref(&self, idx: u32) -> String {
        match self
            .m
            .types
            .get(idx as usize)
            .and_then(|t| t.name.as_deref())
        {
            Some(n) => format!("${n}"),
            None => idx.to_string(),
        }
    }

    fn func_ref(&self, idx: u32) -> String {
        match self.m.func_name(idx) {
            Some(n) => format!("${n}"),
            None => idx.to_string(),
        }
    }

    fn global_ref(&self, idx: u32) -> String {
        match self
            .m
            .globals
            .get(idx as usize)
            .and_then(|g| g.name.as_deref())
        {
            Some(n) => format!("${n}"),
            None => idx.to_string(),
        }
    }

    fn const_expr(&self, e: &ConstExpr) -> String {
        match e {
            ConstExpr::I32(v) => format!("(i32.const {v})"),
            ConstExpr::GlobalGet(g) => format!("(global.get {})", self.global_ref(*g)),
        }
    }

    fn signature(&self, ty: &FuncType, names: Option<&[Option<String>]>) -> String {
        let mut s = String::new();
        let mut unnamed = Vec::new();
        let flush = |s: &mut String, unnamed: &mut Vec<ValType>| {
            if !unnamed.is_empty() {
                let list: Vec<String> = unnamed.iter().map(|t| t.to_string()).collect();
                let _ = write!(s, " (param {})", list.join(" "));
                unnamed.clear();
            }
        };
        for (i, p) in ty.params.iter().enumerate() {
            match names.and_then(|n| n[i].as_deref()) {
                Some(n) => {
                    flush(&mut s, &mut unnamed);
                    let _ = write!(s, " (param ${n} {p})");
                }
                None => unnamed.push(*p),
            }
        }
        flush(&mut s, &mut unnamed);
        if let Some(r) = ty.result {
            let _ = write!(s, " (result {r})");
        }
        s
    }

    fn opt_name(name: &Option<String>) -> String {
        name.as_ref().map(|n| format!(" ${n}")).unwrap_or_default()
    }

    fn module(&mut self) {
        let m = self.m;
        let mut fields: Vec<String> = Vec::new();
        for t in &m.types {
            fields.push(format!(
                "(type{} (func{}))",
                Self::opt_name(&t.name),
                self.signature(t, None)
            ));
        }
        for imp in &m.imports {
            fields.push(format!(
                "(import {} {} (func{} (type {})))",
                quote(imp.module.as_bytes()),
                quote(imp.field.as_bytes()),
                Self::opt_name(&imp.name),
                self.type_ref(imp.type_idx)
            ));
        }
        for f in &m.functions {
            fields.push(self.function(f));
        }
        if let Some(t) = &m.table {
            fields.push(format!(
                "(table{} {} funcref)",
                Self::opt_name(&t.name),
                limits(t.min, t.max)
            ));
        }
        if let Some(mem) = &m.memory {
            fields.push(format!(
                "(memory{} {})",
                Self::opt_name(&mem.name),
                limits(mem.min, mem.max)
            ));
        }
        for g in &m.globals {
            let ty = if g.mutable {
                format!("(mut {})", g.ty)
            } else {
                g.ty.to_string()
            };
            fields.push(format!(
                "(global{} {ty} (i32.const {}))",
                Self::opt_name(&g.name),
                g.init
            ));
        }
        for e in &m.exports {
            let target = match e.kind {
                ExportKind::Func => self.func_ref(e.index),
                ExportKind::Global => self.global_ref(e.index),
                ExportKind::Memory | ExportKind::Table => e.index.to_string(),
            };
            fields.push(format!(
                "(export {} ({} {target}))",
                quote(e.name.as_bytes()),
                e.kind.keyword()
            ));
        }
        if let Some(s) = m.start {
            fields.push(format!("(start {})", self.func_ref(s)));
        }
        for seg in &m.elems {
            let funcs: Vec<String> = seg.funcs.iter().map(|&f| self.func_ref(f)).collect();
            let mut line = format!("(elem {} func", self.const_expr(&seg.offset));
            for f in funcs {
                line.push(' ');
                line.push_str(&f);
            }
            line.push(')');
            fields.push(line);
        }
        for seg in &m.data {
            fields.push(format!(
                "(data {} {})",
                self.const_expr(&seg.offset),
                quote(&seg.bytes)
            ));
        }

        self.out.push_str("(module");
        self.out.push_str(&Self::opt_name(&m.name));
        if fields.is_empty() {
            self.out.push(')');
            return;
        }
        for f in fields {
            self.out.push_str("\n  ");
            self.out.push_str(&f);
        }
        self.out.push_str(")\n");
    }

    fn function(&self, f: &Function) -> String {
        let mut s = format!(
            "(func{} (type {})",
            Self::opt_name(&f.name),
            self.type_ref(f.type_idx)
        );
        if let Some(ty) = self.m.types.get(f.type_idx as usize) {
            s.push_str(&self.signature(ty, Some(&f.param_names)));
        }
        let mut unnamed = Vec::new();
        for l in &f.locals {
            match &l.name {
                Some(n) => {
                    if !unnamed.is_empty() {
                        let _ = write!(s, "\n    (local {})", unnamed.join(" "));
                        unnamed.clear();
                    }
                    let _ = write!(s, "\n    (local ${n} {})", l.ty);
                }
                None => unnamed.push(l.ty.to_string()),
            }
        }
        if !unnamed.is_empty() {
            let _ = write!(s, "\n    (local {})", unnamed.join(" "));
        }
        let mut depth = 0usize;
        for ins in &f.body {
            if matches!(ins, Instr::End) {
                depth = depth.saturating_sub(1);
            }
            s.push_str("\n    ");
            for _ in 0..depth {
                s.push_str("  ");
            }
            s.push_str(&self.instr(f, ins));
            if matches!(ins, Instr::Block(_) | Instr::Loop(_)) {
                depth += 1;
            }
        }
        s.push(')');
        s
    }

    fn instr(&self, f: &Function, ins: &Instr) -> String {
        let local = |idx: u32| match f.local_name(idx) {
            Some(n) => format!("${n}"),
            None => idx.to_string(),
        };
        let memarg = |name: &str, arg: &MemArg, width: u32| {
            let mut s = name.to_string();
            if arg.offset != 0 {
                let _ = write!(s, " offset={}", arg.offset);
            }
            if arg.align != width {
                let _ = write!(s, " align={}", arg.align);
            }
            s
        };
        let mn = ins.mnemonic();
        match ins {
            Instr::I32Const(v) => format!("{mn} {v}"),
            Instr::I32Load(a) | Instr::I32Store(a) => memarg(mn, a, 4),
            Instr::I32Load8U(a) | Instr::I32Store8(a) => memarg(mn, a, 1),
            Instr::LocalGet(i) | Instr::LocalSet(i) | Instr::LocalTee(i) => {
                format!("{mn} {}", local(*i))
            }
            Instr::GlobalGet(g) | Instr::GlobalSet(g) => format!("{mn} {}", self.global_ref(*g)),
            Instr::Block(bt) | Instr::Loop(bt) => match bt {
                Some(t) => format!("{mn} (result {t})"),
                None => mn.to_string(),
            },
            Instr::Br(d) | Instr::BrIf(d) => format!("{mn} {d}"),
            Instr::Call(i) => format!("{mn} {}", self.func_ref(*i)),
            Instr::CallIndirect(t) => format!("{mn} (type {})", self.type_ref(*t)),
            _ => mn.to_string(),
        }
    }
}

use std::collections::HashMap;

use thiserror::Error;

use super::lexer::{tokenize, LexError, SourceSpan, Token, TokenKind};
use crate::ir::*;

/// Parameter types, parameter names, result.
type Signature = (Vec<ValType>, Vec<Option<String>>, Option<ValType>);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{span}: {message}")]
pub struct ParseError {
    pub message: String,
    pub span: SourceSpan,
}

impl From<LexError> for ParseError {
    fn from(e: LexError) -> Self {
        ParseError {
            message: e.message,
            span: e.span,
        }
    }
}

type Result<T> = std::result::Result<T, ParseError>;

#[derive(Default)]
struct Namespace {
    names: HashMap<String, u32>,
}

impl Namespace {
    fn define(&mut self, name: &str, idx: u32, what: &str, span: SourceSpan) -> Result<()> {
        if self.names.insert(name.to_string(), idx).is_some() {
            return Err(ParseError {
                message: format!("duplicate {what} name `${name}`"),
                span,
            });
        }
        Ok(())
    }
}

#[derive(Default)]
struct Symbols {
    types: Namespace,
    funcs: Namespace,
    globals: Namespace,
    memories: Namespace,
    tables: Namespace,
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    eof: SourceSpan,
    syms: Symbols,
}

/// Parses a text-format module in flat instruction form.
pub fn parse_module(src: &str) -> Result<Module> {
    let tokens = tokenize(src)?;
    let eof = tokens
        .last()
        .map(|t| SourceSpan {
            line: t.span.line,
            column: t.span.column + t.len as u32,
            offset: t.span.offset + t.len,
        })
        .unwrap_or(SourceSpan {
            line: 1,
            column: 1,
            offset: 0,
        });
    let mut p = Parser {
        tokens: &tokens,
        pos: 0,
        eof,
        syms: Symbols::default(),
    };
    let module = p.module()?;
    if let Some(t) = p.tokens.get(p.pos) {
        return Err(p.err_at(t.span, format!("unexpected {} after module", t.kind)));
    }
    Ok(module)
}

/// Raw extent of a top-level field: the index of its `(` token and its keyword.
struct FieldHeader {
    start: usize,
    keyword: String,
}

impl<'a> Parser<'a> {
    fn err_at(&self, span: SourceSpan, message: impl Into<String>) -> ParseError {
        ParseError {
            message: message.into(),
            span,
        }
    }

    fn span(&self) -> SourceSpan {
        self.tokens
            .get(self.pos)
            .map(|t| t.span)
            .unwrap_or(self.eof)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        self.err_at(self.span(), message)
    }

    fn peek(&self) -> Option<&'a TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn peek_at(&self, n: usize) -> Option<&'a TokenKind> {
        self.tokens.get(self.pos + n).map(|t| &t.kind)
    }

    fn next(&mut self) -> Result<&'a Token> {
        let t = self
            .tokens
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect_lparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(TokenKind::LParen) => {
                self.pos += 1;
                Ok(())
            }
            Some(k) => Err(self.err(format!("expected `(`, found {k}"))),
            None => Err(self.err("expected `(`, found end of input")),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.peek() {
            Some(TokenKind::RParen) => {
                self.pos += 1;
                Ok(())
            }
            Some(k) => Err(self.err(format!("expected `)`, found {k}"))),
            None => Err(self.err("expected `)`, found end of input")),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        match self.peek() {
            Some(TokenKind::Keyword(k)) if k == kw => {
                self.pos += 1;
                Ok(())
            }
            Some(k) => Err(self.err(format!("expected `{kw}`, found {k}"))),
            None => Err(self.err(format!("expected `{kw}`, found end of input"))),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(TokenKind::Keyword(k)) if k == kw)
    }

    /// True when the next tokens are `(` followed by the keyword.
    fn at_sexpr(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(TokenKind::LParen))
            && matches!(self.peek_at(1), Some(TokenKind::Keyword(k)) if k == kw)
    }

    fn opt_id(&mut self) -> Option<String> {
        match self.peek() {
            Some(TokenKind::Id(id)) => {
                self.pos += 1;
                Some(id.clone())
            }
            _ => None,
        }
    }

    fn string(&mut self) -> Result<Vec<u8>> {
        match self.peek() {
            Some(TokenKind::String(s)) => {
                self.pos += 1;
                Ok(s.clone())
            }
            _ => Err(self.err("expected string literal")),
        }
    }

    fn utf8_string(&mut self) -> Result<String> {
        let span = self.span();
        let bytes = self.string()?;
        String::from_utf8(bytes).map_err(|_| self.err_at(span, "name is not valid UTF-8"))
    }

    fn u32_literal(&mut self, what: &str) -> Result<u32> {
        match self.peek() {
            Some(TokenKind::Int(text)) => {
                let span = self.span();
                self.pos += 1;
                parse_int(text)
                    .filter(|v| (0..=u32::MAX as i128).contains(v))
                    .map(|v| v as u32)
                    .ok_or_else(|| self.err_at(span, format!("invalid {what} `{text}`")))
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn i32_literal(&mut self) -> Result<i32> {
        match self.peek() {
            Some(TokenKind::Int(text)) => {
                let span = self.span();
                self.pos += 1;
                parse_int(text)
                    .filter(|v| (i32::MIN as i128..=u32::MAX as i128).contains(v))
                    .map(|v| v as u32 as i32)
                    .ok_or_else(|| self.err_at(span, format!("i32 constant out of range `{text}`")))
            }
            Some(TokenKind::Float(text)) => {
                Err(self.err(format!("floating-point literal `{text}` is not supported")))
            }
            _ => Err(self.err("expected i32 constant")),
        }
    }

    /// Index given either numerically or by `$name`.
    fn index(&mut self, what: &str, ns: fn(&Symbols) -> &Namespace) -> Result<u32> {
        match self.peek() {
            Some(TokenKind::Int(_)) => self.u32_literal(&format!("{what} index")),
            Some(TokenKind::Id(id)) => {
                let span = self.span();
                self.pos += 1;
                ns(&self.syms)
                    .names
                    .get(id)
                    .copied()
                    .ok_or_else(|| self.err_at(span, format!("unresolved {what} symbol `${id}`")))
            }
            _ => Err(self.err(format!("expected {what} index"))),
        }
    }

    fn valtype(&mut self) -> Result<ValType> {
        match self.peek() {
            Some(TokenKind::Keyword(k)) if k == "i32" => {
                self.pos += 1;
                Ok(ValType::I32)
            }
            Some(TokenKind::Keyword(k)) if matches!(k.as_str(), "i64" | "f32" | "f64" | "v128") => {
                Err(self.err(format!("value type `{k}` is not supported (i32 only)")))
            }
            _ => Err(self.err("expected value type")),
        }
    }

    /// Skips a balanced s-expression starting at `(`.
    fn skip_sexpr(&mut self) -> Result<()> {
        let start = self.span();
        self.expect_lparen()?;
        let mut depth = 1;
        while depth > 0 {
            match self.tokens.get(self.pos).map(|t| &t.kind) {
                Some(TokenKind::LParen) => depth += 1,
                Some(TokenKind::RParen) => depth -= 1,
                Some(_) => {}
                None => return Err(self.err_at(start, "unclosed `(`")),
            }
            self.pos += 1;
        }
        Ok(())
    }

    fn module(&mut self) -> Result<Module> {
        self.expect_lparen()?;
        self.expect_keyword("module")?;
        let mut m = Module {
            name: self.opt_id(),
            ..Module::default()
        };
        let headers = self.prescan()?;

        // Explicit types first so inline signatures intern after them.
        let body_end = self.pos;
        for h in headers.iter().filter(|h| h.keyword == "type") {
            self.pos = h.start;
            let ty = self.type_field()?;
            m.types.push(ty);
        }
        for h in &headers {
            self.pos = h.start;
            match h.keyword.as_str() {
                "type" => {}
                "import" => {
                    let imp = self.import_field(&mut m)?;
                    m.imports.push(imp);
                }
                "func" => self.func_field(&mut m)?,
                "global" => self.global_field(&mut m)?,
                "memory" => self.memory_field(&mut m)?,
                "table" => self.table_field(&mut m)?,
                "data" => self.data_field(&mut m)?,
                "elem" => self.elem_field(&mut m)?,
                "export" => self.export_field(&mut m)?,
                "start" => {
                    let span = self.span();
                    self.expect_lparen()?;
                    self.expect_keyword("start")?;
                    if m.start.is_some() {
                        return Err(self.err_at(span, "multiple start functions"));
                    }
                    m.start = Some(self.index("function", |s| &s.funcs)?);
                    self.expect_rparen()?;
                }
                _ => unreachable!("prescan filters keywords"),
            }
        }
        self.pos = body_end;
        self.expect_rparen()?;
        m.validate()
            .map_err(|e| self.err_at(self.eof, e.to_string()))?;
        Ok(m)
    }

    /// Walks the module fields once to assign indices to names, so later
    /// fields can reference earlier and later definitions alike.
    fn prescan(&mut self) -> Result<Vec<FieldHeader>> {
        let mut headers = Vec::new();
        let (mut ntypes, mut nfuncs, mut nglobals, mut nmems, mut ntables) = (0, 0, 0, 0, 0);
        let mut seen_definition = false;
        while let Some(TokenKind::LParen) = self.peek() {
            let start = self.pos;
            let span = self.span();
            let keyword = match self.peek_at(1) {
                Some(TokenKind::Keyword(k)) => k.clone(),
                Some(k) => {
                    return Err(self.err_at(span, format!("expected module field, found {k}")))
                }
                None => return Err(self.err_at(span, "unclosed `(`")),
            };
            let id_span = self
                .tokens
                .get(start + 2)
                .map(|t| t.span)
                .unwrap_or(self.eof);
            let id = match self.peek_at(2) {
                Some(TokenKind::Id(id)) => Some(id.clone()),
                _ => None,
            };
            match keyword.as_str() {
                "type" => {
                    if let Some(id) = &id {
                        self.syms.types.define(id, ntypes, "type", id_span)?;
                    }
                    ntypes += 1;
                }
                "import" => {
                    if seen_definition {
                        return Err(self.err_at(span, "imports must precede definitions"));
                    }
                    // (import "m" "f" (func $id ...))
                    match (self.peek_at(4), self.peek_at(5)) {
                        (Some(TokenKind::LParen), Some(TokenKind::Keyword(k))) if k == "func" => {}
                        _ => return Err(self.err_at(span, "only function imports are supported")),
                    }
                    if let Some(TokenKind::Id(id)) = self.peek_at(6) {
                        let s = self.tokens[start + 6].span;
                        self.syms.funcs.define(id, nfuncs, "function", s)?;
                    }
                    nfuncs += 1;
                }
                "func" => {
                    seen_definition = true;
                    if let Some(id) = &id {
                        self.syms.funcs.define(id, nfuncs, "function", id_span)?;
                    }
                    nfuncs += 1;
                }
                "global" => {
                    seen_definition = true;
                    if let Some(id) = &id {
                        self.syms.globals.define(id, nglobals, "global", id_span)?;
                    }
                    nglobals += 1;
                }
                "memory" => {
                    seen_definition = true;
                    if nmems == 1 {
                        return Err(self.err_at(span, "at most one memory is supported"));
                    }
                    if let Some(id) = &id {
                        self.syms.memories.define(id, 0, "memory", id_span)?;
                    }
                    nmems += 1;
                }
                "table" => {
                    seen_definition = true;
                    if ntables == 1 {
                        return Err(self.err_at(span, "at most one table is supported"));
                    }
                    if let Some(id) = &id {
                        self.syms.tables.define(id, 0, "table", id_span)?;
                    }
                    ntables += 1;
                }
                "data" | "elem" | "export" | "start" => {}
                other => {
                    return Err(self.err_at(
                        self.tokens[start + 1].span,
                        format!("unsupported module field `{other}`"),
                    ))
                }
            }
            headers.push(FieldHeader { start, keyword });
            self.skip_sexpr()?;
        }
        Ok(headers)
    }

    fn type_field(&mut self) -> Result<FuncType> {
        self.expect_lparen()?;
        self.expect_keyword("type")?;
        let name = self.opt_id();
        self.expect_lparen()?;
        self.expect_keyword("func")?;
        let (params, _, result) = self.signature()?;
        self.expect_rparen()?;
        self.expect_rparen()?;
        Ok(FuncType {
            name,
            params,
            result,
        })
    }

    /// Parses `(param ...)* (result ...)*` clauses.
    fn signature(&mut self) -> Result<Signature> {
        let mut params = Vec::new();
        let mut names = Vec::new();
        while self.at_sexpr("param") {
            self.pos += 2;
            if let Some(id) = self.opt_id() {
                params.push(self.valtype()?);
                names.push(Some(id));
            } else {
                while !matches!(self.peek(), Some(TokenKind::RParen)) {
                    params.push(self.valtype()?);
                    names.push(None);
                }
            }
            self.expect_rparen()?;
        }
        let mut results = Vec::new();
        let result_span = self.span();
        while self.at_sexpr("result") {
            self.pos += 2;
            while !matches!(self.peek(), Some(TokenKind::RParen)) {
                results.push(self.valtype()?);
            }
            self.expect_rparen()?;
        }
        if results.len() > 1 {
            return Err(self.err_at(result_span, "at most one result value is supported"));
        }
        Ok((params, names, results.pop()))
    }

    /// `(type idx)? (param ...)* (result ...)*`, returning the type index and
    /// parameter names.
    fn typeuse(&mut self, m: &mut Module) -> Result<(u32, Vec<Option<String>>)> {
        let explicit = if self.at_sexpr("type") {
            self.pos += 2;
            let idx = self.index("type", |s| &s.types)?;
            self.expect_rparen()?;
            Some(idx)
        } else {
            None
        };
        let span = self.span();
        let inline_given = self.at_sexpr("param") || self.at_sexpr("result");
        let (params, names, result) = self.signature()?;
        match explicit {
            Some(idx) => {
                let ty = m
                    .types
                    .get(idx as usize)
                    .ok_or_else(|| self.err_at(span, format!("type index {idx} out of range")))?;
                if inline_given {
                    if ty.params != params || ty.result != result {
                        return Err(self.err_at(span, "inline signature does not match type use"));
                    }
                    Ok((idx, names))
                } else {
                    Ok((idx, vec![None; ty.params.len()]))
                }
            }
            None => Ok((m.intern_type(params, result), names)),
        }
    }

    fn inline_exports(&mut self, m: &mut Module, kind: ExportKind, index: u32) -> Result<()> {
        while self.at_sexpr("export") {
            self.pos += 2;
            let name = self.utf8_string()?;
            self.expect_rparen()?;
            m.exports.push(Export { name, kind, index });
        }
        Ok(())
    }

    fn import_field(&mut self, m: &mut Module) -> Result<Import> {
        self.expect_lparen()?;
        self.expect_keyword("import")?;
        let module = self.utf8_string()?;
        let field = self.utf8_string()?;
        self.expect_lparen()?;
        self.expect_keyword("func")?;
        let name = self.opt_id();
        let (type_idx, _) = self.typeuse(m)?;
        self.expect_rparen()?;
        self.expect_rparen()?;
        Ok(Import {
            module,
            field,
            name,
            type_idx,
        })
    }

    fn func_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("func")?;
        let name = self.opt_id();
        let func_idx = m.num_funcs();
        self.inline_exports(m, ExportKind::Func, func_idx)?;
        if self.at_sexpr("import") {
            return Err(self.err("inline function imports are not supported"));
        }
        let (type_idx, param_names) = self.typeuse(m)?;
        let mut locals = Vec::new();
        while self.at_sexpr("local") {
            self.pos += 2;
            if let Some(id) = self.opt_id() {
                locals.push(Local {
                    name: Some(id),
                    ty: self.valtype()?,
                });
            } else {
                while !matches!(self.peek(), Some(TokenKind::RParen)) {
                    locals.push(Local {
                        name: None,
                        ty: self.valtype()?,
                    });
                }
            }
            self.expect_rparen()?;
        }
        let mut local_names = Namespace::default();
        for (i, n) in param_names
            .iter()
            .chain(locals.iter().map(|l| &l.name))
            .enumerate()
        {
            if let Some(n) = n {
                local_names.define(n, i as u32, "local", self.span())?;
            }
        }
        let body = self.body(m, &local_names)?;
        self.expect_rparen()?;
        m.functions.push(Function {
            name,
            type_idx,
            param_names,
            locals,
            body,
        });
        Ok(())
    }

    fn block_type(&mut self) -> Result<BlockType> {
        if self.at_sexpr("type") {
            return Err(self.err("block type indices are not supported; use (result i32)"));
        }
        if self.at_sexpr("param") {
            return Err(self.err("block parameters are not supported"));
        }
        if self.at_sexpr("result") {
            let span = self.span();
            self.pos += 2;
            let mut results = Vec::new();
            while !matches!(self.peek(), Some(TokenKind::RParen)) {
                results.push(self.valtype()?);
            }
            self.expect_rparen()?;
            if results.len() > 1 {
                return Err(self.err_at(span, "at most one result value is supported"));
            }
            return Ok(results.pop());
        }
        Ok(None)
    }

    fn memarg(&mut self, width: u32) -> Result<MemArg> {
        let mut arg = MemArg::natural(width);
        if let Some(TokenKind::Keyword(k)) = self.peek() {
            if let Some(v) = k.strip_prefix("offset=") {
                let span = self.span();
                self.pos += 1;
                arg.offset = parse_int(v)
                    .filter(|v| (0..=u32::MAX as i128).contains(v))
                    .ok_or_else(|| self.err_at(span, format!("invalid offset `{v}`")))?
                    as u32;
            }
        }
        if let Some(TokenKind::Keyword(k)) = self.peek() {
            if let Some(v) = k.strip_prefix("align=") {
                let span = self.span();
                self.pos += 1;
                arg.align = parse_int(v)
                    .filter(|v| matches!(v, 1 | 2 | 4 | 8))
                    .ok_or_else(|| self.err_at(span, format!("invalid alignment `{v}`")))?
                    as u32;
            }
        }
        Ok(arg)
    }

    fn label(&mut self, labels: &[Option<String>], mnemonic: &str) -> Result<u32> {
        match self.peek() {
            Some(TokenKind::Int(_)) => self.u32_literal("label depth"),
            Some(TokenKind::Id(id)) => {
                let span = self.span();
                self.pos += 1;
                labels
                    .iter()
                    .rev()
                    .position(|l| l.as_deref() == Some(id.as_str()))
                    .map(|d| d as u32)
                    .ok_or_else(|| self.err_at(span, format!("unresolved label `${id}`")))
            }
            _ => Err(self.err(format!("`{mnemonic}` expects a label"))),
        }
    }

    fn local_index(&mut self, locals: &Namespace, mnemonic: &str) -> Result<u32> {
        match self.peek() {
            Some(TokenKind::Int(_)) => self.u32_literal("local index"),
            Some(TokenKind::Id(id)) => {
                let span = self.span();
                self.pos += 1;
                locals
                    .names
                    .get(id)
                    .copied()
                    .ok_or_else(|| self.err_at(span, format!("unresolved local symbol `${id}`")))
            }
            _ => Err(self.err(format!("`{mnemonic}` expects a local index"))),
        }
    }

    fn body(&mut self, m: &mut Module, locals: &Namespace) -> Result<Vec<Instr>> {
        let mut out = Vec::new();
        let mut labels: Vec<Option<String>> = Vec::new();
        loop {
            let span = self.span();
            let tok = match self.peek() {
                Some(TokenKind::RParen) => break,
                None => return Err(self.err("unexpected end of input in function body")),
                Some(TokenKind::LParen) => {
                    return Err(self.err(
                        "folded expressions are not supported; write instructions in flat form",
                    ))
                }
                Some(TokenKind::Keyword(k)) => k.clone(),
                Some(other) => return Err(self.err(format!("expected instruction, found {other}"))),
            };
            self.pos += 1;
            let ins = match tok.as_str() {
                "i32.const" => Instr::I32Const(self.i32_literal()?),
                "i32.add" => Instr::I32Add,
                "i32.sub" => Instr::I32Sub,
                "i32.mul" => Instr::I32Mul,
                "i32.and" => Instr::I32And,
                "i32.or" => Instr::I32Or,
                "i32.xor" => Instr::I32Xor,
                "i32.shl" => Instr::I32Shl,
                "i32.shr_s" => Instr::I32ShrS,
                "i32.shr_u" => Instr::I32ShrU,
                "i32.eq" => Instr::I32Eq,
                "i32.ne" => Instr::I32Ne,
                "i32.lt_u" => Instr::I32LtU,
                "i32.gt_u" => Instr::I32GtU,
                "i32.eqz" => Instr::I32Eqz,
                "i32.load" => Instr::I32Load(self.memarg(4)?),
                "i32.store" => Instr::I32Store(self.memarg(4)?),
                "i32.load8_u" => Instr::I32Load8U(self.memarg(1)?),
                "i32.store8" => Instr::I32Store8(self.memarg(1)?),
                "memory.size" => {
                    // optional memory index 0
                    if let Some(TokenKind::Int(t)) = self.peek() {
                        if t == "0" {
                            self.pos += 1;
                        }
                    }
                    Instr::MemorySize
                }
                "local.get" => Instr::LocalGet(self.local_index(locals, &tok)?),
                "local.set" => Instr::LocalSet(self.local_index(locals, &tok)?),
                "local.tee" => Instr::LocalTee(self.local_index(locals, &tok)?),
                "global.get" => Instr::GlobalGet(self.index("global", |s| &s.globals)?),
                "global.set" => Instr::GlobalSet(self.index("global", |s| &s.globals)?),
                "block" | "loop" => {
                    labels.push(self.opt_id());
                    let bt = self.block_type()?;
                    if tok == "block" {
                        Instr::Block(bt)
                    } else {
                        Instr::Loop(bt)
                    }
                }
                "end" => {
                    let label = labels
                        .pop()
                        .ok_or_else(|| self.err_at(span, "`end` without matching block"))?;
                    if let Some(TokenKind::Id(id)) = self.peek() {
                        if label.as_deref() != Some(id.as_str()) {
                            return Err(self.err(format!("mismatched end label `${id}`")));
                        }
                        self.pos += 1;
                    }
                    Instr::End
                }
                "br" => Instr::Br(self.label(&labels, &tok)?),
                "br_if" => Instr::BrIf(self.label(&labels, &tok)?),
                "return" => Instr::Return,
                "unreachable" => Instr::Unreachable,
                "nop" => Instr::Nop,
                "drop" => Instr::Drop,
                "call" => Instr::Call(self.index("function", |s| &s.funcs)?),
                "call_indirect" => {
                    match self.peek() {
                        Some(TokenKind::Int(_)) | Some(TokenKind::Id(_)) => {
                            let t = self.index("table", |s| &s.tables)?;
                            if t != 0 {
                                return Err(self.err_at(span, "only table 0 is supported"));
                            }
                        }
                        _ => {}
                    }
                    let (type_idx, _) = self.typeuse(m)?;
                    Instr::CallIndirect(type_idx)
                }
                other => {
                    return Err(self.err_at(span, format!("unknown instruction `{other}`")));
                }
            };
            out.push(ins);
        }
        if !labels.is_empty() {
            return Err(self.err("unterminated block: missing `end`"));
        }
        Ok(out)
    }

    fn offset_expr(&mut self) -> Result<ConstExpr> {
        let wrapped = self.at_sexpr("offset");
        if wrapped {
            self.pos += 2;
        }
        self.expect_lparen()?;
        let expr = match self.peek() {
            Some(TokenKind::Keyword(k)) if k == "i32.const" => {
                self.pos += 1;
                ConstExpr::I32(self.i32_literal()?)
            }
            Some(TokenKind::Keyword(k)) if k == "global.get" => {
                self.pos += 1;
                ConstExpr::GlobalGet(self.index("global", |s| &s.globals)?)
            }
            _ => return Err(self.err("expected offset expression (i32.const or global.get)")),
        };
        self.expect_rparen()?;
        if wrapped {
            self.expect_rparen()?;
        }
        Ok(expr)
    }

    fn global_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("global")?;
        let name = self.opt_id();
        let idx = m.globals.len() as u32;
        self.inline_exports(m, ExportKind::Global, idx)?;
        let (ty, mutable) = if self.at_sexpr("mut") {
            self.pos += 2;
            let ty = self.valtype()?;
            self.expect_rparen()?;
            (ty, true)
        } else {
            (self.valtype()?, false)
        };
        self.expect_lparen()?;
        self.expect_keyword("i32.const")?;
        let init = self.i32_literal()?;
        self.expect_rparen()?;
        self.expect_rparen()?;
        m.globals.push(Global {
            name,
            ty,
            mutable,
            init,
        });
        Ok(())
    }

    fn limits(&mut self) -> Result<(u32, Option<u32>)> {
        let min = self.u32_literal("limit")?;
        let max = match self.peek() {
            Some(TokenKind::Int(_)) => Some(self.u32_literal("limit")?),
            _ => None,
        };
        Ok((min, max))
    }

    fn memory_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("memory")?;
        let name = self.opt_id();
        self.inline_exports(m, ExportKind::Memory, 0)?;
        let (min, max) = self.limits()?;
        self.expect_rparen()?;
        m.memory = Some(Memory { name, min, max });
        Ok(())
    }

    fn table_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("table")?;
        let name = self.opt_id();
        self.inline_exports(m, ExportKind::Table, 0)?;
        let (min, max) = self.limits()?;
        match self.peek() {
            Some(TokenKind::Keyword(k)) if k == "funcref" || k == "anyfunc" => self.pos += 1,
            _ => return Err(self.err("expected `funcref`")),
        }
        self.expect_rparen()?;
        m.table = Some(Table { name, min, max });
        Ok(())
    }

    fn data_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("data")?;
        self.opt_id();
        if self.at_sexpr("memory") {
            self.pos += 2;
            self.index("memory", |s| &s.memories)?;
            self.expect_rparen()?;
        }
        let offset = self.offset_expr()?;
        let mut bytes = Vec::new();
        while let Some(TokenKind::String(_)) = self.peek() {
            bytes.extend(self.string()?);
        }
        self.expect_rparen()?;
        m.data.push(DataSegment { offset, bytes });
        Ok(())
    }

    fn elem_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("elem")?;
        self.opt_id();
        if self.at_sexpr("table") {
            self.pos += 2;
            self.index("table", |s| &s.tables)?;
            self.expect_rparen()?;
        }
        let offset = self.offset_expr()?;
        if self.at_keyword("func") {
            self.pos += 1;
        }
        let mut funcs = Vec::new();
        while matches!(
            self.peek(),
            Some(TokenKind::Int(_)) | Some(TokenKind::Id(_))
        ) {
            funcs.push(self.index("function", |s| &s.funcs)?);
        }
        self.expect_rparen()?;
        m.elems.push(ElemSegment { offset, funcs });
        Ok(())
    }

    fn export_field(&mut self, m: &mut Module) -> Result<()> {
        self.expect_lparen()?;
        self.expect_keyword("export")?;
        let name = self.utf8_string()?;
        self.expect_lparen()?;
        let span = self.span();
        let kind = match self.next()?.kind {
            TokenKind::Keyword(ref k) if k == "func" => ExportKind::Func,
            TokenKind::Keyword(ref k) if k == "global" => ExportKind::Global,
            TokenKind::Keyword(ref k) if k == "memory" => ExportKind::Memory,
            TokenKind::Keyword(ref k) if k == "table" => ExportKind::Table,
            ref other => return Err(self.err_at(span, format!("unknown export kind {other}"))),
        };
        let index = match kind {
            ExportKind::Func => self.index("function", |s| &s.funcs)?,
            ExportKind::Global => self.index("global", |s| &s.globals)?,
            ExportKind::Memory => self.index("memory", |s| &s.memories)?,
            ExportKind::Table => self.index("table", |s| &s.tables)?,
        };
        self.expect_rparen()?;
        self.expect_rparen()?;
        m.exports.push(Export { name, kind, index });
        Ok(())
    }
}

/// Parses a decimal or hexadecimal integer literal with optional sign and
/// `_` separators.
fn parse_int(text: &str) -> Option<i128> {
    let (neg, rest) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    if rest.starts_with('_') || rest.ends_with('_') || rest.contains("__") {
        return None;
    }
    let clean: String = rest.chars().filter(|&c| c != '_').collect();
    let value = if let Some(hex) = clean
        .strip_prefix("0x")
        .or_else(|| clean.strip_prefix("0X"))
    {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        clean.parse::<i128>().ok()?
    };
    Some(if neg { -value } else { value })
}

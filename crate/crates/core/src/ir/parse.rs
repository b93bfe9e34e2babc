//! Line-oriented parser for `.lir` text.
//!
//! One declaration or instruction per line; `;` starts a comment. Type
//! declarations are collected in a first pass so that instructions may use
//! types declared further down the file.

use super::types::{FieldPath, PathStep, TypeExpr, TypeTable};
use super::{validate, ArithOp, Block, Function, Global, Inst, IrError, Module, Operand};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Reg(String),
    Glob(String),
    Int(i64),
    Punct(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Reg(s) => format!("`%{s}`"),
            Tok::Glob(s) => format!("`@{s}`"),
            Tok::Int(i) => format!("`{i}`"),
            Tok::Punct(c) => format!("`{c}`"),
        }
    }
}

fn is_sigil_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$'
}

fn lex(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>, IrError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == ';' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '%' || c == '@' {
            let start = i + 1;
            i = start;
            while i < chars.len() && is_sigil_char(chars[i]) {
                i += 1;
            }
            if i == start {
                return Err(syntax(lineno, col, format!("empty name after `{c}`")));
            }
            let name: String = chars[start..i].iter().collect();
            out.push((if c == '%' { Tok::Reg(name) } else { Tok::Glob(name) }, col));
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<i64>()
                .map_err(|_| syntax(lineno, col, format!("integer out of range: {text}")))?;
            out.push((Tok::Int(v), col));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
            continue;
        }
        if "=,:{}[]().*".contains(c) {
            out.push((Tok::Punct(c), col));
            i += 1;
            continue;
        }
        return Err(syntax(lineno, col, format!("unexpected character `{c}`")));
    }
    Ok(out)
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [(Tok, usize)], line: usize, text: &str) -> Self {
        Cursor {
            toks,
            pos: 0,
            line,
            eol_col: text.chars().count() + 1,
        }
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.eol_col)
    }

    fn err(&self, msg: impl Into<String>) -> IrError {
        syntax(self.line, self.col(), msg)
    }

    fn arity(&self, col: usize, msg: impl Into<String>) -> IrError {
        IrError::ArityAt {
            line: self.line,
            col,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_end(&self) -> Result<(), IrError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(self.err(format!("unexpected {}", t.describe()))),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn punct(&mut self, c: char) -> Result<(), IrError> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            Err(self.expected(&format!("`{c}`")))
        }
    }

    fn expected(&self, what: &str) -> IrError {
        match self.peek() {
            Some(t) => self.err(format!("expected {what}, found {}", t.describe())),
            None => self.err(format!("expected {what}, found end of line")),
        }
    }

    fn ident(&mut self) -> Result<String, IrError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.expected("identifier")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), IrError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.expected(&format!("`{kw}`"))),
        }
    }

    fn reg(&mut self) -> Result<String, IrError> {
        match self.peek() {
            Some(Tok::Reg(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.expected("register")),
        }
    }

    fn glob(&mut self) -> Result<String, IrError> {
        match self.peek() {
            Some(Tok::Glob(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.expected("global name")),
        }
    }

    fn uint(&mut self) -> Result<u64, IrError> {
        match self.peek() {
            Some(Tok::Int(i)) if *i >= 0 => {
                let v = *i as u64;
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.expected("non-negative integer")),
        }
    }

    fn operand(&mut self) -> Result<Operand, IrError> {
        let op = match self.peek() {
            Some(Tok::Reg(r)) => Operand::Reg(r.clone()),
            Some(Tok::Glob(g)) => Operand::Global(g.clone()),
            Some(Tok::Int(i)) => Operand::Int(*i),
            Some(Tok::Ident(s)) if s == "null" => Operand::Null,
            _ => return Err(self.expected("operand")),
        };
        self.pos += 1;
        Ok(op)
    }

    /// Comma-separated operands up to the end of the line.
    fn operand_list(&mut self) -> Result<Vec<Operand>, IrError> {
        let mut ops = Vec::new();
        if self.at_end() {
            return Ok(ops);
        }
        loop {
            ops.push(self.operand()?);
            if !self.eat_punct(',') {
                break;
            }
        }
        Ok(ops)
    }

    fn type_expr(&mut self) -> Result<TypeExpr, IrError> {
        match self.peek() {
            Some(Tok::Ident(_)) => Ok(TypeExpr::Named(self.ident()?)),
            Some(Tok::Punct('[')) => {
                self.pos += 1;
                let len = self.uint()?;
                self.keyword("x")?;
                let elem = self.type_expr()?;
                self.punct(']')?;
                Ok(TypeExpr::Array(len, Box::new(elem)))
            }
            Some(Tok::Punct('{')) => {
                self.pos += 1;
                let mut fields = Vec::new();
                if !self.eat_punct('}') {
                    loop {
                        let name = self.ident()?;
                        self.punct(':')?;
                        fields.push((name, self.type_expr()?));
                        if self.eat_punct('}') {
                            break;
                        }
                        self.punct(',')?;
                    }
                }
                Ok(TypeExpr::Struct(fields))
            }
            _ => Err(self.expected("type")),
        }
    }

    fn field_path(&mut self) -> Result<FieldPath, IrError> {
        let mut steps = Vec::new();
        loop {
            if self.eat_punct('.') {
                steps.push(PathStep::Field(self.ident()?));
            } else if self.eat_punct('[') {
                match self.peek() {
                    Some(Tok::Reg(_)) => steps.push(PathStep::VarIndex(self.reg()?)),
                    _ => steps.push(PathStep::Index(self.uint()?)),
                }
                self.punct(']')?;
            } else {
                break;
            }
        }
        if steps.is_empty() {
            return Err(self.expected("field path"));
        }
        Ok(FieldPath(steps))
    }
}

struct Line<'a> {
    no: usize,
    text: &'a str,
    toks: Vec<(Tok, usize)>,
}

/// Parse and validate a module.
pub fn parse_module(text: &str) -> Result<Module, IrError> {
    let mut lines = Vec::new();
    for (i, text) in text.lines().enumerate() {
        let toks = lex(text, i + 1)?;
        if !toks.is_empty() {
            lines.push(Line { no: i + 1, text, toks });
        }
    }

    // Pass 1: type declarations.
    let mut decls = Vec::new();
    let mut first_type_line = None;
    for line in &lines {
        if line.toks[0].0 == Tok::Ident("type".into()) {
            let mut c = Cursor::new(&line.toks, line.no, line.text);
            c.pos = 1;
            let name = c.ident()?;
            c.punct('=')?;
            let expr = c.type_expr()?;
            c.expect_end()?;
            first_type_line.get_or_insert(line.no);
            decls.push((name, expr));
        }
    }
    let mut types = TypeTable::new();
    types.declare_all(decls).map_err(|e| match e {
        IrError::Syntax { .. } => e,
        other => syntax(first_type_line.unwrap_or(1), 1, other.to_string()),
    })?;

    // Pass 2: everything else.
    let mut globals = Vec::new();
    let mut externs = Vec::new();
    let mut fn_starts = Vec::new();
    let mut entry = None;
    let mut i = 0;
    while i < lines.len() {
        let line = &lines[i];
        let mut c = Cursor::new(&line.toks, line.no, line.text);
        let head = match c.peek() {
            Some(Tok::Ident(s)) => s.clone(),
            _ => return Err(c.expected("declaration")),
        };
        c.pos = 1;
        match head.as_str() {
            "type" => {}
            "global" => {
                let name = c.glob()?;
                c.punct(':')?;
                let expr = c.type_expr()?;
                c.expect_end()?;
                let ty = types.intern(&expr).map_err(|e| c.err(e.to_string()))?;
                globals.push(Global { name, ty });
            }
            "declare" => {
                let name = c.glob()?;
                c.expect_end()?;
                externs.push(name);
            }
            "entry" => {
                let name = c.glob()?;
                c.expect_end()?;
                if entry.replace(name).is_some() {
                    return Err(syntax(line.no, 1, "more than one entry directive"));
                }
            }
            "fn" => {
                fn_starts.push(i);
                i = function_end(&lines, i);
                continue;
            }
            other => return Err(syntax(line.no, 1, format!("unknown declaration `{other}`"))),
        }
        i += 1;
    }

    // Functions last, so anonymous types are interned in printed order.
    let mut functions = Vec::new();
    for start in fn_starts {
        functions.push(parse_function(&lines, start, &mut types)?.0);
    }

    let module = Module {
        types,
        globals,
        externs,
        functions,
        entry: entry.unwrap_or_else(|| "main".to_string()),
    };
    validate(&module)?;
    Ok(module)
}

/// Index of the line after the function starting at `start`.
fn function_end(lines: &[Line<'_>], start: usize) -> usize {
    if lines[start].toks.last().map(|t| &t.0) == Some(&Tok::Punct('}')) {
        return start + 1;
    }
    let mut i = start + 1;
    while i < lines.len() {
        let first = &lines[i].toks[0].0;
        i += 1;
        if *first == Tok::Punct('}') {
            return i;
        }
    }
    lines.len()
}

fn parse_function(
    lines: &[Line<'_>],
    start: usize,
    types: &mut TypeTable,
) -> Result<(Function, usize), IrError> {
    let header = &lines[start];
    let mut c = Cursor::new(&header.toks, header.no, header.text);
    c.pos = 1;
    let name = c.glob()?;
    c.punct('(')?;
    let mut params = Vec::new();
    if !c.eat_punct(')') {
        loop {
            params.push(c.reg()?);
            if c.eat_punct(')') {
                break;
            }
            c.punct(',')?;
        }
    }
    c.punct('{')?;
    let mut blocks: Vec<Block> = Vec::new();
    if c.eat_punct('}') {
        c.expect_end()?;
        return Ok((Function { name, params, blocks }, start + 1));
    }
    c.expect_end()?;

    let mut i = start + 1;
    loop {
        let Some(line) = lines.get(i) else {
            return Err(syntax(header.no, 1, format!("unterminated function @{name}")));
        };
        i += 1;
        let mut c = Cursor::new(&line.toks, line.no, line.text);
        if c.eat_punct('}') {
            c.expect_end()?;
            break;
        }
        // `label:`
        if let (Some(Tok::Ident(l)), Some((Tok::Punct(':'), _))) =
            (c.peek().cloned(), line.toks.get(1))
        {
            if line.toks.len() == 2 {
                blocks.push(Block {
                    label: l,
                    insts: Vec::new(),
                });
                continue;
            }
        }
        let inst = parse_inst(&mut c, types)?;
        c.expect_end()?;
        if blocks.is_empty() {
            blocks.push(Block {
                label: "entry".into(),
                insts: Vec::new(),
            });
        }
        blocks.last_mut().unwrap().insts.push(inst);
    }
    Ok((Function { name, params, blocks }, i))
}

fn parse_inst(c: &mut Cursor<'_>, types: &mut TypeTable) -> Result<Inst, IrError> {
    let dst = match c.peek() {
        Some(Tok::Reg(_)) => {
            let r = c.reg()?;
            c.punct('=')?;
            Some(r)
        }
        _ => None,
    };
    let op_col = c.col();
    let op = c.ident()?;
    let mut intern = |c: &Cursor<'_>, e: &TypeExpr| types.intern(e).map_err(|err| c.err(err.to_string()));

    let need_dst = |c: &Cursor<'_>, dst: Option<String>| {
        dst.ok_or_else(|| syntax(c.line, op_col, format!("`{op}` needs a result register")))
    };
    let no_dst = |c: &Cursor<'_>, dst: &Option<String>| match dst {
        Some(_) => Err(syntax(c.line, op_col, format!("`{op}` has no result"))),
        None => Ok(()),
    };

    let inst = match op.as_str() {
        "alloca" => {
            let dst = need_dst(c, dst)?;
            let e = c.type_expr()?;
            let ty = intern(c, &e)?;
            let size = if c.eat_punct(',') { Some(c.uint()?) } else { None };
            Inst::Alloca { dst, ty, size }
        }
        "malloc" => {
            let dst = need_dst(c, dst)?;
            let ops = c.operand_list()?;
            let [size] = exact::<1>(c.line, op_col, "malloc", ops)?;
            Inst::Malloc { dst, size }
        }
        "copy" => {
            let dst = need_dst(c, dst)?;
            let [src] = { let ops = c.operand_list()?; exact::<1>(c.line, op_col, "copy", ops)? };
            Inst::Copy { dst, src }
        }
        "cast" => {
            let dst = need_dst(c, dst)?;
            let e = c.type_expr()?;
            let ty = intern(c, &e)?;
            let [src] = { let ops = c.operand_list()?; exact::<1>(c.line, op_col, "cast", ops)? };
            Inst::Cast { dst, ty, src }
        }
        "load" => {
            let dst = need_dst(c, dst)?;
            let [addr] = { let ops = c.operand_list()?; exact::<1>(c.line, op_col, "load", ops)? };
            Inst::Load { dst, addr }
        }
        "store" => {
            no_dst(c, &dst)?;
            let [addr, value] = { let ops = c.operand_list()?; exact::<2>(c.line, op_col, "store", ops)? };
            Inst::Store { addr, value }
        }
        "phi" => {
            let dst = need_dst(c, dst)?;
            let mut incoming = Vec::new();
            loop {
                c.punct('[')?;
                let v = c.operand()?;
                c.punct(',')?;
                let l = c.ident()?;
                c.punct(']')?;
                incoming.push((v, l));
                if !c.eat_punct(',') {
                    break;
                }
            }
            if incoming.len() != 2 {
                return Err(c.arity(op_col, format!("phi takes 2 inputs, found {}", incoming.len())));
            }
            Inst::Phi { dst, incoming }
        }
        "field" => {
            let dst = need_dst(c, dst)?;
            let e = c.type_expr()?;
            let ty = intern(c, &e)?;
            let base = c.operand()?;
            c.punct(',')?;
            let path = c.field_path()?;
            Inst::Field { dst, ty, base, path }
        }
        "call" => {
            let callee = c.operand()?;
            c.punct('(')?;
            let mut args = Vec::new();
            if !c.eat_punct(')') {
                loop {
                    args.push(c.operand()?);
                    if c.eat_punct(')') {
                        break;
                    }
                    c.punct(',')?;
                }
            }
            Inst::Call { dst, callee, args }
        }
        "ret" => {
            no_dst(c, &dst)?;
            let ops = c.operand_list()?;
            if ops.len() > 1 {
                return Err(c.arity(op_col, "ret takes at most one operand"));
            }
            Inst::Ret {
                value: ops.into_iter().next(),
            }
        }
        "br" => {
            no_dst(c, &dst)?;
            let cond = c.operand()?;
            c.punct(',')?;
            let then_label = c.ident()?;
            c.punct(',')?;
            let else_label = c.ident()?;
            Inst::Br {
                cond,
                then_label,
                else_label,
            }
        }
        "jmp" => {
            no_dst(c, &dst)?;
            Inst::Jmp { target: c.ident()? }
        }
        other => match ArithOp::from_mnemonic(other) {
            Some(aop) => {
                let dst = need_dst(c, dst)?;
                let [lhs, rhs] = { let ops = c.operand_list()?; exact::<2>(c.line, op_col, other, ops)? };
                Inst::Arith { dst, op: aop, lhs, rhs }
            }
            None => return Err(syntax(c.line, op_col, format!("unknown instruction `{other}`"))),
        },
    };
    Ok(inst)
}

fn exact<const N: usize>(
    line: usize,
    col: usize,
    what: &str,
    ops: Vec<Operand>,
) -> Result<[Operand; N], IrError> {
    let n = ops.len();
    ops.try_into()
        .map_err(|_| IrError::ArityAt {
            line,
            col,
            msg: format!("{what} takes {N} operand(s), found {n}"),
        })
}

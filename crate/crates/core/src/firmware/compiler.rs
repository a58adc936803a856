use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::bytecode::{Bytecode, Op, MAX_IMAGE_BYTES};

/// Largest `TX` payload; a payload always fits one radio frame.
pub const MAX_PAYLOAD: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("line {line}: syntax error at `{token}`: {message}")]
    Syntax {
        line: usize,
        token: String,
        message: &'static str,
    },
    #[error("line {line}: {message}")]
    Semantic { line: usize, message: String },
}

fn syntax(line: usize, token: &str, message: &'static str) -> CompileError {
    CompileError::Syntax {
        line,
        token: token.into(),
        message,
    }
}

fn semantic(line: usize, message: impl ToString) -> CompileError {
    CompileError::Semantic {
        line,
        message: message.to_string(),
    }
}

/// Compiles raw source bytes, rejecting anything that is not UTF-8.
pub fn compile_bytes(source: &[u8]) -> Result<Bytecode, CompileError> {
    match core::str::from_utf8(source) {
        Ok(text) => compile(text),
        Err(e) => {
            let line = 1 + source[..e.valid_up_to()]
                .iter()
                .filter(|b| **b == b'\n')
                .count();
            Err(syntax(line, "<non-utf8>", "source is not valid UTF-8"))
        }
    }
}

/// Compiles firmware source to validated bytecode. Compilation is a pure
/// function of the source text.
pub fn compile(source: &str) -> Result<Bytecode, CompileError> {
    let mut c = Compiler::default();
    let mut last_line = 0;
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let text = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        c.statement(line, text)?;
    }
    if let Some((_, line)) = c.loops.last() {
        return Err(semantic(*line, "LOOP without matching END"));
    }
    let code = c.code;
    code.validate().map_err(|e| semantic(last_line, e))?;
    let size = code.encode().len();
    if size > MAX_IMAGE_BYTES {
        return Err(semantic(
            last_line,
            alloc::format!(
                "image of {size} bytes exceeds {MAX_IMAGE_BYTES} bytes of target memory"
            ),
        ));
    }
    Ok(code)
}

#[derive(Default)]
struct Compiler {
    code: Bytecode,
    loops: Vec<(usize, usize)>,
}

impl Compiler {
    fn statement(&mut self, line: usize, text: &str) -> Result<(), CompileError> {
        let (keyword, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim_start()),
            None => (text, ""),
        };
        let mut args = rest.split_whitespace();
        match keyword {
            "SET_CHANNEL" => {
                let n = uint(line, args.next())?;
                no_more(line, args)?;
                self.code.ops.push(Op::SetChannel(n));
            }
            "SET_POWER" => {
                let tok = args
                    .next()
                    .ok_or_else(|| syntax(line, "SET_POWER", "missing power"))?;
                let p: f64 = tok
                    .parse()
                    .map_err(|_| syntax(line, tok, "expected a number"))?;
                if !p.is_finite() {
                    return Err(syntax(line, tok, "power must be finite"));
                }
                no_more(line, args)?;
                self.code.ops.push(Op::SetPower(p));
            }
            "TX" => {
                let tok = args
                    .next()
                    .ok_or_else(|| syntax(line, "TX", "missing payload"))?;
                let payload = hex_bytes(tok).ok_or_else(|| {
                    syntax(line, tok, "payload must be an even number of hex digits")
                })?;
                if payload.is_empty() || payload.len() > MAX_PAYLOAD {
                    return Err(semantic(
                        line,
                        alloc::format!("payload must be 1..={MAX_PAYLOAD} bytes"),
                    ));
                }
                let mut repeat = 1;
                let mut interval_ms = 0;
                while let Some(kw) = args.next() {
                    match kw {
                        "REPEAT" => repeat = uint(line, args.next())?,
                        "INTERVAL" => interval_ms = uint(line, args.next())?,
                        other => return Err(syntax(line, other, "expected REPEAT or INTERVAL")),
                    }
                }
                if repeat == 0 {
                    return Err(semantic(line, "REPEAT must be at least 1"));
                }
                let payload = self.constant(line, payload)?;
                self.code.ops.push(Op::Tx {
                    payload,
                    repeat,
                    interval_ms,
                });
            }
            "RX" => {
                keyword_arg(line, args.next(), "TIMEOUT")?;
                let timeout_ms = uint(line, args.next())?;
                no_more(line, args)?;
                self.code.ops.push(Op::Rx { timeout_ms });
            }
            "SENSE" => {
                keyword_arg(line, args.next(), "WINDOW")?;
                let window_ms = uint(line, args.next())?;
                if window_ms == 0 {
                    return Err(semantic(line, "SENSE WINDOW must be at least 1 ms"));
                }
                no_more(line, args)?;
                self.code.ops.push(Op::Sense { window_ms });
            }
            "REPORT" => {
                if rest.is_empty() {
                    return Err(syntax(line, "REPORT", "missing expression"));
                }
                let tokens = tokenize(line, rest)?;
                let mut p = ExprParser {
                    line,
                    tokens: &tokens,
                    pos: 0,
                    out: Vec::new(),
                    consts: &mut self.code.consts,
                };
                p.expr()?;
                if let Some(t) = tokens.get(p.pos) {
                    return Err(syntax(line, t.text(), "unexpected token after expression"));
                }
                let ops = p.out;
                self.code.ops.extend(ops);
                self.code.ops.push(Op::Report);
            }
            "LOOP" => {
                let tok = args.next();
                no_more(line, args)?;
                let at = self.code.ops.len();
                if tok == Some("FOREVER") {
                    self.code.ops.push(Op::LoopForever);
                } else {
                    let count = uint(line, tok)?;
                    self.code.ops.push(Op::Loop { count, exit: 0 });
                }
                self.loops.push((at, line));
            }
            "END" => {
                no_more(line, args)?;
                let (open, _) = self
                    .loops
                    .pop()
                    .ok_or_else(|| semantic(line, "END without LOOP"))?;
                self.code.ops.push(Op::EndLoop {
                    start: (open + 1) as u32,
                });
                let exit = self.code.ops.len() as u32;
                if let Op::Loop { exit: e, .. } = &mut self.code.ops[open] {
                    *e = exit;
                }
            }
            "HALT" => {
                no_more(line, args)?;
                self.code.ops.push(Op::Halt);
            }
            other => return Err(syntax(line, other, "unknown statement")),
        }
        if self.code.ops.len() > MAX_IMAGE_BYTES {
            return Err(semantic(line, "program too large"));
        }
        Ok(())
    }

    fn constant(&mut self, line: usize, bytes: Vec<u8>) -> Result<u16, CompileError> {
        intern(&mut self.code.consts, bytes).ok_or_else(|| semantic(line, "too many constants"))
    }
}

fn intern(consts: &mut Vec<Vec<u8>>, bytes: Vec<u8>) -> Option<u16> {
    if let Some(i) = consts.iter().position(|c| *c == bytes) {
        return Some(i as u16);
    }
    if consts.len() >= u16::MAX as usize {
        return None;
    }
    consts.push(bytes);
    Some((consts.len() - 1) as u16)
}

fn uint(line: usize, tok: Option<&str>) -> Result<u32, CompileError> {
    let tok = tok.ok_or_else(|| syntax(line, "<end of line>", "missing number"))?;
    if !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(line, tok, "expected an unsigned integer"));
    }
    tok.parse()
        .map_err(|_| syntax(line, tok, "number out of range"))
}

fn keyword_arg(line: usize, tok: Option<&str>, want: &'static str) -> Result<(), CompileError> {
    match tok {
        Some(t) if t == want => Ok(()),
        Some(t) => Err(syntax(line, t, "unexpected keyword")),
        None => Err(syntax(line, "<end of line>", "missing keyword")),
    }
}

fn no_more<'a>(line: usize, mut args: impl Iterator<Item = &'a str>) -> Result<(), CompileError> {
    match args.next() {
        Some(t) => Err(syntax(line, t, "unexpected extra token")),
        None => Ok(()),
    }
}

fn hex_bytes(tok: &str) -> Option<Vec<u8>> {
    if !tok.len().is_multiple_of(2) || !tok.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    hex::decode(tok).ok()
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Int(i64, &'a str),
    Num(f64, &'a str),
    Bytes(Vec<u8>, &'a str),
    Ident(&'a str),
    Sym(&'a str),
}

impl<'a> Token<'a> {
    fn text(&self) -> &'a str {
        match self {
            Token::Int(_, t)
            | Token::Num(_, t)
            | Token::Bytes(_, t)
            | Token::Ident(t)
            | Token::Sym(t) => t,
        }
    }
}

fn tokenize(line: usize, s: &str) -> Result<Vec<Token<'_>>, CompileError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if b == b'=' {
            if bytes.get(i + 1) == Some(&b'=') {
                out.push(Token::Sym(&s[i..i + 2]));
                i += 2;
                continue;
            }
            return Err(syntax(line, &s[i..i + 1], "did you mean `==`?"));
        }
        if matches!(b, b'+' | b'-' | b'*' | b'/' | b'(' | b')') {
            out.push(Token::Sym(&s[i..i + 1]));
            i += 1;
            continue;
        }
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'.' {
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
            {
                i += 1;
            }
            let word = &s[start..i];
            let tok = if let Some(h) = word.strip_prefix("0x") {
                Token::Bytes(
                    hex_bytes(h)
                        .filter(|v| !v.is_empty())
                        .ok_or_else(|| syntax(line, word, "bad hex literal"))?,
                    word,
                )
            } else if word.as_bytes()[0].is_ascii_digit() {
                if word.contains('.') {
                    let v: f64 = word.parse().map_err(|_| syntax(line, word, "bad number"))?;
                    Token::Num(v, word)
                } else {
                    let v: i64 = word
                        .parse()
                        .map_err(|_| syntax(line, word, "bad integer"))?;
                    Token::Int(v, word)
                }
            } else if word.bytes().all(|c| c.is_ascii_alphanumeric() || c == b'_') {
                Token::Ident(word)
            } else {
                return Err(syntax(line, word, "bad token"));
            };
            out.push(tok);
            continue;
        }
        let end = s[i..]
            .char_indices()
            .nth(1)
            .map(|(o, _)| i + o)
            .unwrap_or(s.len());
        return Err(syntax(line, &s[i..end], "unexpected character"));
    }
    Ok(out)
}

struct ExprParser<'t, 'a> {
    line: usize,
    tokens: &'t [Token<'a>],
    pos: usize,
    out: Vec<Op>,
    consts: &'t mut Vec<Vec<u8>>,
}

impl ExprParser<'_, '_> {
    fn peek_sym(&self) -> Option<&str> {
        match self.tokens.get(self.pos) {
            Some(Token::Sym(s)) => Some(s),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<(), CompileError> {
        self.sum()?;
        if self.peek_sym() == Some("==") {
            self.pos += 1;
            self.sum()?;
            self.out.push(Op::Eq);
        }
        Ok(())
    }

    fn sum(&mut self) -> Result<(), CompileError> {
        self.term()?;
        while let Some(op) = self.peek_sym().and_then(|s| match s {
            "+" => Some(Op::Add),
            "-" => Some(Op::Sub),
            _ => None,
        }) {
            self.pos += 1;
            self.term()?;
            self.out.push(op);
        }
        Ok(())
    }

    fn term(&mut self) -> Result<(), CompileError> {
        self.atom()?;
        while let Some(op) = self.peek_sym().and_then(|s| match s {
            "*" => Some(Op::Mul),
            "/" => Some(Op::Div),
            _ => None,
        }) {
            self.pos += 1;
            self.atom()?;
            self.out.push(op);
        }
        Ok(())
    }

    fn atom(&mut self) -> Result<(), CompileError> {
        let line = self.line;
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| syntax(line, "<end of line>", "expected an operand"))?;
        self.pos += 1;
        match tok {
            Token::Int(v, _) => self.out.push(Op::PushInt(v)),
            Token::Num(v, _) => self.out.push(Op::PushNum(v)),
            Token::Bytes(v, _) => {
                let idx =
                    intern(self.consts, v).ok_or_else(|| semantic(line, "too many constants"))?;
                self.out.push(Op::PushBytes(idx));
            }
            Token::Ident("RX_DATA") => self.out.push(Op::RxData),
            Token::Ident("RX_COUNT") => self.out.push(Op::RxCount),
            Token::Ident("OCCUPANCY") => self.out.push(Op::Occupancy),
            Token::Ident(name) => {
                return Err(semantic(
                    line,
                    alloc::format!("unknown identifier `{name}`"),
                ))
            }
            Token::Sym("(") => {
                self.expr()?;
                match self.tokens.get(self.pos) {
                    Some(Token::Sym(")")) => self.pos += 1,
                    Some(t) => return Err(syntax(line, t.text(), "expected `)`")),
                    None => return Err(syntax(line, "<end of line>", "expected `)`")),
                }
            }
            Token::Sym(s) => return Err(syntax(line, s, "expected an operand")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tx_with_repeat_compiles_to_one_tx_op() {
        let code = compile("SET_CHANNEL 1\nTX DEADBEEF REPEAT 3 INTERVAL 100\n").unwrap();
        assert_eq!(code.consts, vec![vec![0xde, 0xad, 0xbe, 0xef]]);
        assert_eq!(
            code.ops,
            vec![
                Op::SetChannel(1),
                Op::Tx {
                    payload: 0,
                    repeat: 3,
                    interval_ms: 100
                }
            ]
        );
    }

    #[test]
    fn rx_and_report() {
        let code = compile("RX TIMEOUT 2000\nREPORT RX_DATA\n").unwrap();
        assert_eq!(
            code.ops,
            vec![Op::Rx { timeout_ms: 2000 }, Op::RxData, Op::Report]
        );
    }

    #[test]
    fn non_hex_payload_is_a_syntax_error() {
        assert_eq!(
            compile("TX ZZZZ"),
            Err(CompileError::Syntax {
                line: 1,
                token: "ZZZZ".into(),
                message: "payload must be an even number of hex digits"
            })
        );
    }

    #[test]
    fn unknown_identifier_is_semantic() {
        assert!(matches!(
            compile("REPORT FOO"),
            Err(CompileError::Semantic { line: 1, .. })
        ));
    }

    #[test]
    fn comments_blank_lines_and_loops() {
        let src = "# header\n\nLOOP 2  # twice\n  SENSE WINDOW 10\nEND\nLOOP FOREVER\nHALT\nEND\n";
        let code = compile(src).unwrap();
        assert_eq!(
            code.ops,
            vec![
                Op::Loop { count: 2, exit: 3 },
                Op::Sense { window_ms: 10 },
                Op::EndLoop { start: 1 },
                Op::LoopForever,
                Op::Halt,
                Op::EndLoop { start: 4 },
            ]
        );
    }

    #[test]
    fn expression_precedence() {
        let code = compile("REPORT 1 + 2 * 3 == 7").unwrap();
        assert_eq!(
            code.ops,
            vec![
                Op::PushInt(1),
                Op::PushInt(2),
                Op::PushInt(3),
                Op::Mul,
                Op::Add,
                Op::PushInt(7),
                Op::Eq,
                Op::Report
            ]
        );
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            compile("LOOP 3\nHALT"),
            Err(CompileError::Semantic { line: 1, .. })
        ));
        assert!(matches!(
            compile("END"),
            Err(CompileError::Semantic { line: 1, .. })
        ));
        assert!(matches!(
            compile("TX 00 REPEAT 0"),
            Err(CompileError::Semantic { .. })
        ));
        assert!(matches!(
            compile("SET_CHANNEL -1"),
            Err(CompileError::Syntax { .. })
        ));
        assert!(matches!(
            compile("REPORT (1"),
            Err(CompileError::Syntax { .. })
        ));
        assert!(matches!(
            compile("REPORT 1 = 1"),
            Err(CompileError::Syntax { .. })
        ));
        assert!(matches!(
            compile("BLINK"),
            Err(CompileError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            compile_bytes(b"HALT\n\xff\xfe"),
            Err(CompileError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn payload_limit() {
        let ok = alloc::format!("TX {}", "ab".repeat(MAX_PAYLOAD));
        assert!(compile(&ok).is_ok());
        let too_long = alloc::format!("TX {}", "ab".repeat(MAX_PAYLOAD + 1));
        assert!(matches!(
            compile(&too_long),
            Err(CompileError::Semantic { .. })
        ));
    }

    #[test]
    fn oversized_image_rejected() {
        let mut src = String::new();
        for i in 0..300u32 {
            // distinct payloads defeat constant interning
            src.push_str(&alloc::format!("TX {:08x}{}\n", i, "cd".repeat(251)));
        }
        assert!(matches!(compile(&src), Err(CompileError::Semantic { .. })));
    }
}

use std::fmt;

use thiserror::Error;

/// Position of a token or error in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SourceSpan {
    /// 1-based.
    pub line: u32,
    /// 1-based, counted in characters.
    pub column: u32,
    pub offset: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    LParen,
    RParen,
    /// Bare word such as `module`, `i32.const` or `offset=8`.
    Keyword(String),
    /// Identifier without its leading `$`.
    Id(String),
    /// Integer literal as written.
    Int(String),
    Float(String),
    String(Vec<u8>),
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::LParen => f.write_str("`(`"),
            TokenKind::RParen => f.write_str("`)`"),
            TokenKind::Keyword(k) => write!(f, "`{k}`"),
            TokenKind::Id(id) => write!(f, "`${id}`"),
            TokenKind::Int(n) | TokenKind::Float(n) => write!(f, "`{n}`"),
            TokenKind::String(_) => f.write_str("string literal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: SourceSpan,
    /// Byte length of the lexeme.
    pub len: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{span}: {message}")]
pub struct LexError {
    pub message: String,
    pub span: SourceSpan,
}

fn is_idchar(c: char) -> bool {
    c.is_ascii_alphanumeric() || "!#$%&'*+-./:<=>?@\\^_`|~".contains(c)
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: u32,
    column: u32,
}

impl<'a> Cursor<'a> {
    fn span(&self) -> SourceSpan {
        SourceSpan {
            line: self.line,
            column: self.column,
            offset: self.pos,
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn starts_with(&self, s: &str) -> bool {
        self.src[self.pos..].starts_with(s)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn error(&self, span: SourceSpan, message: impl Into<String>) -> LexError {
        LexError {
            message: message.into(),
            span,
        }
    }

    /// Skips whitespace and comments.
    fn skip_trivia(&mut self) -> Result<(), LexError> {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some(';') if self.starts_with(";;") => {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                Some('(') if self.starts_with("(;") => self.block_comment()?,
                _ => return Ok(()),
            }
        }
    }

    fn block_comment(&mut self) -> Result<(), LexError> {
        let start = self.span();
        let mut depth = 0usize;
        loop {
            if self.starts_with("(;") {
                self.bump();
                self.bump();
                depth += 1;
            } else if self.starts_with(";)") {
                self.bump();
                self.bump();
                depth -= 1;
                if depth == 0 {
                    return Ok(());
                }
            } else if self.bump().is_none() {
                return Err(self.error(start, "unterminated block comment"));
            }
        }
    }

    fn string(&mut self) -> Result<Vec<u8>, LexError> {
        let start = self.span();
        self.bump();
        let mut out = Vec::new();
        loop {
            let here = self.span();
            match self.bump() {
                None | Some('\n') => return Err(self.error(start, "unterminated string literal")),
                Some('"') => return Ok(out),
                Some('\\') => {
                    let esc = self
                        .bump()
                        .ok_or_else(|| self.error(start, "unterminated string literal"))?;
                    match esc {
                        'n' => out.push(b'\n'),
                        't' => out.push(b'\t'),
                        'r' => out.push(b'\r'),
                        '\\' => out.push(b'\\'),
                        '\'' => out.push(b'\''),
                        '"' => out.push(b'"'),
                        hi if hi.is_ascii_hexdigit() => {
                            let lo = self
                                .bump()
                                .filter(|c| c.is_ascii_hexdigit())
                                .ok_or_else(|| self.error(here, "invalid hex escape"))?;
                            let byte = (hi.to_digit(16).unwrap() << 4) | lo.to_digit(16).unwrap();
                            out.push(byte as u8);
                        }
                        other => {
                            return Err(self.error(here, format!("unknown escape `\\{other}`")))
                        }
                    }
                }
                Some(c) => {
                    let mut buf = [0u8; 4];
                    out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
    }
}

fn classify_word(word: &str) -> TokenKind {
    if let Some(id) = word.strip_prefix('$') {
        return TokenKind::Id(id.to_string());
    }
    let digits = word.strip_prefix(['+', '-']).unwrap_or(word);
    if digits.starts_with(|c: char| c.is_ascii_digit()) {
        let is_hex = digits.starts_with("0x") || digits.starts_with("0X");
        let body = if is_hex { &digits[2..] } else { digits };
        let int_like = !body.is_empty()
            && body.chars().all(|c| {
                c == '_'
                    || if is_hex {
                        c.is_ascii_hexdigit()
                    } else {
                        c.is_ascii_digit()
                    }
            });
        return if int_like {
            TokenKind::Int(word.to_string())
        } else {
            TokenKind::Float(word.to_string())
        };
    }
    if matches!(digits, "inf" | "nan") || digits.starts_with("nan:") {
        return TokenKind::Float(word.to_string());
    }
    TokenKind::Keyword(word.to_string())
}

/// Splits text-format source into tokens, dropping whitespace and comments.
pub fn tokenize(src: &str) -> Result<Vec<Token>, LexError> {
    let mut cur = Cursor {
        src,
        pos: 0,
        line: 1,
        column: 1,
    };
    let mut tokens = Vec::new();
    loop {
        cur.skip_trivia()?;
        let span = cur.span();
        let Some(c) = cur.peek() else {
            return Ok(tokens);
        };
        let kind = match c {
            '(' => {
                cur.bump();
                TokenKind::LParen
            }
            ')' => {
                cur.bump();
                TokenKind::RParen
            }
            '"' => TokenKind::String(cur.string()?),
            c if is_idchar(c) => {
                while cur.peek().is_some_and(is_idchar) {
                    cur.bump();
                }
                classify_word(&src[span.offset..cur.pos])
            }
            other => return Err(cur.error(span, format!("unexpected character `{other}`"))),
        };
        tokens.push(Token {
            kind,
            span,
            len: cur.pos - span.offset,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        tokenize(src).unwrap().into_iter().map(|t| t.kind).collect()
    }

    fn kw(s: &str) -> TokenKind {
        TokenKind::Keyword(s.into())
    }

    #[test]
    fn smallest_module() {
        assert_eq!(
            kinds("(module)"),
            vec![TokenKind::LParen, kw("module"), TokenKind::RParen]
        );
    }

    #[test]
    fn line_comment_dropped() {
        assert_eq!(
            kinds("i32.const 26 ;; x"),
            vec![kw("i32.const"), TokenKind::Int("26".into())]
        );
    }

    #[test]
    fn block_comment_dropped() {
        assert_eq!(
            kinds("(; a ;)(func)"),
            vec![TokenKind::LParen, kw("func"), TokenKind::RParen]
        );
        assert_eq!(kinds("(; (; nested ;) ;)nop"), vec![kw("nop")]);
    }

    #[test]
    fn ids_numbers_strings() {
        assert_eq!(
            kinds(r#"$__stack_pointer -0x10 1_000 1.5 "a\41\n" offset=8"#),
            vec![
                TokenKind::Id("__stack_pointer".into()),
                TokenKind::Int("-0x10".into()),
                TokenKind::Int("1_000".into()),
                TokenKind::Float("1.5".into()),
                TokenKind::String(b"aA\n".to_vec()),
                kw("offset=8"),
            ]
        );
    }

    #[test]
    fn spans_track_lines() {
        let toks = tokenize("(module\n  (func))").unwrap();
        assert_eq!(
            toks[2].span,
            SourceSpan {
                line: 2,
                column: 3,
                offset: 10
            }
        );
        assert_eq!(toks[3].span.column, 4);
    }

    #[test]
    fn unterminated_string() {
        let err = tokenize("(data \"abc").unwrap_err();
        assert_eq!(
            err.span,
            SourceSpan {
                line: 1,
                column: 7,
                offset: 6
            }
        );
        assert!(err.message.contains("unterminated string"));
    }

    #[test]
    fn unterminated_block_comment() {
        let err = tokenize("nop (; never closed").unwrap_err();
        assert_eq!(err.span.offset, 4);
        assert!(err.message.contains("block comment"));
    }

    fn is_trivia(gap: &str) -> bool {
        tokenize(gap).map(|t| t.is_empty()).unwrap_or(false)
    }

    proptest! {
        #[test]
        fn tokens_cover_input(parts in proptest::collection::vec(
            prop_oneof![
                Just("(".to_string()), Just(")".to_string()), Just(" ".to_string()),
                Just("\n".to_string()), Just(";; c\n".to_string()), Just("(; b ;)".to_string()),
                "[a-z][a-z0-9._]{0,6}", "\\$[a-z_]{1,5}", "-?[0-9]{1,4}", "\"[a-z ]{0,4}\"",
            ], 0..30)) {
            let src = parts.join(" ");
            let toks = tokenize(&src).unwrap();
            let mut pos = 0;
            let mut covered = 0;
            for t in &toks {
                prop_assert!(t.span.offset >= pos);
                prop_assert!(is_trivia(&src[pos..t.span.offset]));
                covered += t.len;
                pos = t.span.offset + t.len;
            }
            prop_assert!(is_trivia(&src[pos..]));
            let skipped: usize = src.len() - covered;
            prop_assert_eq!(covered + skipped, src.len());
        }
    }
}

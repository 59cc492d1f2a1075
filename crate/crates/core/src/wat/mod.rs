//! Text-format front end: lexer, flat-form parser and printer.

mod lexer;
mod parser;
mod printer;

pub use lexer::{tokenize, LexError, SourceSpan, Token, TokenKind};
pub use parser::{parse_module, ParseError};
pub use printer::print_module;

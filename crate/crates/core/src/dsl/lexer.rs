//! Indentation-aware tokenizer.
//!
//! Newlines inside brackets are ignored, and a line ending in a comma at
//! bracket depth zero continues onto the next line (object specifiers).

use super::diagnostic::{Code, Diagnostic, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keyword {
    Param,
    Model,
    Behaviour,
    Try,
    Interrupt,
    When,
    Do,
    Take,
    While,
    Terminate,
    Require,
    Not,
    And,
    Or,
    Is,
    In,
    Lambda,
    True,
    False,
    None,
    With,
}

impl Keyword {
    fn lookup(word: &str) -> Option<Keyword> {
        Some(match word {
            "param" => Keyword::Param,
            "model" => Keyword::Model,
            "behaviour" | "behavior" => Keyword::Behaviour,
            "try" => Keyword::Try,
            "interrupt" => Keyword::Interrupt,
            "when" => Keyword::When,
            "do" => Keyword::Do,
            "take" => Keyword::Take,
            "while" => Keyword::While,
            "terminate" => Keyword::Terminate,
            "require" => Keyword::Require,
            "not" => Keyword::Not,
            "and" => Keyword::And,
            "or" => Keyword::Or,
            "is" => Keyword::Is,
            "in" => Keyword::In,
            "lambda" => Keyword::Lambda,
            "True" => Keyword::True,
            "False" => Keyword::False,
            "None" => Keyword::None,
            "with" => Keyword::With,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Name(String),
    /// Keyword plus the exact spelling (`behaviour` vs `behavior`).
    Kw(Keyword, String),
    Number(f64),
    Str(String),
    DocString(String),
    Op(&'static str),
    Newline,
    Indent,
    Dedent,
    Eof,
}

impl Tok {
    /// Human-readable rendering for syntax errors.
    pub fn describe(&self) -> String {
        match self {
            Tok::Name(n) => format!("'{n}'"),
            Tok::Kw(_, s) => format!("'{s}'"),
            Tok::Number(n) => format!("'{n}'"),
            Tok::Str(_) => "string literal".to_string(),
            Tok::DocString(_) => "docstring".to_string(),
            Tok::Op(o) => format!("'{o}'"),
            Tok::Newline => "end of line".to_string(),
            Tok::Indent => "indent".to_string(),
            Tok::Dedent => "dedent".to_string(),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

const OPS: &[&str] = &[
    "<=", ">=", "==", "!=", "(", ")", "[", "]", ",", ":", ".", "=", "<", ">", "+", "-", "*", "/",
];

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: u32,
    col: u32,
    tokens: Vec<Token>,
    indents: Vec<u32>,
    depth: usize,
    _src: &'a str,
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut lx = Lexer {
        chars: source.chars().collect(),
        pos: 0,
        line: 1,
        col: 1,
        tokens: Vec::new(),
        indents: vec![0],
        depth: 0,
        _src: source,
    };
    lx.run()?;
    Ok(lx.tokens)
}

impl Lexer<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn push(&mut self, tok: Tok, line: u32, col: u32) {
        let span = Span::new(line, col, self.line, self.col);
        self.tokens.push(Token { tok, span });
    }

    fn last_is(&self, f: impl Fn(&Tok) -> bool) -> bool {
        self.tokens.last().is_some_and(|t| f(&t.tok))
    }

    fn run(&mut self) -> Result<(), Diagnostic> {
        let mut at_line_start = true;
        let mut continuation = false;
        loop {
            if at_line_start {
                at_line_start = false;
                if self.depth == 0 && !continuation && self.handle_indentation()? {
                    // blank or comment-only line consumed
                    at_line_start = true;
                    continue;
                }
                continuation = false;
            }
            let Some(c) = self.peek() else { break };
            let (line, col) = (self.line, self.col);
            match c {
                ' ' | '\t' | '\r' => {
                    self.bump();
                }
                '#' => {
                    while self.peek().is_some_and(|c| c != '\n') {
                        self.bump();
                    }
                }
                '\\' if self.peek_at(1) == Some('\n') => {
                    self.bump();
                    self.bump();
                }
                '\n' => {
                    self.bump();
                    if self.depth == 0 {
                        if self.last_is(|t| *t == Tok::Op(",")) {
                            continuation = true;
                        } else if !self.tokens.is_empty()
                            && !self.last_is(|t| matches!(t, Tok::Newline | Tok::Indent | Tok::Dedent))
                        {
                            self.push(Tok::Newline, line, col);
                        }
                    }
                    at_line_start = true;
                }
                '"' | '\'' => self.string(c)?,
                c if c.is_ascii_digit() || (c == '.' && self.peek_at(1).is_some_and(|d| d.is_ascii_digit())) => {
                    self.number()
                }
                c if c.is_alphabetic() || c == '_' => {
                    let mut word = String::new();
                    while let Some(c) = self.peek() {
                        if c.is_alphanumeric() || c == '_' {
                            word.push(c);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    let tok = match Keyword::lookup(&word) {
                        Some(kw) => Tok::Kw(kw, word),
                        None => Tok::Name(word),
                    };
                    self.push(tok, line, col);
                }
                _ => {
                    let op = OPS.iter().find(|op| {
                        op.chars().enumerate().all(|(i, oc)| self.peek_at(i) == Some(oc))
                    });
                    match op {
                        Some(op) => {
                            for _ in 0..op.len() {
                                self.bump();
                            }
                            match *op {
                                "(" | "[" => self.depth += 1,
                                ")" | "]" => self.depth = self.depth.saturating_sub(1),
                                _ => {}
                            }
                            self.push(Tok::Op(op), line, col);
                        }
                        None => {
                            return Err(Diagnostic::error(
                                Code::LexError,
                                format!("invalid character '{}' (U+{:04X})", c, c as u32),
                                Some(Span::point(line, col)),
                            ))
                        }
                    }
                }
            }
        }
        let (line, col) = (self.line, self.col);
        if self.depth == 0 && !self.tokens.is_empty() && !self.last_is(|t| matches!(t, Tok::Newline | Tok::Dedent)) {
            self.push(Tok::Newline, line, col);
        }
        while self.indents.len() > 1 {
            self.indents.pop();
            self.push(Tok::Dedent, line, col);
        }
        self.push(Tok::Eof, line, col);
        Ok(())
    }

    /// Measures leading whitespace and emits INDENT/DEDENT tokens.
    /// Returns true if the line was blank or comment-only and has been skipped.
    fn handle_indentation(&mut self) -> Result<bool, Diagnostic> {
        let mut width = 0u32;
        let mut off = 0;
        while let Some(c) = self.peek_at(off) {
            match c {
                ' ' => width += 1,
                '\t' => width = (width / 8 + 1) * 8,
                '\r' => {}
                _ => break,
            }
            off += 1;
        }
        match self.peek_at(off) {
            None => {
                for _ in 0..off {
                    self.bump();
                }
                return Ok(false);
            }
            Some('\n') | Some('#') => {
                while self.peek().is_some_and(|c| c != '\n') {
                    self.bump();
                }
                self.bump();
                return Ok(true);
            }
            _ => {}
        }
        for _ in 0..off {
            self.bump();
        }
        let current = *self.indents.last().unwrap();
        let (line, col) = (self.line, self.col);
        if width > current {
            self.indents.push(width);
            self.push(Tok::Indent, line, col);
        } else if width < current {
            while width < *self.indents.last().unwrap() {
                self.indents.pop();
                self.push(Tok::Dedent, line, col);
            }
            if width != *self.indents.last().unwrap() {
                return Err(Diagnostic::error(
                    Code::SyntaxError,
                    "unindent does not match any outer indentation level",
                    Some(Span::point(line, 1)),
                ));
            }
        }
        Ok(false)
    }

    fn string(&mut self, quote: char) -> Result<(), Diagnostic> {
        let (line, col) = (self.line, self.col);
        if self.peek_at(1) == Some(quote) && self.peek_at(2) == Some(quote) {
            for _ in 0..3 {
                self.bump();
            }
            let mut text = String::new();
            loop {
                match self.peek() {
                    None => {
                        return Err(Diagnostic::error(
                            Code::LexError,
                            "unterminated triple-quoted string",
                            Some(Span::point(line, col)),
                        ))
                    }
                    Some(c) if c == quote && self.peek_at(1) == Some(quote) && self.peek_at(2) == Some(quote) => {
                        for _ in 0..3 {
                            self.bump();
                        }
                        break;
                    }
                    Some(c) => {
                        text.push(c);
                        self.bump();
                    }
                }
            }
            self.push(Tok::DocString(text), line, col);
            return Ok(());
        }
        self.bump();
        let mut text = String::new();
        loop {
            match self.peek() {
                None | Some('\n') => {
                    return Err(Diagnostic::error(
                        Code::LexError,
                        "unterminated string literal",
                        Some(Span::point(line, col)),
                    ))
                }
                Some('\\') => {
                    self.bump();
                    match self.bump() {
                        Some('n') => text.push('\n'),
                        Some('t') => text.push('\t'),
                        Some(c) => text.push(c),
                        None => {}
                    }
                }
                Some(c) if c == quote => {
                    self.bump();
                    break;
                }
                Some(c) => {
                    text.push(c);
                    self.bump();
                }
            }
        }
        self.push(Tok::Str(text), line, col);
        Ok(())
    }

    fn number(&mut self) {
        let (line, col) = (self.line, self.col);
        let mut text = String::new();
        let mut seen_dot = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || c == '_' {
                if c != '_' {
                    text.push(c);
                }
                self.bump();
            } else if c == '.' && !seen_dot && self.peek_at(1).is_some_and(|d| d.is_ascii_digit()) {
                seen_dot = true;
                text.push(c);
                self.bump();
            } else if c == '.' && !seen_dot && !self.peek_at(1).is_some_and(|d| d.is_alphabetic()) {
                // trailing dot, e.g. `1.`
                seen_dot = true;
                self.bump();
            } else {
                break;
            }
        }
        let value = text.parse::<f64>().unwrap_or(0.0);
        self.push(Tok::Number(value), line, col);
    }
}

use super::PolicyError;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Str(String),
    Int(i64),
    Dec(f64),
    Ident(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Cmp(super::CmpOp),
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub(crate) fn tokenize(source: &str) -> Result<Vec<Token>, PolicyError> {
    Lexer {
        chars: source.chars().collect(),
        pos: 0,
        line: 1,
        col: 1,
    }
    .run()
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

impl Lexer {
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

    fn err(&self, line: usize, col: usize, message: impl Into<String>) -> PolicyError {
        PolicyError::Parse {
            line,
            column: col,
            message: message.into(),
        }
    }

    fn run(mut self) -> Result<Vec<Token>, PolicyError> {
        use super::CmpOp;

        let mut out = Vec::new();
        loop {
            // whitespace and comments
            while let Some(c) = self.peek() {
                if c.is_whitespace() {
                    self.bump();
                } else if c == '#' {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek() else {
                out.push(Token { tok: Tok::Eof, line, col });
                return Ok(out);
            };
            let tok = match c {
                '{' => self.single(Tok::LBrace),
                '}' => self.single(Tok::RBrace),
                '(' => self.single(Tok::LParen),
                ')' => self.single(Tok::RParen),
                '[' => self.single(Tok::LBracket),
                ']' => self.single(Tok::RBracket),
                ',' => self.single(Tok::Comma),
                '=' | '!' | '<' | '>' => {
                    self.bump();
                    let eq = self.peek() == Some('=');
                    if eq {
                        self.bump();
                    }
                    match (c, eq) {
                        ('=', true) => Tok::Cmp(CmpOp::Eq),
                        ('!', true) => Tok::Cmp(CmpOp::Ne),
                        ('<', false) => Tok::Cmp(CmpOp::Lt),
                        ('<', true) => Tok::Cmp(CmpOp::Le),
                        ('>', false) => Tok::Cmp(CmpOp::Gt),
                        ('>', true) => Tok::Cmp(CmpOp::Ge),
                        _ => return Err(self.err(line, col, format!("unexpected `{c}`"))),
                    }
                }
                '"' => self.string(line, col)?,
                c if c.is_ascii_digit()
                    || (c == '-' && self.peek_at(1).is_some_and(|d| d.is_ascii_digit())) =>
                {
                    self.number(line, col)?
                }
                c if c.is_alphabetic() || c == '_' => {
                    let mut s = String::new();
                    while let Some(c) = self.peek() {
                        if c.is_alphanumeric() || matches!(c, '_' | '-' | '.') {
                            s.push(c);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(s)
                }
                other => return Err(self.err(line, col, format!("unexpected character `{other}`"))),
            };
            out.push(Token { tok, line, col });
        }
    }

    fn single(&mut self, tok: Tok) -> Tok {
        self.bump();
        tok
    }

    fn string(&mut self, line: usize, col: usize) -> Result<Tok, PolicyError> {
        self.bump();
        let mut s = String::new();
        loop {
            match self.bump() {
                None => return Err(self.err(line, col, "unterminated string")),
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    Some('r') => s.push('\r'),
                    other => {
                        return Err(self.err(
                            self.line,
                            self.col,
                            format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default()),
                        ))
                    }
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn number(&mut self, line: usize, col: usize) -> Result<Tok, PolicyError> {
        let mut s = String::new();
        let mut decimal = false;
        if self.peek() == Some('-') {
            s.push('-');
            self.bump();
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                s.push(c);
                self.bump();
            } else if c == '.' && !decimal && self.peek_at(1).is_some_and(|d| d.is_ascii_digit()) {
                decimal = true;
                s.push(c);
                self.bump();
            } else if (c == 'e' || c == 'E')
                && (self.peek_at(1).is_some_and(|d| d.is_ascii_digit())
                    || (matches!(self.peek_at(1), Some('-' | '+'))
                        && self.peek_at(2).is_some_and(|d| d.is_ascii_digit())))
            {
                decimal = true;
                s.push(c);
                self.bump();
                if let Some(sign @ ('-' | '+')) = self.peek() {
                    s.push(sign);
                    self.bump();
                }
                while let Some(d) = self.peek().filter(|d| d.is_ascii_digit()) {
                    s.push(d);
                    self.bump();
                }
                break;
            } else {
                break;
            }
        }
        if decimal {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Tok::Dec)
                .ok_or_else(|| self.err(line, col, format!("bad number `{s}`")))
        } else {
            s.parse::<i64>()
                .map(Tok::Int)
                .map_err(|_| self.err(line, col, format!("integer out of range `{s}`")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn numbers_idents_and_comments() {
        assert_eq!(
            toks("risk R-001 # trailing\n 0.5 -3 1e-7 args.x"),
            vec![
                Tok::Ident("risk".into()),
                Tok::Ident("R-001".into()),
                Tok::Dec(0.5),
                Tok::Int(-3),
                Tok::Dec(1e-7),
                Tok::Ident("args.x".into()),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn positions_are_one_based() {
        let t = tokenize("\n  \"x").unwrap_err();
        assert_eq!(
            t,
            PolicyError::Parse {
                line: 2,
                column: 3,
                message: "unterminated string".into()
            }
        );
    }
}

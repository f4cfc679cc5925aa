//! Recursive-descent parser for the boolean query language.
//!
//! ```text
//! query   := or
//! or      := and (OR and)*
//! and     := not ((AND)? not)*
//! not     := NOT* primary
//! primary := WORD | '"' PHRASE '"' | '(' query ')'
//! ```
//!
//! Keywords are case-insensitive. Adjacent operands are AND-ed. A bare word
//! that folds into several tokens (`v2.1`) becomes a phrase.

use thiserror::Error;

use super::ast::QueryAst;
use super::normalize::normalize;

/// Parse failure; `position` is a character offset into the raw query.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unbalanced parenthesis at {position}")]
    UnbalancedParenthesis { position: usize },
    #[error("operator without operand at {position}")]
    DanglingOperator { position: usize },
    #[error("empty group at {position}")]
    EmptyGroup { position: usize },
    #[error("unterminated phrase starting at {position}")]
    UnterminatedPhrase { position: usize },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::EmptyQuery => "empty_query",
            ParseError::UnbalancedParenthesis { .. } => "unbalanced_parenthesis",
            ParseError::DanglingOperator { .. } => "dangling_operator",
            ParseError::EmptyGroup { .. } => "empty_group",
            ParseError::UnterminatedPhrase { .. } => "unterminated_phrase",
        }
    }

    pub fn position(&self) -> Option<usize> {
        match self {
            ParseError::EmptyQuery => None,
            ParseError::UnbalancedParenthesis { position }
            | ParseError::DanglingOperator { position }
            | ParseError::EmptyGroup { position }
            | ParseError::UnterminatedPhrase { position } => Some(*position),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Open,
    Close,
    And,
    Or,
    Not,
    Word(Vec<String>),
    Quoted(Vec<String>),
}

fn lex(raw: &str) -> Result<Vec<(Lexeme, usize)>, ParseError> {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push((Lexeme::Open, i));
            i += 1;
        } else if c == ')' {
            out.push((Lexeme::Close, i));
            i += 1;
        } else if c == '"' {
            let start = i;
            let end = chars[i + 1..]
                .iter()
                .position(|&c| c == '"')
                .map(|off| i + 1 + off)
                .ok_or(ParseError::UnterminatedPhrase { position: start })?;
            let inner: String = chars[start + 1..end].iter().collect();
            out.push((Lexeme::Quoted(normalize(&inner)), start));
            i = end + 1;
        } else {
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() && !"()\"".contains(chars[i]) {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let lexeme = if word.eq_ignore_ascii_case("and") {
                Lexeme::And
            } else if word.eq_ignore_ascii_case("or") {
                Lexeme::Or
            } else if word.eq_ignore_ascii_case("not") {
                Lexeme::Not
            } else {
                let tokens = normalize(&word);
                if tokens.is_empty() {
                    // pure punctuation carries no term
                    continue;
                }
                Lexeme::Word(tokens)
            };
            out.push((lexeme, start));
        }
    }
    Ok(out)
}

pub fn parse_query(raw: &str) -> Result<QueryAst, ParseError> {
    let lexemes = lex(raw)?;
    if lexemes.is_empty() {
        return Err(ParseError::EmptyQuery);
    }
    let mut parser = Parser { lexemes, pos: 0 };
    let ast = parser.or()?;
    match parser.peek() {
        None => Ok(ast),
        Some((_, position)) => Err(ParseError::UnbalancedParenthesis { position }),
    }
}

struct Parser {
    lexemes: Vec<(Lexeme, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<(&Lexeme, usize)> {
        self.lexemes.get(self.pos).map(|(l, p)| (l, *p))
    }

    fn bump(&mut self) -> Option<(Lexeme, usize)> {
        let item = self.lexemes.get(self.pos).cloned();
        self.pos += 1;
        item
    }

    /// True when the next lexeme cannot start an operand.
    fn operand_missing(&self) -> bool {
        matches!(
            self.peek(),
            None | Some((Lexeme::And | Lexeme::Or | Lexeme::Close, _))
        )
    }

    fn or(&mut self) -> Result<QueryAst, ParseError> {
        let mut children = vec![self.and()?];
        while let Some((Lexeme::Or, position)) = self.peek() {
            self.bump();
            if self.operand_missing() {
                return Err(ParseError::DanglingOperator { position });
            }
            children.push(self.and()?);
        }
        Ok(collapse(children, QueryAst::Or))
    }

    fn and(&mut self) -> Result<QueryAst, ParseError> {
        let mut children = vec![self.not()?];
        loop {
            match self.peek() {
                Some((Lexeme::And, position)) => {
                    self.bump();
                    if self.operand_missing() {
                        return Err(ParseError::DanglingOperator { position });
                    }
                    children.push(self.not()?);
                }
                Some((Lexeme::Word(_) | Lexeme::Quoted(_) | Lexeme::Open | Lexeme::Not, _)) => {
                    children.push(self.not()?);
                }
                _ => break,
            }
        }
        Ok(collapse(children, QueryAst::And))
    }

    fn not(&mut self) -> Result<QueryAst, ParseError> {
        let mut negations = 0usize;
        while let Some((Lexeme::Not, position)) = self.peek() {
            self.bump();
            negations += 1;
            if self.operand_missing() {
                return Err(ParseError::DanglingOperator { position });
            }
        }
        let primary = self.primary()?;
        Ok((0..negations).fold(primary, |ast, _| ast.negate()))
    }

    fn primary(&mut self) -> Result<QueryAst, ParseError> {
        match self.bump() {
            Some((Lexeme::Word(tokens), _)) => Ok(from_tokens(tokens)),
            Some((Lexeme::Quoted(tokens), position)) => {
                if tokens.is_empty() {
                    Err(ParseError::EmptyGroup { position })
                } else {
                    Ok(from_tokens(tokens))
                }
            }
            Some((Lexeme::Open, position)) => {
                match self.peek() {
                    Some((Lexeme::Close, _)) => return Err(ParseError::EmptyGroup { position }),
                    None => return Err(ParseError::UnbalancedParenthesis { position }),
                    _ => {}
                }
                let inner = self.or()?;
                match self.bump() {
                    Some((Lexeme::Close, _)) => Ok(inner),
                    _ => Err(ParseError::UnbalancedParenthesis { position }),
                }
            }
            Some((Lexeme::Close, position)) => Err(ParseError::UnbalancedParenthesis { position }),
            Some((_, position)) => Err(ParseError::DanglingOperator { position }),
            None => Err(ParseError::EmptyQuery),
        }
    }
}

fn from_tokens(mut tokens: Vec<String>) -> QueryAst {
    if tokens.len() == 1 {
        QueryAst::Term(tokens.remove(0))
    } else {
        QueryAst::Phrase(tokens)
    }
}

fn collapse(mut children: Vec<QueryAst>, make: fn(Vec<QueryAst>) -> QueryAst) -> QueryAst {
    if children.len() == 1 {
        children.remove(0)
    } else {
        make(children)
    }
}

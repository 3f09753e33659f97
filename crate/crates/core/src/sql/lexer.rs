use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::corpus::DatabaseSchema;

static RESERVED: LazyLock<HashSet<&'static str>> =
    LazyLock::new(|| word_list(include_str!("../../resources/sql_keywords.txt")));
static FUNCTIONS: LazyLock<HashSet<&'static str>> =
    LazyLock::new(|| word_list(include_str!("../../resources/sql_functions.txt")));

fn word_list(text: &'static str) -> HashSet<&'static str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

pub fn is_reserved(word: &str) -> bool {
    RESERVED.contains(word)
}

pub fn is_function_name(word: &str) -> bool {
    FUNCTIONS.contains(word)
}

/// Every token that may appear as a keyword in a [`TokenBag`].
pub fn keyword_list() -> impl Iterator<Item = &'static str> {
    RESERVED.iter().chain(FUNCTIONS.iter()).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Keyword,
    SchemaRef,
    LiteralNumber,
    LiteralString,
    Operator,
    Punctuation,
    IdentifierUnknown,
}

#[derive(Debug, Clone, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// Byte offset of the token in the source text.
    pub offset: usize,
    /// Byte length of the token in the source text.
    pub len: usize,
}

impl PartialEq for Token {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text && self.kind == other.kind
    }
}

impl Token {
    fn new(text: String, kind: TokenKind, offset: usize, len: usize) -> Self {
        Token {
            text,
            kind,
            offset,
            len,
        }
    }

    pub fn is(&self, text: &str) -> bool {
        self.text == text
    }

    /// Identifier text with any quoting removed.
    pub fn name(&self) -> &str {
        let t = self.text.as_str();
        if t.len() >= 2
            && ((t.starts_with('`') && t.ends_with('`')) || (t.starts_with('[') && t.ends_with(']')))
        {
            &t[1..t.len() - 1]
        } else {
            t
        }
    }

    pub fn is_literal(&self) -> bool {
        matches!(self.kind, TokenKind::LiteralNumber | TokenKind::LiteralString)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LexError {
    #[error("empty SQL")]
    Empty,
    #[error("unterminated string literal at byte {offset}")]
    UnterminatedString { offset: usize },
    #[error("unterminated quoted identifier at byte {offset}")]
    UnterminatedIdentifier { offset: usize },
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '#'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$' || c == '#'
}

const TWO_CHAR_OPS: [&str; 8] = ["<>", "!=", "<=", ">=", "==", "||", "<<", ">>"];

/// Maximal-munch lexer. Keywords are marked from the reserved-word list;
/// every other word is left as `IdentifierUnknown` for [`classify`]. Trailing
/// semicolons are dropped and comments are skipped.
pub fn tokenize(sql: &str) -> Result<Vec<Token>, LexError> {
    let bytes = sql.as_bytes();
    let mut tokens: Vec<Token> = Vec::new();
    let mut i = 0;
    while i < sql.len() {
        let c = sql[i..].chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if sql[i..].starts_with("--") {
            i = sql[i..].find('\n').map_or(sql.len(), |p| i + p + 1);
            continue;
        }
        if sql[i..].starts_with("/*") {
            i = sql[i + 2..].find("*/").map_or(sql.len(), |p| i + 2 + p + 2);
            continue;
        }
        let start = i;
        match c {
            '\'' | '"' => {
                let end = scan_quoted(bytes, i, c as u8)
                    .ok_or(LexError::UnterminatedString { offset: start })?;
                tokens.push(Token::new(
                    sql[start..end].to_string(),
                    TokenKind::LiteralString,
                    start,
                    end - start,
                ));
                i = end;
            }
            '`' | '[' => {
                let close = if c == '`' { '`' } else { ']' };
                let end = sql[i + 1..]
                    .find(close)
                    .map(|p| i + 1 + p + 1)
                    .ok_or(LexError::UnterminatedIdentifier { offset: start })?;
                tokens.push(Token::new(
                    sql[start..end].to_lowercase(),
                    TokenKind::IdentifierUnknown,
                    start,
                    end - start,
                ));
                i = end;
            }
            _ if c.is_ascii_digit() || (c == '.' && starts_number_after_dot(sql, i, &tokens)) => {
                let end = scan_number(bytes, i);
                tokens.push(Token::new(
                    sql[start..end].to_lowercase(),
                    TokenKind::LiteralNumber,
                    start,
                    end - start,
                ));
                i = end;
            }
            _ if is_ident_start(c) => {
                let mut end = i;
                for ch in sql[i..].chars() {
                    if is_ident_continue(ch) {
                        end += ch.len_utf8();
                    } else {
                        break;
                    }
                }
                let word = sql[start..end].to_lowercase();
                let kind = if is_reserved(&word) {
                    TokenKind::Keyword
                } else {
                    TokenKind::IdentifierUnknown
                };
                tokens.push(Token::new(word, kind, start, end - start));
                i = end;
            }
            '(' | ')' | ',' | '.' | ';' => {
                tokens.push(Token::new(c.to_string(), TokenKind::Punctuation, start, 1));
                i += 1;
            }
            _ => {
                let two = sql.get(i..i + 2).filter(|s| TWO_CHAR_OPS.contains(s));
                let text = two.map_or_else(|| c.to_string(), str::to_string);
                let len = text.len();
                tokens.push(Token::new(text, TokenKind::Operator, start, len));
                i += len;
            }
        }
    }
    while tokens.last().is_some_and(|t| t.is(";")) {
        tokens.pop();
    }
    if tokens.is_empty() {
        return Err(LexError::Empty);
    }
    Ok(tokens)
}

fn starts_number_after_dot(sql: &str, i: usize, tokens: &[Token]) -> bool {
    let next_is_digit = sql.as_bytes().get(i + 1).is_some_and(u8::is_ascii_digit);
    // `t1.5` style qualifiers keep the dot as punctuation.
    let after_operand = tokens.last().is_some_and(|t| {
        t.offset + t.len == i
            && (matches!(t.kind, TokenKind::IdentifierUnknown | TokenKind::Keyword) || t.is(")"))
    });
    next_is_digit && !after_operand
}

fn scan_quoted(bytes: &[u8], start: usize, quote: u8) -> Option<usize> {
    let mut j = start + 1;
    while j < bytes.len() {
        if bytes[j] == quote {
            if bytes.get(j + 1) == Some(&quote) {
                j += 2;
                continue;
            }
            return Some(j + 1);
        }
        j += 1;
    }
    None
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut j = start;
    while j < bytes.len() && bytes[j].is_ascii_digit() {
        j += 1;
    }
    if j < bytes.len() && bytes[j] == b'.' {
        j += 1;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
    }
    if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
        let mut k = j + 1;
        if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
            k += 1;
        }
        if k < bytes.len() && bytes[k].is_ascii_digit() {
            while k < bytes.len() && bytes[k].is_ascii_digit() {
                k += 1;
            }
            j = k;
        }
    }
    j
}

/// Joins token texts with single spaces.
pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical display form: lowercase outside string literals, whitespace
/// runs collapsed to one space, no trailing `;`.
pub fn normalize(sql: &str) -> Result<String, LexError> {
    let tokens = tokenize(sql)?;
    let mut out = String::with_capacity(sql.len());
    let mut prev_end: Option<usize> = None;
    for t in &tokens {
        if let Some(end) = prev_end {
            if t.offset > end {
                out.push(' ');
            }
        }
        out.push_str(&t.text);
        prev_end = Some(t.offset + t.len);
    }
    Ok(out)
}

/// Lowercased table and column names of one schema.
#[derive(Debug, Clone, Default)]
pub struct SchemaVocab {
    tables: HashSet<String>,
    columns: HashSet<String>,
}

impl SchemaVocab {
    pub fn new(schema: &DatabaseSchema) -> Self {
        let mut vocab = SchemaVocab::default();
        for table in &schema.tables {
            vocab.tables.insert(table.name.to_lowercase());
            for col in &table.columns {
                vocab.columns.insert(col.name.to_lowercase());
            }
        }
        vocab
    }

    pub fn is_table(&self, name: &str) -> bool {
        self.tables.contains(name)
    }

    pub fn is_column(&self, name: &str) -> bool {
        self.columns.contains(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.is_table(name) || self.is_column(name)
    }
}

/// Resolves unknown identifiers against the schema. A function name directly
/// followed by `(` is a keyword; otherwise schema names win over function
/// names. Aliases and other unknown words stay `IdentifierUnknown`.
pub fn classify(mut tokens: Vec<Token>, vocab: &SchemaVocab) -> Vec<Token> {
    for i in 0..tokens.len() {
        if tokens[i].kind != TokenKind::IdentifierUnknown {
            continue;
        }
        let name = tokens[i].name().to_string();
        let called = tokens.get(i + 1).is_some_and(|n| n.is("("));
        tokens[i].kind = if called && is_function_name(&name) {
            TokenKind::Keyword
        } else if vocab.contains(&name) {
            TokenKind::SchemaRef
        } else if is_function_name(&name) {
            TokenKind::Keyword
        } else {
            TokenKind::IdentifierUnknown
        };
        if tokens[i].kind == TokenKind::SchemaRef {
            tokens[i].text = name;
        }
    }
    tokens
}

pub fn tokenize_classified(sql: &str, vocab: &SchemaVocab) -> Result<Vec<Token>, LexError> {
    Ok(classify(tokenize(sql)?, vocab))
}

/// Multiset of keyword and schema tokens; the BM25 document unit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBag {
    counts: BTreeMap<String, u32>,
}

impl TokenBag {
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut bag = TokenBag::default();
        for (k, n) in counts {
            if n > 0 {
                *bag.counts.entry(k.into().to_lowercase()).or_insert(0) += n;
            }
        }
        bag
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a Token>) -> Self {
        let mut bag = TokenBag::default();
        for t in tokens {
            if matches!(t.kind, TokenKind::Keyword | TokenKind::SchemaRef) {
                *bag.counts.entry(t.text.clone()).or_insert(0) += 1;
            }
        }
        bag
    }

    pub fn count(&self, token: &str) -> u32 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Document length: total number of tokens.
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

impl fmt::Display for TokenBag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}:{v}")?;
        }
        f.write_str("}")
    }
}

pub fn token_bag(sql: &str, schema: &DatabaseSchema) -> Result<TokenBag, LexError> {
    token_bag_with(sql, &SchemaVocab::new(schema))
}

pub fn token_bag_with(sql: &str, vocab: &SchemaVocab) -> Result<TokenBag, LexError> {
    Ok(TokenBag::from_tokens(&tokenize_classified(sql, vocab)?))
}

/// True when the outermost query carries an `ORDER BY`.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let Ok(tokens) = tokenize(sql) else {
        return false;
    };
    let mut depth = 0i32;
    tokens.windows(2).any(|w| {
        match w[0].text.as_str() {
            "(" => depth += 1,
            ")" => depth -= 1,
            _ => {}
        }
        depth == 0 && w[0].is("order") && w[1].is("by")
    })
}

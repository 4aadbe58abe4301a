//! Parser for the `KG.search(Start=<entity>, Path=[<rel>, ...])` expressions
//! that the extraction model is asked to emit.
//!
//! Every non-overlapping expression in the output is collected in order of
//! appearance. Surrounding prose is ignored, and a malformed or truncated
//! expression is skipped rather than failing the whole response.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::RelationPath;

const MARKER: &str = "KG.search(";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSearches {
    pub searches: Vec<RelationPath>,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("format error: {reason}")]
pub struct FormatError {
    pub raw_text: String,
    pub reason: String,
}

pub type ParseOutcome = Result<ParsedSearches, FormatError>;

pub fn parse_kg_search(text: &str) -> ParseOutcome {
    let mut searches = Vec::new();
    let mut malformed = 0usize;
    let mut pos = 0;
    while let Some(found) = text[pos..].find(MARKER) {
        let body = pos + found + MARKER.len();
        match Cursor::new(text, body).expression() {
            Some((path, end)) => {
                searches.push(path);
                pos = end;
            }
            None => {
                malformed += 1;
                pos = body;
            }
        }
    }
    if searches.is_empty() {
        let reason = if malformed == 0 {
            "no KG.search expression found".to_string()
        } else {
            format!("{malformed} malformed KG.search expression(s), none parseable")
        };
        return Err(FormatError {
            raw_text: text.to_string(),
            reason,
        });
    }
    Ok(ParsedSearches {
        searches,
        raw_text: text.to_string(),
    })
}

/// Canonical DSL text; [`parse_kg_search`] inverts it.
pub fn render_search(path: &RelationPath) -> String {
    let relations: Vec<String> = path.relations.iter().map(|r| render_token(r)).collect();
    format!(
        "KG.search(Start={}, Path=[{}])",
        render_token(&path.start),
        relations.join(", ")
    )
}

/// Wrapper giving `RelationPath` its DSL rendering through `Display`.
pub struct Dsl<'a>(pub &'a RelationPath);

impl fmt::Display for Dsl<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_search(self.0))
    }
}

fn is_bare_safe(token: &str) -> bool {
    !token.is_empty()
        && token.trim() == token
        && !token.starts_with(['\'', '"'])
        && !token.contains(|c: char| is_delimiter(c) || c == '\\' || c.is_whitespace())
}

fn render_token(token: &str) -> String {
    if is_bare_safe(token) {
        return token.to_string();
    }
    let mut out = String::from("\"");
    for c in token.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn is_delimiter(c: char) -> bool {
    matches!(c, ',' | '[' | ']' | '(' | ')' | '=' | '\n' | '\r')
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, pos: usize) -> Self {
        Self { text, pos }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn expect_char(&mut self, c: char) -> Option<()> {
        self.skip_ws();
        self.rest().starts_with(c).then(|| self.pos += c.len_utf8())
    }

    fn expect_keyword(&mut self, kw: &str) -> Option<()> {
        self.skip_ws();
        let rest = self.rest();
        let head = rest.get(..kw.len())?;
        head.eq_ignore_ascii_case(kw).then(|| self.pos += kw.len())
    }

    fn token(&mut self) -> Option<String> {
        self.skip_ws();
        let rest = self.rest();
        let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"');
        if let Some(q) = quote {
            let mut out = String::new();
            let mut chars = rest[1..].char_indices();
            while let Some((i, c)) = chars.next() {
                if c == '\\' {
                    let (_, escaped) = chars.next()?;
                    out.push(escaped);
                } else if c == q {
                    self.pos += 1 + i + 1;
                    return (!out.is_empty()).then_some(out);
                } else {
                    out.push(c);
                }
            }
            None
        } else {
            let end = rest.find(is_delimiter).unwrap_or(rest.len());
            let token = rest[..end].trim();
            self.pos += end;
            (!token.is_empty()).then(|| token.to_string())
        }
    }

    /// Parses the remainder of one expression after `KG.search(`, returning
    /// the path and the byte offset just past the closing parenthesis.
    fn expression(mut self) -> Option<(RelationPath, usize)> {
        self.expect_keyword("start")?;
        self.expect_char('=')?;
        let start = self.token()?;
        self.expect_char(',')?;
        self.expect_keyword("path")?;
        self.expect_char('=')?;
        self.expect_char('[')?;
        let mut relations = vec![self.token()?];
        loop {
            self.skip_ws();
            if self.expect_char(',').is_some() {
                relations.push(self.token()?);
            } else {
                break;
            }
        }
        self.expect_char(']')?;
        self.expect_char(')')?;
        let path = RelationPath::new(start, relations).ok()?;
        Some((path, self.pos))
    }
}

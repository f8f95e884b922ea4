//! Recursive-descent validator for the supported query subset: SELECT and
//! ASK forms over basic graph patterns, FILTER, OPTIONAL, UNION, ORDER BY,
//! LIMIT, OFFSET, and COUNT projections. Anything outside the subset is
//! reported, not guessed at.

use super::lexer::{Lexed, Tok};
use super::HostAllowlist;

/// Outcome of validating one query against the supported grammar.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub accepted: bool,
    /// Human-readable reason with a byte offset, present iff rejected.
    pub reason: Option<String>,
}

impl ValidationReport {
    fn ok() -> Self {
        ValidationReport { accepted: true, reason: None }
    }

    fn reject(reason: String) -> Self {
        ValidationReport { accepted: false, reason: Some(reason) }
    }
}

pub(crate) struct Parser<'a> {
    toks: &'a [Lexed],
    pos: usize,
    allowlist: &'a HostAllowlist,
}

type PResult = Result<(), (String, usize)>;

impl<'a> Parser<'a> {
    pub(crate) fn new(toks: &'a [Lexed], allowlist: &'a HostAllowlist) -> Self {
        Parser { toks, pos: 0, allowlist }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|l| &l.tok)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|l| l.offset).unwrap_or_else(|| {
            self.toks.last().map(|l| l.offset + 1).unwrap_or(0)
        })
    }

    fn bump(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos).map(|l| &l.tok);
        self.pos += 1;
        t
    }

    fn err(&self, msg: impl Into<String>) -> PResult {
        Err((msg.into(), self.offset()))
    }

    fn is_word(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_word(&mut self, kw: &str) -> bool {
        if self.is_word(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: char) -> PResult {
        match self.peek() {
            Some(Tok::Punct(c)) if *c == p => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected '{p}'")),
        }
    }

    pub(crate) fn query(&mut self) -> PResult {
        if self.eat_word("select") {
            self.select_rest()?;
        } else if self.eat_word("ask") {
            self.eat_word("where");
            self.group()?;
        } else {
            return self.err("expected SELECT or ASK");
        }
        if self.pos != self.toks.len() {
            return self.err("trailing tokens after query");
        }
        Ok(())
    }

    fn select_rest(&mut self) -> PResult {
        self.eat_word("distinct");
        self.projection()?;
        self.eat_word("where");
        self.group()?;
        self.solution_modifiers()
    }

    fn projection(&mut self) -> PResult {
        if matches!(self.peek(), Some(Tok::Punct('*'))) {
            self.pos += 1;
            return Ok(());
        }
        let mut n = 0;
        loop {
            match self.peek() {
                Some(Tok::Var(_)) => {
                    self.pos += 1;
                    n += 1;
                }
                Some(Tok::Word(w)) if w.eq_ignore_ascii_case("count") => {
                    self.pos += 1;
                    self.count_args()?;
                    n += 1;
                }
                _ => break,
            }
        }
        if n == 0 {
            return self.err("projection needs at least one variable or COUNT");
        }
        Ok(())
    }

    /// `( var )` or `( * )`. Aggregates over anything else (expressions,
    /// DISTINCT inside the call) are outside the subset.
    fn count_args(&mut self) -> PResult {
        self.expect_punct('(')?;
        match self.peek() {
            Some(Tok::Var(_)) | Some(Tok::Punct('*')) => {
                self.pos += 1;
            }
            _ => return self.err("COUNT takes a single variable or *"),
        }
        self.expect_punct(')')
    }

    fn group(&mut self) -> PResult {
        self.expect_punct('{')?;
        loop {
            match self.peek() {
                Some(Tok::Punct('}')) => {
                    self.pos += 1;
                    return Ok(());
                }
                None => return self.err("unclosed group pattern"),
                Some(Tok::Word(w)) if w.eq_ignore_ascii_case("filter") => {
                    self.pos += 1;
                    self.constraint()?;
                }
                Some(Tok::Word(w)) if w.eq_ignore_ascii_case("optional") => {
                    self.pos += 1;
                    self.group()?;
                }
                Some(Tok::Punct('{')) => {
                    self.group()?;
                    while self.eat_word("union") {
                        self.group()?;
                    }
                }
                _ => self.triples_same_subject()?,
            }
            // a dot may separate any two group items
            while matches!(self.peek(), Some(Tok::Punct('.'))) {
                self.pos += 1;
            }
        }
    }

    fn triples_same_subject(&mut self) -> PResult {
        self.term()?;
        self.verb()?;
        self.object_list()?;
        while matches!(self.peek(), Some(Tok::Punct(';'))) {
            self.pos += 1;
            // a dangling semicolon before `}` or `.` is accepted
            if matches!(self.peek(), Some(Tok::Punct('}')) | Some(Tok::Punct('.')) | None) {
                break;
            }
            self.verb()?;
            self.object_list()?;
        }
        Ok(())
    }

    fn object_list(&mut self) -> PResult {
        self.term()?;
        while matches!(self.peek(), Some(Tok::Punct(','))) {
            self.pos += 1;
            self.term()?;
        }
        Ok(())
    }

    fn verb(&mut self) -> PResult {
        match self.peek() {
            Some(Tok::Word(w)) if w == "a" => {
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Iri(iri)) => {
                self.check_host(iri)?;
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Var(_)) => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err("expected a predicate (IRI, variable, or 'a')"),
        }
    }

    fn term(&mut self) -> PResult {
        match self.peek() {
            Some(Tok::Iri(iri)) => {
                self.check_host(iri)?;
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Var(_)) | Some(Tok::Literal(_)) | Some(Tok::Number(_)) => {
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Word(w)) if w.eq_ignore_ascii_case("true") || w.eq_ignore_ascii_case("false") => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err("expected a term (IRI, variable, or literal)"),
        }
    }

    /// FILTER body: either a parenthesised expression or a builtin call.
    /// Expressions are checked for token sanity and balanced parentheses
    /// only; full expression typing is out of scope.
    fn constraint(&mut self) -> PResult {
        match self.peek() {
            Some(Tok::Punct('(')) => self.balanced_expr(),
            Some(Tok::Word(_)) => {
                self.pos += 1;
                self.balanced_expr()
            }
            _ => self.err("expected a FILTER constraint"),
        }
    }

    fn balanced_expr(&mut self) -> PResult {
        self.expect_punct('(')?;
        let mut depth = 1usize;
        loop {
            match self.bump() {
                None => return self.err("unclosed parenthesis in FILTER"),
                Some(Tok::Punct('(')) => depth += 1,
                Some(Tok::Punct(')')) => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(());
                    }
                }
                Some(Tok::Punct('{')) | Some(Tok::Punct('}')) => {
                    self.pos -= 1;
                    return self.err("braces are not allowed inside FILTER");
                }
                Some(Tok::Iri(iri)) => {
                    self.pos -= 1;
                    self.check_host(iri)?;
                    self.pos += 1;
                }
                Some(_) => {}
            }
        }
    }

    fn solution_modifiers(&mut self) -> PResult {
        if self.eat_word("order") {
            if !self.eat_word("by") {
                return self.err("ORDER must be followed by BY");
            }
            let mut n = 0;
            loop {
                match self.peek() {
                    Some(Tok::Var(_)) => {
                        self.pos += 1;
                        n += 1;
                    }
                    Some(Tok::Word(w))
                        if w.eq_ignore_ascii_case("asc") || w.eq_ignore_ascii_case("desc") =>
                    {
                        self.pos += 1;
                        self.expect_punct('(')?;
                        match self.peek() {
                            Some(Tok::Var(_)) => self.pos += 1,
                            _ => return self.err("ASC/DESC takes a single variable"),
                        }
                        self.expect_punct(')')?;
                        n += 1;
                    }
                    _ => break,
                }
            }
            if n == 0 {
                return self.err("ORDER BY needs at least one sort condition");
            }
        }
        // LIMIT and OFFSET may come in either order
        let mut seen_limit = false;
        let mut seen_offset = false;
        loop {
            if !seen_limit && self.is_word("limit") {
                self.pos += 1;
                seen_limit = true;
                match self.peek() {
                    Some(Tok::Number(_)) => self.pos += 1,
                    _ => return self.err("LIMIT takes an integer"),
                }
            } else if !seen_offset && self.is_word("offset") {
                self.pos += 1;
                seen_offset = true;
                match self.peek() {
                    Some(Tok::Number(_)) => self.pos += 1,
                    _ => return self.err("OFFSET takes an integer"),
                }
            } else {
                break;
            }
        }
        Ok(())
    }

    fn check_host(&self, iri: &str) -> PResult {
        if let Some(host) = iri_host(iri) {
            if !self.allowlist.allows(host) {
                return Err((format!("IRI host '{host}' is not in the allowlist"), self.offset()));
            }
        }
        Ok(())
    }
}

/// Extracts the authority host from an IRI, if it has one. IRIs without an
/// authority component (`urn:`, `mailto:`) have no host to check.
pub(crate) fn iri_host(iri: &str) -> Option<&str> {
    let rest = iri.split_once("://")?.1;
    let end = rest
        .find(|c| c == '/' || c == '#' || c == '?' || c == ':')
        .unwrap_or(rest.len());
    let host = &rest[..end];
    if host.is_empty() {
        None
    } else {
        Some(host)
    }
}

/// Checks `text` against the supported grammar and, where an allowlist is
/// configured, that every IRI host is covered by it. Cleaning passes
/// (comment stripping, prefix inlining) are assumed to have run already;
/// lexical errors surface as rejections, not panics.
pub fn validate_query(text: &str, allowlist: &HostAllowlist) -> ValidationReport {
    let toks = match super::lexer::lex(text) {
        Ok(t) => t,
        Err(e) => return ValidationReport::reject(format!("lexical error: {e}")),
    };
    if toks.is_empty() {
        return ValidationReport::reject("empty query".to_string());
    }
    let mut p = Parser::new(&toks, allowlist);
    match p.query() {
        Ok(()) => ValidationReport::ok(),
        Err((msg, offset)) => ValidationReport::reject(format!("{msg} at byte {offset}")),
    }
}

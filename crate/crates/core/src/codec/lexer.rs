//! Character-level scanning shared by the cleaning passes and the parser.
//!
//! The scanner has to make one genuinely ambiguous call: whether a `<` opens
//! an IRI reference or is a comparison operator. A `<` immediately followed
//! by a URI scheme (`<http:`) commits to an IRI and must close with `>`.
//! Otherwise we look ahead: a `>` before any whitespace means IRI
//! (`<foo>`), anything else leaves `<` as an ordinary character so
//! `FILTER(?x < 5)` lexes as a comparison.

use super::CodecError;

/// Returns the byte length of the IRI ref starting at `rest` (which begins
/// with `<`), including both angle brackets, or `None` if `<` should be
/// treated as an ordinary character.
///
/// `Err` means the text commits to an IRI (`<scheme:`) that never closes.
pub(crate) fn iri_ref_len(rest: &str, offset: usize) -> Result<Option<usize>, CodecError> {
    debug_assert!(rest.starts_with('<'));
    let body = &rest[1..];
    if has_scheme_prefix(body) {
        // committed: must close before whitespace or end of input
        for (i, c) in body.char_indices() {
            if c == '>' {
                return Ok(Some(i + 2));
            }
            if c.is_whitespace() || c == '<' {
                return Err(CodecError::UnterminatedLiteral { kind: "IRI reference", offset });
            }
        }
        return Err(CodecError::UnterminatedLiteral { kind: "IRI reference", offset });
    }
    // speculative: IRI only if `>` appears before whitespace
    for (i, c) in body.char_indices() {
        if c == '>' {
            return Ok(Some(i + 2));
        }
        if c.is_whitespace() || c == '<' || c == '"' || c == '\'' {
            return Ok(None);
        }
    }
    Ok(None)
}

fn has_scheme_prefix(s: &str) -> bool {
    let mut chars = s.char_indices();
    match chars.next() {
        Some((_, c)) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    for (_, c) in chars {
        match c {
            ':' => return true,
            c if c.is_ascii_alphanumeric() || c == '+' || c == '.' || c == '-' => {}
            _ => return false,
        }
    }
    false
}

/// Returns the byte length of the string literal starting at `rest` (which
/// begins with `'` or `"`), including quotes and any escape sequences.
/// Literals may not span lines.
pub(crate) fn string_literal_len(rest: &str, offset: usize) -> Result<usize, CodecError> {
    let mut chars = rest.char_indices();
    let (_, quote) = chars.next().expect("caller checked first char");
    let mut escaped = false;
    for (i, c) in chars {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' => escaped = true,
            '\n' | '\r' => {
                return Err(CodecError::UnterminatedLiteral { kind: "string literal", offset })
            }
            c if c == quote => return Ok(i + c.len_utf8()),
            _ => {}
        }
    }
    Err(CodecError::UnterminatedLiteral { kind: "string literal", offset })
}

/// Removes `#`-to-end-of-line comments, leaving `#` inside IRI refs and
/// string literals untouched. Line structure is preserved.
pub fn strip_comments(text: &str) -> Result<String, CodecError> {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("i is on a char boundary");
        match c {
            '#' => {
                // drop through end of line, keep the newline itself
                while i < text.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            '<' => match iri_ref_len(rest, i)? {
                Some(len) => {
                    out.push_str(&rest[..len]);
                    i += len;
                }
                None => {
                    out.push('<');
                    i += 1;
                }
            },
            '"' | '\'' => {
                let len = string_literal_len(rest, i)?;
                out.push_str(&rest[..len]);
                i += len;
            }
            _ => {
                out.push(c);
                i += c.len_utf8();
            }
        }
    }
    Ok(out)
}

/// Removes `PREFIX label: <iri>` declarations and expands every `label:Local`
/// occurrence in the body to the full `<...>` form. Later declarations shadow
/// earlier ones with the same label from their point of occurrence onward.
pub fn inline_prefixes(text: &str) -> Result<String, CodecError> {
    let mut map: Vec<(String, String)> = Vec::new();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("i is on a char boundary");
        match c {
            '<' => match iri_ref_len(rest, i)? {
                Some(len) => {
                    out.push_str(&rest[..len]);
                    i += len;
                }
                None => {
                    out.push('<');
                    i += 1;
                }
            },
            '"' | '\'' => {
                let len = string_literal_len(rest, i)?;
                out.push_str(&rest[..len]);
                i += len;
            }
            '?' | '$' => {
                // variable: copy sigil plus name so the name is never
                // mistaken for a prefix label
                out.push(c);
                i += 1;
                while let Some(nc) = text[i..].chars().next() {
                    if nc.is_ascii_alphanumeric() || nc == '_' {
                        out.push(nc);
                        i += nc.len_utf8();
                    } else {
                        break;
                    }
                }
            }
            ':' => {
                // pname with the empty (default) label
                let (local, consumed) = read_local(&text[i + 1..]);
                expand_pname(&map, "", &local, i, &mut out)?;
                i += 1 + consumed;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let word_len = text[i..]
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_' || ch == '-'))
                    .unwrap_or(text.len() - i);
                let word = &text[i..i + word_len];
                let after = &text[i + word_len..];
                if word.eq_ignore_ascii_case("prefix") {
                    let consumed = parse_prefix_decl(after, i, &mut map)?;
                    i += word_len + consumed;
                } else if after.starts_with(':') {
                    let (local, consumed) = read_local(&after[1..]);
                    expand_pname(&map, word, &local, i, &mut out)?;
                    i += word_len + 1 + consumed;
                } else {
                    out.push_str(word);
                    i += word_len;
                }
            }
            _ => {
                out.push(c);
                i += c.len_utf8();
            }
        }
    }
    Ok(out)
}

/// Reads a pname local part. Trailing dots are left in the stream: a dot can
/// legally appear inside a local name but a final dot is a triple terminator.
fn read_local(s: &str) -> (String, usize) {
    let mut len = 0;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' {
            len += c.len_utf8();
        } else {
            break;
        }
    }
    let mut local = &s[..len];
    while local.ends_with('.') {
        local = &local[..local.len() - 1];
        len -= 1;
    }
    (local.to_string(), len)
}

fn expand_pname(
    map: &[(String, String)],
    label: &str,
    local: &str,
    offset: usize,
    out: &mut String,
) -> Result<(), CodecError> {
    // last declaration wins (shadowing)
    let iri = map
        .iter()
        .rev()
        .find(|(l, _)| l == label)
        .map(|(_, iri)| iri.as_str())
        .ok_or_else(|| CodecError::UnknownPrefix { label: label.to_string(), offset })?;
    out.push('<');
    out.push_str(iri);
    out.push_str(local);
    out.push('>');
    Ok(())
}

/// Parses ` label: <iri>` after the PREFIX keyword, returning bytes consumed.
fn parse_prefix_decl(
    s: &str,
    offset: usize,
    map: &mut Vec<(String, String)>,
) -> Result<usize, CodecError> {
    let mut i = 0;
    while let Some(c) = s[i..].chars().next() {
        if c.is_whitespace() {
            i += c.len_utf8();
        } else {
            break;
        }
    }
    let label_start = i;
    while let Some(c) = s[i..].chars().next() {
        if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
            i += c.len_utf8();
        } else {
            break;
        }
    }
    let label = &s[label_start..i];
    if !s[i..].starts_with(':') {
        return Err(CodecError::MalformedPrefix { offset });
    }
    i += 1;
    while let Some(c) = s[i..].chars().next() {
        if c.is_whitespace() {
            i += c.len_utf8();
        } else {
            break;
        }
    }
    if !s[i..].starts_with('<') {
        return Err(CodecError::MalformedPrefix { offset });
    }
    match iri_ref_len(&s[i..], offset + i)? {
        Some(len) => {
            let iri = &s[i + 1..i + len - 1];
            map.push((label.to_string(), iri.to_string()));
            Ok(i + len)
        }
        None => Err(CodecError::MalformedPrefix { offset }),
    }
}

/// A lexical token with its byte offset in the source text.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    /// Bare word: keyword, builtin function name, `a`, `true`, `false`.
    Word(String),
    /// Variable name without its `?`/`$` sigil.
    Var(String),
    /// IRI reference content without the angle brackets.
    Iri(String),
    /// Full literal text including quotes and any `@lang`/`^^type` suffix.
    Literal(String),
    Number(String),
    /// Structural punctuation: `{ } ( ) . ; , *`
    Punct(char),
    /// Operator: `= != < > <= >= ! && || + - / ^^`
    Op(String),
}

#[derive(Debug, Clone)]
pub(crate) struct Lexed {
    pub tok: Tok,
    pub offset: usize,
}

pub(crate) fn lex(text: &str) -> Result<Vec<Lexed>, CodecError> {
    let mut toks = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("i is on a char boundary");
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let offset = i;
        match c {
            '<' => match iri_ref_len(rest, i)? {
                Some(len) => {
                    toks.push(Lexed { tok: Tok::Iri(rest[1..len - 1].to_string()), offset });
                    i += len;
                }
                None => {
                    let op = if rest.starts_with("<=") { "<=" } else { "<" };
                    toks.push(Lexed { tok: Tok::Op(op.to_string()), offset });
                    i += op.len();
                }
            },
            '"' | '\'' => {
                let mut len = string_literal_len(rest, i)?;
                // attach @lang or ^^datatype suffix to the literal token
                if rest[len..].starts_with('@') {
                    len += 1;
                    while let Some(nc) = rest[len..].chars().next() {
                        if nc.is_ascii_alphanumeric() || nc == '-' {
                            len += nc.len_utf8();
                        } else {
                            break;
                        }
                    }
                } else if rest[len..].starts_with("^^") {
                    len += 2;
                    if rest[len..].starts_with('<') {
                        match iri_ref_len(&rest[len..], i + len)? {
                            Some(l) => len += l,
                            None => {
                                return Err(CodecError::UnterminatedLiteral {
                                    kind: "datatype IRI",
                                    offset: i + len,
                                })
                            }
                        }
                    }
                }
                toks.push(Lexed { tok: Tok::Literal(rest[..len].to_string()), offset });
                i += len;
            }
            '?' | '$' => {
                let name_len = rest[1..]
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                    .unwrap_or(rest.len() - 1);
                toks.push(Lexed { tok: Tok::Var(rest[1..1 + name_len].to_string()), offset });
                i += 1 + name_len;
            }
            '{' | '}' | '(' | ')' | '.' | ';' | ',' | '*' => {
                toks.push(Lexed { tok: Tok::Punct(c), offset });
                i += 1;
            }
            '0'..='9' => {
                let mut len = 0;
                let mut seen_dot = false;
                for nc in rest.chars() {
                    match nc {
                        '0'..='9' => len += 1,
                        // a trailing dot is a triple terminator, not a decimal
                        '.' if !seen_dot && rest[len + 1..].starts_with(|d: char| d.is_ascii_digit()) => {
                            seen_dot = true;
                            len += 1;
                        }
                        _ => break,
                    }
                }
                toks.push(Lexed { tok: Tok::Number(rest[..len].to_string()), offset });
                i += len;
            }
            '>' | '=' | '!' | '&' | '|' | '+' | '-' | '/' | '^' => {
                // two-char operators are all ASCII; a multi-byte follower can't form one
                let two = if rest.len() >= 2 && rest.is_char_boundary(2) { &rest[..2] } else { "" };
                let op = match two {
                    ">=" | "!=" | "&&" | "||" | "^^" => two,
                    _ => &rest[..1],
                };
                toks.push(Lexed { tok: Tok::Op(op.to_string()), offset });
                i += op.len();
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let len = rest
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                    .unwrap_or(rest.len());
                toks.push(Lexed { tok: Tok::Word(rest[..len].to_string()), offset });
                i += len;
            }
            _ => {
                return Err(CodecError::EncodingUnsupported {
                    reason: format!("unexpected character '{c}'"),
                    offset: i,
                })
            }
        }
    }
    Ok(toks)
}

//! Rewrite between executable SPARQL text and the whitespace-separated
//! token form the models consume. The rewrite is a surface transform over
//! the lexed token stream, so a decimal point and a triple terminator can
//! never be confused, and it is reversible: `decode` restores an executable
//! query and `encode(decode(q)) == q`.

use super::lexer::{Lexed, Tok};
use super::parser::Parser;
use super::{CodecError, EncodedQuery, HostAllowlist, NamespaceTable};

const KEYWORDS: &[&str] = &[
    "select", "distinct", "where", "ask", "filter", "optional", "union", "order", "by", "limit",
    "offset",
];

/// Rewrites a cleaned query into its token form:
/// keywords lowercased, `?name` to `var_name`, `{` `}` to `brack_open`
/// `brack_close`, triple separators `.` `;` to `sep_dot` `sep_semi`,
/// namespaced IRIs to `<tag_Local>`, aggregate calls fused into one token,
/// and string literals split on internal whitespace.
///
/// The query must already be comment-free and prefix-free and fall inside
/// the supported grammar; anything else is `EncodingUnsupported`.
pub fn encode(text: &str, ns: &NamespaceTable) -> Result<EncodedQuery, CodecError> {
    let toks = super::lexer::lex(text)?;
    let no_filter = HostAllowlist::allow_all();
    let mut parser = Parser::new(&toks, &no_filter);
    if let Err((reason, offset)) = parser.query() {
        return Err(CodecError::EncodingUnsupported { reason, offset });
    }
    let mut out: Vec<String> = Vec::with_capacity(toks.len());
    let mut i = 0;
    while i < toks.len() {
        let Lexed { tok, offset } = &toks[i];
        match tok {
            Tok::Word(w) => {
                let lower = w.to_ascii_lowercase();
                if matches!(lower.as_str(), "count" | "asc" | "desc")
                    && matches!(toks.get(i + 1).map(|l| &l.tok), Some(Tok::Punct('(')))
                {
                    // the parser guarantees the shape: '(' then var or '*' then ')'
                    let inner = match &toks[i + 2].tok {
                        Tok::Var(name) => format!("var_{name}"),
                        Tok::Punct('*') => "*".to_string(),
                        _ => {
                            return Err(CodecError::EncodingUnsupported {
                                reason: format!("{lower} argument"),
                                offset: *offset,
                            })
                        }
                    };
                    out.push(format!("{lower}({inner})"));
                    i += 4;
                    continue;
                }
                out.push(lower);
            }
            Tok::Var(name) => out.push(format!("var_{name}")),
            Tok::Iri(iri) => out.push(match ns.match_iri(iri) {
                Some((tag, local)) => format!("<{tag}_{local}>"),
                None => format!("<{iri}>"),
            }),
            Tok::Literal(text) => out.extend(text.split_whitespace().map(str::to_string)),
            Tok::Number(n) => out.push(n.clone()),
            Tok::Punct('{') => out.push("brack_open".to_string()),
            Tok::Punct('}') => out.push("brack_close".to_string()),
            Tok::Punct('.') => out.push("sep_dot".to_string()),
            Tok::Punct(';') => out.push("sep_semi".to_string()),
            Tok::Punct(c) => out.push(c.to_string()),
            Tok::Op(op) => out.push(op.clone()),
        }
        i += 1;
    }
    Ok(EncodedQuery { tokens: out })
}

/// Inverts `encode`, producing an executable query with keywords uppercase
/// and tokens joined by single spaces. Namespace tags expand through the
/// same table used to encode; a tag the table does not know is an error, as
/// is any token matching no decoding rule.
pub fn decode(encoded: &EncodedQuery, ns: &NamespaceTable) -> Result<String, CodecError> {
    check_bracket_balance(&encoded.tokens)?;
    let mut pieces: Vec<String> = Vec::with_capacity(encoded.tokens.len());
    let mut literal: Option<(char, String)> = None;
    for tok in &encoded.tokens {
        if let Some((quote, buf)) = literal.as_mut() {
            buf.push(' ');
            buf.push_str(tok);
            if closes_literal(tok, *quote, false) {
                pieces.push(literal.take().expect("literal is open").1);
            }
            continue;
        }
        if let Some(stripped) = tok.strip_prefix('"').or_else(|| tok.strip_prefix('\'')) {
            let quote = tok.chars().next().expect("token starts with a quote");
            if closes_literal(stripped, quote, true) {
                pieces.push(tok.clone());
            } else {
                literal = Some((quote, tok.clone()));
            }
            continue;
        }
        pieces.push(decode_token(tok, ns)?);
    }
    if let Some((_, buf)) = literal {
        return Err(CodecError::MalformedToken { token: buf });
    }
    Ok(pieces.join(" "))
}

fn check_bracket_balance(tokens: &[String]) -> Result<(), CodecError> {
    let mut depth = 0i64;
    for t in tokens {
        match t.as_str() {
            "brack_open" => depth += 1,
            "brack_close" => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(CodecError::UnbalancedBrackets);
        }
    }
    if depth != 0 {
        return Err(CodecError::UnbalancedBrackets);
    }
    Ok(())
}

/// True if `piece` contains an unescaped `quote`. When the piece opened the
/// literal its leading quote has already been stripped by the caller.
fn closes_literal(piece: &str, quote: char, _opening: bool) -> bool {
    let mut escaped = false;
    for c in piece.chars() {
        if escaped {
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == quote {
            return true;
        }
    }
    false
}

fn decode_token(tok: &str, ns: &NamespaceTable) -> Result<String, CodecError> {
    match tok {
        "brack_open" => return Ok("{".to_string()),
        "brack_close" => return Ok("}".to_string()),
        "sep_dot" => return Ok(".".to_string()),
        "sep_semi" => return Ok(";".to_string()),
        _ => {}
    }
    if KEYWORDS.contains(&tok) {
        return Ok(tok.to_ascii_uppercase());
    }
    if let Some(name) = tok.strip_prefix("var_") {
        if is_word(name) {
            return Ok(format!("?{name}"));
        }
        return Err(CodecError::MalformedToken { token: tok.to_string() });
    }
    for agg in ["count", "asc", "desc"] {
        if let Some(rest) = tok.strip_prefix(agg) {
            if let Some(inner) = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
                let arg = if inner == "*" {
                    "*".to_string()
                } else if let Some(name) = inner.strip_prefix("var_").filter(|n| is_word(n)) {
                    format!("?{name}")
                } else {
                    return Err(CodecError::MalformedToken { token: tok.to_string() });
                };
                return Ok(format!("{}({arg})", agg.to_ascii_uppercase()));
            }
        }
    }
    if let Some(inner) = tok.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
        if inner.contains(':') {
            return Ok(format!("<{inner}>"));
        }
        if let Some((tag, local)) = inner.split_once('_') {
            if let Some(prefix) = ns.expand(tag) {
                return Ok(format!("<{prefix}{local}>"));
            }
        }
        return Err(CodecError::MalformedToken { token: tok.to_string() });
    }
    if !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit() || c == '.') && tok != "." {
        return Ok(tok.to_string());
    }
    if matches!(
        tok,
        "(" | ")" | "," | "*" | "=" | "!=" | "<" | ">" | "<=" | ">=" | "!" | "&&" | "||" | "+"
            | "-" | "/" | "^^"
    ) {
        return Ok(tok.to_string());
    }
    if !tok.is_empty() && tok.chars().next().expect("non-empty").is_ascii_alphabetic() && is_word(tok) {
        // builtin function names, `a`, booleans
        return Ok(tok.to_string());
    }
    Err(CodecError::MalformedToken { token: tok.to_string() })
}

fn is_word(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ns() -> NamespaceTable {
        NamespaceTable::with_defaults()
    }

    fn enc(text: &str) -> Vec<String> {
        encode(text, &ns()).unwrap().tokens
    }

    #[test]
    fn encodes_the_spouse_query() {
        let q = "SELECT DISTINCT ?uri WHERE { <http://dbpedia.org/resource/Tom_Hanks> <http://dbpedia.org/ontology/spouse> ?uri }";
        assert_eq!(
            enc(q).join(" "),
            "select distinct var_uri where brack_open <dbr_Tom_Hanks> <dbo_spouse> var_uri brack_close"
        );
    }

    #[test]
    fn encodes_a_count_query() {
        let q = "SELECT DISTINCT COUNT(?uri) WHERE { ?uri <http://dbpedia.org/ontology/team> <http://dbpedia.org/resource/Dallas_Cowboys> }";
        assert_eq!(
            enc(q).join(" "),
            "select distinct count(var_uri) where brack_open var_uri <dbo_team> <dbr_Dallas_Cowboys> brack_close"
        );
    }

    #[test]
    fn encodes_separators_and_modifiers() {
        let q = "SELECT ?u WHERE { ?u a ?c ; ?p ?o . ?o ?q 5 } ORDER BY DESC(?u) LIMIT 10";
        assert_eq!(
            enc(q).join(" "),
            "select var_u where brack_open var_u a var_c sep_semi var_p var_o sep_dot var_o var_q 5 brack_close order by desc(var_u) limit 10"
        );
    }

    #[test]
    fn unknown_namespace_passes_through_verbatim() {
        let q = "SELECT ?u WHERE { ?u ?p <http://example.org/thing> }";
        assert!(enc(q).contains(&"<http://example.org/thing>".to_string()));
    }

    #[test]
    fn splits_literals_on_whitespace() {
        let q = "SELECT ?u WHERE { ?u ?p \"Tom  Hanks\"@en }";
        let tokens = enc(q);
        assert!(tokens.contains(&"\"Tom".to_string()));
        assert!(tokens.contains(&"Hanks\"@en".to_string()));
    }

    #[test]
    fn rejects_out_of_subset_queries() {
        let err = encode("DESCRIBE <http://e.org/x>", &ns()).unwrap_err();
        assert!(matches!(err, CodecError::EncodingUnsupported { .. }));
    }

    #[test]
    fn decode_restores_the_spouse_query() {
        let encoded = encode(
            "SELECT DISTINCT ?uri WHERE { <http://dbpedia.org/resource/Tom_Hanks> <http://dbpedia.org/ontology/spouse> ?uri }",
            &ns(),
        )
        .unwrap();
        assert_eq!(
            decode(&encoded, &ns()).unwrap(),
            "SELECT DISTINCT ?uri WHERE { <http://dbpedia.org/resource/Tom_Hanks> <http://dbpedia.org/ontology/spouse> ?uri }"
        );
    }

    #[test]
    fn decode_rejoins_split_literals() {
        let encoded = encode("SELECT ?u WHERE { ?u ?p \"Tom Hanks\"@en }", &ns()).unwrap();
        let text = decode(&encoded, &ns()).unwrap();
        assert!(text.contains("\"Tom Hanks\"@en"));
    }

    #[test]
    fn decode_rejects_unknown_tags_and_garbage() {
        let ns = ns();
        let bad_tag = EncodedQuery { tokens: vec!["<zz_Thing>".to_string()] };
        assert!(matches!(decode(&bad_tag, &ns), Err(CodecError::MalformedToken { .. })));
        let garbage = EncodedQuery { tokens: vec!["]]".to_string()] };
        assert!(matches!(decode(&garbage, &ns), Err(CodecError::MalformedToken { .. })));
        let bare_var = EncodedQuery { tokens: vec!["var_".to_string()] };
        assert!(matches!(decode(&bare_var, &ns), Err(CodecError::MalformedToken { .. })));
    }

    #[test]
    fn decode_rejects_unbalanced_brackets() {
        let ns = ns();
        for toks in [
            vec!["brack_open".to_string()],
            vec!["brack_close".to_string(), "brack_open".to_string()],
        ] {
            let q = EncodedQuery { tokens: toks };
            assert!(matches!(decode(&q, &ns), Err(CodecError::UnbalancedBrackets)));
        }
    }

    #[test]
    fn encode_decode_encode_is_a_fixpoint() {
        let ns = ns();
        for q in [
            "SELECT DISTINCT ?uri WHERE { <http://dbpedia.org/resource/Tom_Hanks> <http://dbpedia.org/ontology/spouse> ?uri }",
            "SELECT COUNT(?u) WHERE { ?u a <http://dbpedia.org/ontology/City> . ?u ?p \"New York\"@en } LIMIT 3",
            "ASK WHERE { { ?u ?p ?o } UNION { ?o ?p ?u } FILTER ( ?u != ?o ) }",
        ] {
            let once = encode(q, &ns).unwrap();
            let text = decode(&once, &ns).unwrap();
            let twice = encode(&text, &ns).unwrap();
            assert_eq!(once, twice, "fixpoint failed for {q}");
        }
    }
}

//! Cleaning and tokenizable encoding of SPARQL query logs.
//!
//! Raw log entries pass through comment stripping, prefix inlining, and
//! grammar validation before being rewritten into a whitespace-separated
//! token form ([`encode`]) that downstream tokenization treats as ordinary
//! words. [`decode`] restores executable SPARQL from that form.

mod encode;
mod lexer;
mod parser;

pub use encode::{decode, encode};
pub use lexer::{inline_prefixes, strip_comments};
pub use parser::{validate_query, ValidationReport};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("unterminated {kind} at byte {offset}")]
    UnterminatedLiteral { kind: &'static str, offset: usize },
    #[error("undeclared prefix '{label}:' at byte {offset}")]
    UnknownPrefix { label: String, offset: usize },
    #[error("malformed prefix declaration at byte {offset}")]
    MalformedPrefix { offset: usize },
    #[error("unsupported construct at byte {offset}: {reason}")]
    EncodingUnsupported { reason: String, offset: usize },
    #[error("token '{token}' matches no decoding rule")]
    MalformedToken { token: String },
    #[error("bracket tokens do not balance")]
    UnbalancedBrackets,
    #[error("invalid namespace table: {0}")]
    InvalidNamespaceTable(String),
}

/// One entry from a query log, before any cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQuery {
    pub text: String,
    /// Provenance label carried through cleaning for error reporting.
    pub source_id: Option<String>,
}

impl RawQuery {
    pub fn new(text: impl Into<String>) -> Self {
        RawQuery { text: text.into(), source_id: None }
    }

    pub fn with_source(text: impl Into<String>, source_id: impl Into<String>) -> Self {
        RawQuery { text: text.into(), source_id: Some(source_id.into()) }
    }
}

/// A query in token form. Tokens never contain whitespace; joining them
/// with single spaces is the canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedQuery {
    pub tokens: Vec<String>,
}

impl EncodedQuery {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Stable content digest used for exact deduplication.
    pub fn digest(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        let full = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&full[..16]);
        out
    }
}

/// Maps long IRI prefixes to short tags so encoded queries stay compact.
/// Matching is longest-prefix-wins; tags are lowercase alphanumerics with
/// no underscore, so `<tag_Local>` splits unambiguously at the first `_`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamespaceTable {
    entries: Vec<NamespaceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamespaceEntry {
    pub prefix: String,
    pub tag: String,
    /// Marks namespaces whose local names denote entities rather than
    /// schema terms; fixture generation draws entity names from these.
    #[serde(default)]
    pub entity: bool,
}

impl NamespaceTable {
    pub fn new(entries: Vec<NamespaceEntry>) -> Result<Self, CodecError> {
        let mut tags = HashSet::new();
        let mut prefixes = HashSet::new();
        for e in &entries {
            if e.prefix.is_empty() {
                return Err(CodecError::InvalidNamespaceTable("empty prefix".to_string()));
            }
            let tag_ok = !e.tag.is_empty()
                && e.tag.chars().next().expect("non-empty").is_ascii_lowercase()
                && e.tag.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
            if !tag_ok {
                return Err(CodecError::InvalidNamespaceTable(format!(
                    "tag '{}' must be lowercase alphanumeric with no underscore",
                    e.tag
                )));
            }
            if !tags.insert(e.tag.clone()) {
                return Err(CodecError::InvalidNamespaceTable(format!("duplicate tag '{}'", e.tag)));
            }
            if !prefixes.insert(e.prefix.clone()) {
                return Err(CodecError::InvalidNamespaceTable(format!(
                    "duplicate prefix '{}'",
                    e.prefix
                )));
            }
        }
        Ok(NamespaceTable { entries })
    }

    /// The table used throughout the tests and fixtures: DBpedia resource,
    /// ontology, and property namespaces plus the usual schema vocabularies.
    pub fn with_defaults() -> Self {
        let e = |prefix: &str, tag: &str, entity: bool| NamespaceEntry {
            prefix: prefix.to_string(),
            tag: tag.to_string(),
            entity,
        };
        NamespaceTable::new(vec![
            e("http://dbpedia.org/resource/", "dbr", true),
            e("http://dbpedia.org/ontology/", "dbo", false),
            e("http://dbpedia.org/property/", "dbp", false),
            e("http://www.w3.org/1999/02/22-rdf-syntax-ns#", "rdf", false),
            e("http://www.w3.org/2000/01/rdf-schema#", "rdfs", false),
            e("http://xmlns.com/foaf/0.1/", "foaf", false),
            e("http://www.w3.org/2001/XMLSchema#", "xsd", false),
        ])
        .expect("default table satisfies its own invariants")
    }

    pub fn from_toml(text: &str) -> Result<Self, CodecError> {
        #[derive(Deserialize)]
        struct File {
            namespace: Vec<NamespaceEntry>,
        }
        let file: File = toml::from_str(text)
            .map_err(|e| CodecError::InvalidNamespaceTable(e.to_string()))?;
        NamespaceTable::new(file.namespace)
    }

    /// Longest matching prefix wins; returns the tag and the local remainder.
    pub fn match_iri<'a>(&self, iri: &'a str) -> Option<(&str, &'a str)> {
        self.entries
            .iter()
            .filter(|e| iri.starts_with(&e.prefix))
            .max_by_key(|e| e.prefix.len())
            .map(|e| (e.tag.as_str(), &iri[e.prefix.len()..]))
    }

    pub fn expand(&self, tag: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.tag == tag).map(|e| e.prefix.as_str())
    }

    pub fn entries(&self) -> &[NamespaceEntry] {
        &self.entries
    }

    pub fn entity_tags(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.entity).map(|e| e.tag.as_str())
    }
}

/// Hosts whose IRIs a corpus accepts. An empty list means no filtering.
/// A host is allowed if it equals an entry or is a subdomain of one.
#[derive(Debug, Clone, Default)]
pub struct HostAllowlist {
    hosts: Vec<String>,
}

impl HostAllowlist {
    pub fn allow_all() -> Self {
        HostAllowlist::default()
    }

    pub fn from_hosts<I, S>(hosts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        HostAllowlist { hosts: hosts.into_iter().map(Into::into).collect() }
    }

    pub fn allows(&self, host: &str) -> bool {
        self.hosts.is_empty()
            || self.hosts.iter().any(|h| {
                host == h || (host.len() > h.len() && host.ends_with(h.as_str())
                    && host.as_bytes()[host.len() - h.len() - 1] == b'.')
            })
    }
}

/// What the cleaning pipeline did with one raw query.
#[derive(Debug, Clone)]
pub enum CleanOutcome {
    Encoded(EncodedQuery),
    /// The query was dropped, with the reason (lexical damage, out-of-subset
    /// construct, or a host outside the allowlist).
    Rejected(String),
}

/// Runs the full per-query pipeline: strip comments, inline prefixes,
/// validate, encode. Malformed queries are filtered out, not fatal.
pub fn clean_query(raw: &RawQuery, ns: &NamespaceTable, allowlist: &HostAllowlist) -> CleanOutcome {
    let stripped = match strip_comments(&raw.text) {
        Ok(s) => s,
        Err(e) => return CleanOutcome::Rejected(e.to_string()),
    };
    let inlined = match inline_prefixes(&stripped) {
        Ok(s) => s,
        Err(e) => return CleanOutcome::Rejected(e.to_string()),
    };
    let report = validate_query(&inlined, allowlist);
    if !report.accepted {
        return CleanOutcome::Rejected(report.reason.unwrap_or_else(|| "rejected".to_string()));
    }
    match encode(&inlined, ns) {
        Ok(q) => CleanOutcome::Encoded(q),
        Err(e) => CleanOutcome::Rejected(e.to_string()),
    }
}

/// Drops exact duplicates, keeping first occurrences in order. Identity is
/// the content digest of the token sequence.
pub fn dedupe_corpus<I>(queries: I) -> Vec<EncodedQuery>
where
    I: IntoIterator<Item = EncodedQuery>,
{
    let mut seen = HashSet::new();
    queries.into_iter().filter(|q| seen.insert(q.digest())).collect()
}

//! Assertion extraction and metamorphic oracle rewriting.
//!
//! Assertions are recognized at the token level: an identifier that starts
//! with `assert` (or is exactly `fail`), optionally qualified (`Assert.`),
//! followed by a parenthesized argument list with balanced parentheses.
//! String literals, character literals and comments are skipped while
//! scanning, so parentheses inside them never unbalance the argument scan.
//!
//! Rewriting swaps the call name for its negated partner and leaves every
//! other byte of the test source untouched.

use std::fmt;
use std::io::Write as _;
use std::ops::Range;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Call name classification of an assertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssertionKind {
    #[serde(rename = "assertTrue")]
    True,
    #[serde(rename = "assertFalse")]
    False,
    #[serde(rename = "assertNull")]
    Null,
    #[serde(rename = "assertNotNull")]
    NotNull,
    #[serde(rename = "assertEquals")]
    Equals,
    #[serde(rename = "assertNotEquals")]
    NotEquals,
    #[serde(rename = "assertSame")]
    Same,
    #[serde(rename = "assertNotSame")]
    NotSame,
    #[serde(rename = "other")]
    Other,
}

impl AssertionKind {
    pub const TRANSFORMABLE: [AssertionKind; 8] = [
        AssertionKind::True,
        AssertionKind::False,
        AssertionKind::Null,
        AssertionKind::NotNull,
        AssertionKind::Equals,
        AssertionKind::NotEquals,
        AssertionKind::Same,
        AssertionKind::NotSame,
    ];

    pub fn from_call_name(name: &str) -> Self {
        match name {
            "assertTrue" => AssertionKind::True,
            "assertFalse" => AssertionKind::False,
            "assertNull" => AssertionKind::Null,
            "assertNotNull" => AssertionKind::NotNull,
            "assertEquals" => AssertionKind::Equals,
            "assertNotEquals" => AssertionKind::NotEquals,
            "assertSame" => AssertionKind::Same,
            "assertNotSame" => AssertionKind::NotSame,
            _ => AssertionKind::Other,
        }
    }

    /// Canonical call name; `None` for [`AssertionKind::Other`].
    pub fn call_name(self) -> Option<&'static str> {
        Some(match self {
            AssertionKind::True => "assertTrue",
            AssertionKind::False => "assertFalse",
            AssertionKind::Null => "assertNull",
            AssertionKind::NotNull => "assertNotNull",
            AssertionKind::Equals => "assertEquals",
            AssertionKind::NotEquals => "assertNotEquals",
            AssertionKind::Same => "assertSame",
            AssertionKind::NotSame => "assertNotSame",
            AssertionKind::Other => return None,
        })
    }

    pub fn is_transformable(self) -> bool {
        self != AssertionKind::Other
    }

    /// The rule that rewrites this kind, if any.
    pub fn rule(self) -> Option<TransformRule> {
        Some(match self {
            AssertionKind::True => TransformRule::TrueToFalse,
            AssertionKind::False => TransformRule::FalseToTrue,
            AssertionKind::Null => TransformRule::NullToNotNull,
            AssertionKind::NotNull => TransformRule::NotNullToNull,
            AssertionKind::Equals => TransformRule::EqualsToNotEquals,
            AssertionKind::NotEquals => TransformRule::NotEqualsToEquals,
            AssertionKind::Same => TransformRule::SameToNotSame,
            AssertionKind::NotSame => TransformRule::NotSameToSame,
            AssertionKind::Other => return None,
        })
    }
}

impl fmt::Display for AssertionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.call_name().unwrap_or("other"))
    }
}

/// The eight oracle negation rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformRule {
    #[serde(rename = "MR_T2F")]
    TrueToFalse,
    #[serde(rename = "MR_F2T")]
    FalseToTrue,
    #[serde(rename = "MR_N2NN")]
    NullToNotNull,
    #[serde(rename = "MR_NN2N")]
    NotNullToNull,
    #[serde(rename = "MR_E2NE")]
    EqualsToNotEquals,
    #[serde(rename = "MR_NE2E")]
    NotEqualsToEquals,
    #[serde(rename = "MR_S2NS")]
    SameToNotSame,
    #[serde(rename = "MR_NS2S")]
    NotSameToSame,
}

impl TransformRule {
    pub fn name(self) -> &'static str {
        match self {
            TransformRule::TrueToFalse => "MR_T2F",
            TransformRule::FalseToTrue => "MR_F2T",
            TransformRule::NullToNotNull => "MR_N2NN",
            TransformRule::NotNullToNull => "MR_NN2N",
            TransformRule::EqualsToNotEquals => "MR_E2NE",
            TransformRule::NotEqualsToEquals => "MR_NE2E",
            TransformRule::SameToNotSame => "MR_S2NS",
            TransformRule::NotSameToSame => "MR_NS2S",
        }
    }

    pub fn source_kind(self) -> AssertionKind {
        match self {
            TransformRule::TrueToFalse => AssertionKind::True,
            TransformRule::FalseToTrue => AssertionKind::False,
            TransformRule::NullToNotNull => AssertionKind::Null,
            TransformRule::NotNullToNull => AssertionKind::NotNull,
            TransformRule::EqualsToNotEquals => AssertionKind::Equals,
            TransformRule::NotEqualsToEquals => AssertionKind::NotEquals,
            TransformRule::SameToNotSame => AssertionKind::Same,
            TransformRule::NotSameToSame => AssertionKind::NotSame,
        }
    }

    pub fn target_kind(self) -> AssertionKind {
        match self {
            TransformRule::TrueToFalse => AssertionKind::False,
            TransformRule::FalseToTrue => AssertionKind::True,
            TransformRule::NullToNotNull => AssertionKind::NotNull,
            TransformRule::NotNullToNull => AssertionKind::Null,
            TransformRule::EqualsToNotEquals => AssertionKind::NotEquals,
            TransformRule::NotEqualsToEquals => AssertionKind::Equals,
            TransformRule::SameToNotSame => AssertionKind::NotSame,
            TransformRule::NotSameToSame => AssertionKind::Same,
        }
    }
}

impl fmt::Display for TransformRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One assertion call found in a test source.
///
/// Spans are byte offsets into the enclosing source. `span` covers the whole
/// statement (qualifier, call, arguments and a trailing `;` when present);
/// `name_span` covers only the unqualified call name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionStatement {
    pub kind: AssertionKind,
    pub call_name: String,
    pub argument_text: String,
    pub span: Range<usize>,
    pub name_span: Range<usize>,
    pub statement_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformedTest {
    pub source: String,
    pub original_assertion: AssertionStatement,
    pub transformed_assertion: AssertionStatement,
    pub applied_rule: TransformRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleSelection {
    /// Last transformable assertion in source order.
    #[default]
    Last,
    /// Zero-based index into all extracted assertions, transformable or not.
    Index(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransformError {
    #[error("no transformable assertion (found: {})", format_kinds(.found))]
    NotTransformable { found: Vec<String> },
    #[error("oracle index {index} out of range ({count} assertions found)")]
    IndexOutOfRange { index: usize, count: usize },
}

fn format_kinds(found: &[String]) -> String {
    if found.is_empty() {
        "none".to_string()
    } else {
        found.join(", ")
    }
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_' || b == b'$'
}

fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

fn is_assertion_name(name: &str) -> bool {
    name.starts_with("assert") || name == "fail"
}

/// Skips a string or char literal starting at `start` (which holds the quote).
/// Returns the offset just past the closing quote, or the end of the line for
/// an unterminated literal.
fn skip_quoted(bytes: &[u8], start: usize) -> usize {
    let quote = bytes[start];
    // text blocks: """ ... """
    if quote == b'"' && bytes[start..].starts_with(b"\"\"\"") {
        let mut i = start + 3;
        while i < bytes.len() {
            if bytes[i] == b'\\' {
                i += 2;
                continue;
            }
            if bytes[i..].starts_with(b"\"\"\"") {
                return i + 3;
            }
            i += 1;
        }
        return bytes.len();
    }
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => return i,
            b if b == quote => return i + 1,
            _ => i += 1,
        }
    }
    bytes.len()
}

/// Skips a comment if one starts at `i`.
fn skip_comment(bytes: &[u8], i: usize) -> Option<usize> {
    if bytes[i..].starts_with(b"//") {
        let end = bytes[i..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| i + p);
        Some(end)
    } else if bytes[i..].starts_with(b"/*") {
        let end = bytes[i + 2..]
            .windows(2)
            .position(|w| w == b"*/")
            .map_or(bytes.len(), |p| i + 2 + p + 2);
        Some(end)
    } else {
        None
    }
}

fn skip_ws_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        match (i < bytes.len()).then(|| skip_comment(bytes, i)).flatten() {
            Some(end) => i = end,
            None => return i,
        }
    }
}

/// Finds the `)` matching the `(` at `open`. `None` when unbalanced.
fn matching_paren(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'"' | b'\'' => {
                i = skip_quoted(bytes, i);
                continue;
            }
            b'/' => {
                if let Some(end) = skip_comment(bytes, i) {
                    i = end;
                    continue;
                }
            }
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Walks back over a `a.b.c.` qualifier chain ending right before `name_start`.
fn qualifier_start(bytes: &[u8], name_start: usize) -> usize {
    let mut start = name_start;
    loop {
        let mut j = start;
        while j > 0 && bytes[j - 1].is_ascii_whitespace() {
            j -= 1;
        }
        if j == 0 || bytes[j - 1] != b'.' {
            return start;
        }
        j -= 1;
        while j > 0 && bytes[j - 1].is_ascii_whitespace() {
            j -= 1;
        }
        let end = j;
        while j > 0 && is_ident_continue(bytes[j - 1]) {
            j -= 1;
        }
        if j == end || !is_ident_start(bytes[j]) {
            return start;
        }
        start = j;
    }
}

/// True when the identifier ending right before `start` makes this a
/// declaration (`void assertFoo(`) rather than a call.
fn preceded_by_declaring_word(bytes: &[u8], start: usize) -> bool {
    let mut j = start;
    while j > 0 && bytes[j - 1].is_ascii_whitespace() {
        j -= 1;
    }
    let end = j;
    while j > 0 && is_ident_continue(bytes[j - 1]) {
        j -= 1;
    }
    if j == end {
        // `>` closes a generic return type such as `List<String> assertX(`.
        // `->` (lambda arrow) is not a type.
        return end > 1 && bytes[end - 1] == b'>' && bytes[end - 2] != b'-' && end < start;
    }
    let word = &bytes[j..end];
    !matches!(word, b"return" | b"else" | b"do" | b"throw" | b"case")
}

/// Extracts every assertion call in source order.
pub fn extract_assertions(test_source: &str) -> Vec<AssertionStatement> {
    let bytes = test_source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b == b'"' || b == b'\'' {
            i = skip_quoted(bytes, i);
            continue;
        }
        if b == b'/' {
            if let Some(end) = skip_comment(bytes, i) {
                i = end;
                continue;
            }
        }
        if !is_ident_start(b) || (i > 0 && is_ident_continue(bytes[i - 1])) {
            i += 1;
            continue;
        }
        let name_start = i;
        while i < bytes.len() && is_ident_continue(bytes[i]) {
            i += 1;
        }
        let name_end = i;
        let name = &test_source[name_start..name_end];
        if !is_assertion_name(name) {
            continue;
        }
        let open = skip_ws_and_comments(bytes, name_end);
        if open >= bytes.len() || bytes[open] != b'(' {
            continue;
        }
        let stmt_start = qualifier_start(bytes, name_start);
        if preceded_by_declaring_word(bytes, stmt_start) {
            continue;
        }
        let Some(close) = matching_paren(bytes, open) else {
            // unbalanced: nothing recognizable from here on
            break;
        };
        let mut stmt_end = close + 1;
        let after = skip_ws_and_comments(bytes, stmt_end);
        if after < bytes.len() && bytes[after] == b';' {
            // only absorb the `;` when nothing but whitespace separates it
            if test_source[stmt_end..after].trim().is_empty() {
                stmt_end = after + 1;
            }
        }
        out.push(AssertionStatement {
            kind: AssertionKind::from_call_name(name),
            call_name: name.to_string(),
            argument_text: test_source[open + 1..close].to_string(),
            span: stmt_start..stmt_end,
            name_span: name_start..name_end,
            statement_text: test_source[stmt_start..stmt_end].to_string(),
        });
        i = close + 1;
    }
    out
}

fn not_transformable(assertions: &[AssertionStatement]) -> TransformError {
    TransformError::NotTransformable {
        found: assertions.iter().map(|a| a.call_name.clone()).collect(),
    }
}

/// Picks the oracle under test: the last transformable assertion.
pub fn select_oracle(
    assertions: &[AssertionStatement],
) -> Result<&AssertionStatement, TransformError> {
    assertions
        .iter()
        .rev()
        .find(|a| a.kind.is_transformable())
        .ok_or_else(|| not_transformable(assertions))
}

pub fn select_oracle_with(
    assertions: &[AssertionStatement],
    selection: OracleSelection,
) -> Result<&AssertionStatement, TransformError> {
    match selection {
        OracleSelection::Last => select_oracle(assertions),
        OracleSelection::Index(index) => {
            let a = assertions
                .get(index)
                .ok_or(TransformError::IndexOutOfRange {
                    index,
                    count: assertions.len(),
                })?;
            if a.kind.is_transformable() {
                Ok(a)
            } else {
                Err(TransformError::NotTransformable {
                    found: vec![a.call_name.clone()],
                })
            }
        }
    }
}

/// Negates one assertion by swapping its call name. The returned statement
/// keeps the original start offset; its spans are adjusted for the new name
/// length.
pub fn transform_assertion(
    a: &AssertionStatement,
) -> Result<AssertionStatement, TransformError> {
    let rule = a.kind.rule().ok_or_else(|| TransformError::NotTransformable {
        found: vec![a.call_name.clone()],
    })?;
    let target = rule.target_kind();
    let new_name = target.call_name().expect("rule targets are transformable");

    let rel_start = a.name_span.start - a.span.start;
    let rel_end = a.name_span.end - a.span.start;
    let mut statement_text = String::with_capacity(a.statement_text.len() + 3);
    statement_text.push_str(&a.statement_text[..rel_start]);
    statement_text.push_str(new_name);
    statement_text.push_str(&a.statement_text[rel_end..]);

    let name_span = a.name_span.start..a.name_span.start + new_name.len();
    let span = a.span.start..a.span.start + statement_text.len();
    Ok(AssertionStatement {
        kind: target,
        call_name: new_name.to_string(),
        argument_text: a.argument_text.clone(),
        span,
        name_span,
        statement_text,
    })
}

/// Rewrites the selected oracle of `test_source`.
pub fn transform_source(
    test_source: &str,
    selection: OracleSelection,
) -> Result<TransformedTest, TransformError> {
    let assertions = extract_assertions(test_source);
    let original = select_oracle_with(&assertions, selection)?.clone();
    let transformed = transform_assertion(&original)?;
    let rule = original.kind.rule().expect("selected oracle is transformable");

    let mut source = String::with_capacity(test_source.len() + 3);
    source.push_str(&test_source[..original.name_span.start]);
    source.push_str(&transformed.call_name);
    source.push_str(&test_source[original.name_span.end..]);

    Ok(TransformedTest {
        source,
        original_assertion: original,
        transformed_assertion: transformed,
        applied_rule: rule,
    })
}

/// Rewrites the selected oracle of a subject pair's test.
pub fn transform_test(
    pair: &crate::corpus::SubjectPair,
    selection: OracleSelection,
) -> Result<TransformedTest, TransformError> {
    transform_source(&pair.test_source, selection)
}

/// Result of checking the pass/fail output relation with an external runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationVerdict {
    Holds,
    Violated,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationCheck {
    pub verdict: RelationVerdict,
    pub diagnostic: Option<String>,
}

/// External test runner, invoked as `<program> [args...] <test-file-path>`.
/// The last line of standard output must be `PASS` or `FAIL` and the exit
/// status zero.
#[derive(Debug, Clone)]
pub struct TestRunner {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub file_name: String,
}

impl TestRunner {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        TestRunner {
            program: program.into(),
            args: Vec::new(),
            file_name: "RegressionTest.java".to_string(),
        }
    }

    /// `Ok(true)` on PASS, `Ok(false)` on FAIL, `Err` with a diagnostic
    /// otherwise.
    pub fn execute(&self, test_source: &str) -> Result<bool, String> {
        let dir = tempfile::tempdir().map_err(|e| format!("temp dir: {e}"))?;
        let path = dir.path().join(&self.file_name);
        let mut file = std::fs::File::create(&path).map_err(|e| format!("write test: {e}"))?;
        file.write_all(test_source.as_bytes())
            .map_err(|e| format!("write test: {e}"))?;
        drop(file);

        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&path)
            .output()
            .map_err(|e| format!("spawn {}: {e}", self.program.display()))?;
        let stdout = String::from_utf8_lossy(&output.stdout);
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).map(str::trim);
        if !output.status.success() {
            return Err(format!(
                "runner exited with {} without a pass/fail report",
                output.status
            ));
        }
        match last {
            Some("PASS") => Ok(true),
            Some("FAIL") => Ok(false),
            other => Err(format!(
                "runner printed {:?} instead of PASS or FAIL",
                other.unwrap_or("")
            )),
        }
    }
}

/// Checks that exactly one of the original and transformed tests passes.
pub fn verify_output_relation(
    original: &str,
    transformed: &str,
    runner: Option<&TestRunner>,
) -> RelationCheck {
    let Some(runner) = runner else {
        return RelationCheck {
            verdict: RelationVerdict::Unknown,
            diagnostic: Some("no runner configured".to_string()),
        };
    };
    let outcome = runner
        .execute(original)
        .and_then(|o| runner.execute(transformed).map(|t| (o, t)));
    match outcome {
        Ok((o, t)) if o != t => RelationCheck {
            verdict: RelationVerdict::Holds,
            diagnostic: None,
        },
        Ok((o, _)) => RelationCheck {
            verdict: RelationVerdict::Violated,
            diagnostic: Some(format!(
                "both versions {}",
                if o { "passed" } else { "failed" }
            )),
        },
        Err(diagnostic) => RelationCheck {
            verdict: RelationVerdict::Unknown,
            diagnostic: Some(diagnostic),
        },
    }
}

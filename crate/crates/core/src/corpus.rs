//! JSONL corpus of (documentation, regression test) subject pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruth {
    Consistent,
    Inconsistent,
    #[default]
    Unknown,
}

impl GroundTruth {
    pub fn as_str(self) -> &'static str {
        match self {
            GroundTruth::Consistent => "consistent",
            GroundTruth::Inconsistent => "inconsistent",
            GroundTruth::Unknown => "unknown",
        }
    }

    pub fn is_labeled(self) -> bool {
        self != GroundTruth::Unknown
    }
}

impl fmt::Display for GroundTruth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroundTruth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consistent" => Ok(GroundTruth::Consistent),
            "inconsistent" => Ok(GroundTruth::Inconsistent),
            "unknown" => Ok(GroundTruth::Unknown),
            other => Err(format!("invalid ground_truth {other:?}")),
        }
    }
}

/// One unit of work: a documented method and a regression test exercising it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectPair {
    pub id: String,
    #[serde(default)]
    pub project: String,
    pub method_signature: String,
    pub documentation: String,
    pub test_source: String,
    #[serde(default)]
    pub ground_truth: GroundTruth,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl SubjectPair {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id must be non-empty".to_string());
        }
        if oracle::extract_assertions(&self.test_source).is_empty() {
            return Err(format!("pair {:?}: test_source has no assertion", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocQualityReport {
    pub has_param_tags: bool,
    pub has_return_tag: bool,
    pub accepted: bool,
}

/// Strips the doc-comment decoration (`/**`, leading `*`) from one line and
/// returns the description following `tag`, if the line is a tag line.
fn tag_description<'a>(line: &'a str, tag: &str) -> Option<&'a str> {
    let mut rest = line.trim_start();
    if let Some(r) = rest.strip_prefix("/**") {
        rest = r;
    }
    let rest = rest.trim_start_matches(|c: char| c == '*' || c.is_whitespace());
    let after = rest.strip_prefix(tag)?;
    // `@parameter` or `@returns` are not the tag
    if after.chars().next().is_some_and(|c| !c.is_whitespace()) {
        return None;
    }
    let desc = after.trim().trim_end_matches("*/").trim();
    (!desc.is_empty()).then_some(desc)
}

fn has_tag(documentation: &str, tag: &str) -> bool {
    documentation
        .lines()
        .any(|line| tag_description(line, tag).is_some())
}

/// Checks that the documentation describes inputs (`@param`) and output
/// (`@return`).
pub fn assess_documentation(documentation: &str) -> DocQualityReport {
    let has_param_tags = has_tag(documentation, "@param");
    let has_return_tag = has_tag(documentation, "@return");
    DocQualityReport {
        has_param_tags,
        has_return_tag,
        accepted: has_param_tags && has_return_tag,
    }
}

/// Like [`assess_documentation`], but a method whose signature declares no
/// parameters needs no `@param` tag.
pub fn assess_documentation_for_signature(
    documentation: &str,
    method_signature: &str,
) -> DocQualityReport {
    let mut report = assess_documentation(documentation);
    if declared_parameter_count(method_signature) == Some(0) {
        report.accepted = report.has_return_tag;
    }
    report
}

/// Counts top-level comma-separated parameters in the first parenthesized
/// list of a signature. `None` when the signature has no parameter list.
pub fn declared_parameter_count(method_signature: &str) -> Option<usize> {
    let open = method_signature.find('(')?;
    let mut depth = 0i32;
    let mut count = 0;
    let mut saw_token = false;
    for c in method_signature[open + 1..].chars() {
        match c {
            '(' | '<' | '[' => depth += 1,
            ')' if depth == 0 => return Some(if saw_token { count + 1 } else { 0 }),
            ')' | '>' | ']' => depth -= 1,
            ',' if depth == 0 => count += 1,
            c if !c.is_whitespace() => saw_token = true,
            _ => {}
        }
    }
    None
}

fn io_error(path: &Path, source: io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses JSONL records from a reader. Blank lines are ignored.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<SubjectPair>, CorpusError> {
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SubjectPair =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        pair.validate().map_err(|message| CorpusError::Malformed {
            line: line_no,
            message,
        })?;
        if let Some(&first_line) = seen.get(&pair.id) {
            return Err(CorpusError::DuplicateId {
                id: pair.id,
                line: line_no,
                first_line,
            });
        }
        seen.insert(pair.id.clone(), line_no);
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SubjectPair>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_corpus_to<W: Write>(pairs: &[SubjectPair], mut writer: W) -> io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut writer, pair)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_corpus(pairs: &[SubjectPair], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_corpus_to(pairs, BufWriter::new(file)).map_err(|e| io_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GET_PACKAGE_NAME_DOC: &str = r#"/**
 * <p>Gets the package name from a {@code String}.</p>
 *
 * @param className  the className to get the package name for, may be {@code null}
 * @return the package name or an empty string
 */"#;

    fn pair(id: &str) -> SubjectPair {
        SubjectPair {
            id: id.to_string(),
            project: "lang".to_string(),
            method_signature: "public static String getPackageName(String className)".to_string(),
            documentation: GET_PACKAGE_NAME_DOC.to_string(),
            test_source: "assertEquals(\"line\", string0);".to_string(),
            ground_truth: GroundTruth::Consistent,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn doc_with_both_tags() {
        let r = assess_documentation(GET_PACKAGE_NAME_DOC);
        assert!(r.has_param_tags && r.has_return_tag && r.accepted);
    }

    #[test]
    fn empty_doc_rejected() {
        let r = assess_documentation("");
        assert!(!r.accepted && !r.has_param_tags && !r.has_return_tag);
    }

    #[test]
    fn missing_return_rejected() {
        let r = assess_documentation("@param x the input");
        assert!(r.has_param_tags);
        assert!(!r.accepted);
    }

    #[test]
    fn tag_without_description_is_absent() {
        let r = assess_documentation(" * @param\n * @return   \n");
        assert!(!r.has_param_tags && !r.has_return_tag);
        let r = assess_documentation("@returns x\n@parameter y z");
        assert!(!r.has_param_tags && !r.has_return_tag);
        // inline mention is not a tag line
        assert!(!assess_documentation("see the @return value").has_return_tag);
    }

    #[test]
    fn nullary_signature_waives_param() {
        let doc = "/** Counts.\n * @return the count */";
        assert!(!assess_documentation(doc).accepted);
        assert!(assess_documentation_for_signature(doc, "public int size()").accepted);
        assert!(!assess_documentation_for_signature(doc, "int get(int index)").accepted);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(declared_parameter_count("int size()"), Some(0));
        assert_eq!(declared_parameter_count("void f(int a)"), Some(1));
        assert_eq!(
            declared_parameter_count("<K, V> Map<K, V> zip(List<K> k, Map<K, List<V>> v, int[] n)"),
            Some(3)
        );
        assert_eq!(declared_parameter_count("field"), None);
    }

    #[test]
    fn load_three_in_order() {
        let text: String = ["a", "b", "c"]
            .iter()
            .map(|id| serde_json::to_string(&pair(id)).unwrap() + "\n")
            .collect();
        let loaded = read_corpus(text.as_bytes()).unwrap();
        let ids: Vec<_> = loaded.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn duplicate_id_names_second_line() {
        let ids = ["lang-1", "x", "y", "z", "lang-1"];
        let text: String = ids
            .iter()
            .map(|id| serde_json::to_string(&pair(id)).unwrap() + "\n")
            .collect();
        match read_corpus(text.as_bytes()).unwrap_err() {
            CorpusError::DuplicateId { id, line, first_line } => {
                assert_eq!(id, "lang-1");
                assert_eq!(line, 5);
                assert_eq!(first_line, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_ground_truth() {
        let mut v = serde_json::to_value(pair("a")).unwrap();
        v["ground_truth"] = "maybe".into();
        let err = read_corpus(format!("{v}\n").as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }), "{err}");
    }

    #[test]
    fn unknown_key_rejected_and_defaults_applied() {
        let line = r#"{"id":"a","method_signature":"f()","documentation":"","test_source":"assertTrue(x);","groundtruth":"consistent"}"#;
        assert!(read_corpus(line.as_bytes()).is_err());

        let line = r#"{"id":"a","method_signature":"f()","documentation":"","test_source":"assertTrue(x);"}"#;
        let p = &read_corpus(line.as_bytes()).unwrap()[0];
        assert_eq!(p.ground_truth, GroundTruth::Unknown);
        assert_eq!(p.project, "");
    }

    #[test]
    fn missing_assertion_or_id_rejected() {
        let mut p = pair("a");
        p.test_source = "int x = 1;".into();
        let text = serde_json::to_string(&p).unwrap();
        assert!(read_corpus(text.as_bytes()).is_err());
        let mut p = pair(" ");
        p.id = " ".into();
        let text = serde_json::to_string(&p).unwrap();
        assert!(read_corpus(text.as_bytes()).is_err());
    }

    #[test]
    fn malformed_line_number() {
        let text = format!("{}\n\n{{not json\n", serde_json::to_string(&pair("a")).unwrap());
        match read_corpus(text.as_bytes()).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn file_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&[pair("only")], &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![pair("only")]);

        write_corpus(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        assert!(load_corpus(&path).unwrap().is_empty());

        assert!(matches!(
            load_corpus(dir.path().join("missing.jsonl")),
            Err(CorpusError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_text(
            doc in "(?s).{0,200}",
            sig in "[^\n]{0,60}",
            meta_key in "[a-z_]{1,10}",
            meta_val in "(?s).{0,40}",
            prefix in "[A-Z0-9 ;=.\n]{0,80}",
        ) {
            let mut p = pair("p1");
            p.documentation = format!("\"quoted\"\n{doc}\n * @return \"x\"");
            p.method_signature = sig;
            p.test_source = format!("{prefix};\nassertTrue(b);");
            p.metadata.insert(meta_key, meta_val);
            let mut buf = Vec::new();
            write_corpus_to(std::slice::from_ref(&p), &mut buf).unwrap();
            let back = read_corpus(buf.as_slice()).unwrap();
            prop_assert_eq!(back, vec![p]);
        }

        #[test]
        fn untagged_suffix_never_flips_accepted(extra in "[^@]{0,200}") {
            let base = assess_documentation(GET_PACKAGE_NAME_DOC);
            let more = assess_documentation(&format!("{GET_PACKAGE_NAME_DOC}\n{extra}"));
            prop_assert!(base.accepted);
            prop_assert!(more.accepted);
        }
    }
}

#![allow(dead_code)]

use std::path::PathBuf;

use docoracle_core::corpus::{self, GroundTruth, SubjectPair};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture20() -> Vec<SubjectPair> {
    corpus::load_corpus(fixture_path("fixture20.jsonl")).expect("fixture loads")
}

const ORACLES: [&str; 8] = [
    "assertTrue(v > {i});",
    "assertFalse(v < {i});",
    "assertNull(m.lookup({i}));",
    "assertNotNull(m.lookup({i}));",
    "assertEquals({i}, v);",
    "assertNotEquals({i}, v);",
    "assertSame(m, m.touch({i}));",
    "assertNotSame(m, m.copy({i}));",
];

/// `count` documented pairs cycling through every transformable oracle
/// kind; even indices are inconsistent.
pub fn synthetic_corpus(count: usize) -> Vec<SubjectPair> {
    (0..count)
        .map(|i| {
            let oracle = ORACLES[i % ORACLES.len()].replace("{i}", &i.to_string());
            SubjectPair {
                id: format!("syn-{i:04}"),
                project: "synthetic".into(),
                method_signature: format!("public int step{i}(int x)"),
                documentation: format!(
                    "/**\n * Advances the counter by {i}.\n *\n * @param x the starting value\n * @return the advanced value\n */"
                ),
                test_source: format!(
                    "Model m = new Model();\nint v = m.step{i}({i});\n{oracle}"
                ),
                ground_truth: if i % 2 == 0 {
                    GroundTruth::Inconsistent
                } else {
                    GroundTruth::Consistent
                },
                metadata: Default::default(),
            }
        })
        .collect()
}

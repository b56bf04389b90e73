mod common;

use proptest::prelude::*;

use docoracle_core::corpus::GroundTruth;
use docoracle_core::evaluation::{self, EvalConfig, ModeSpec};
use docoracle_core::gateway::{MockBackend, QueryConfig, StochasticJudge};
use docoracle_core::pipeline::{self, PipelineConfig};
use docoracle_core::prompt::{Label, LabelMode, PromptTemplate};
use docoracle_core::scoring::{self, ScoreMode};

fn tenths() -> impl Strategy<Value = f64> {
    (-10i32..=10).prop_map(|k| k as f64 / 10.0)
}

proptest! {
    #[test]
    fn confusion_matrix_conserves_count(scores in prop::collection::vec((tenths(), any::<bool>()), 1..100)) {
        for row in evaluation::sweep_scores(&scores, &scoring::default_thresholds()).unwrap() {
            prop_assert_eq!(row.tp + row.fp + row.fn_ + row.tn, scores.len());
            prop_assert!((0.0..=1.0).contains(&row.precision));
            prop_assert!((0.0..=1.0).contains(&row.f1));
        }
    }

    #[test]
    fn bins_partition_scores(
        scores in prop::collection::vec((-1.0f64..=1.0, any::<bool>()), 0..100),
        width in prop::sample::select(vec![0.05, 0.1, 0.2, 0.25, 0.5, 1.0, 2.0]),
    ) {
        let rows = evaluation::bin_scores(&scores, width).unwrap();
        let total: usize = rows.iter().map(|r| r.count_correct + r.count_incorrect).sum();
        prop_assert_eq!(total, scores.len());
        for r in &rows {
            if let Some(ratio) = r.ratio_incorrect {
                prop_assert!((0.0..=1.0).contains(&ratio));
            }
        }
    }

    #[test]
    fn spearman_of_self_is_one(mut x in prop::collection::vec(-1e6f64..1e6, 3..40)) {
        x.sort_by(f64::total_cmp);
        x.dedup();
        prop_assume!(x.len() >= 3);
        let r = evaluation::spearman_rho(&x, &x).unwrap();
        prop_assert_eq!(r.rho, 1.0);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        prop_assert_eq!(evaluation::spearman_rho(&x, &rev).unwrap().rho, -1.0);
    }

    #[test]
    fn spearman_is_symmetric_and_bounded(
        x in prop::collection::vec(-5i32..5, 3..30),
        y in prop::collection::vec(-5i32..5, 3..30),
    ) {
        let n = x.len().min(y.len());
        let x: Vec<f64> = x[..n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = y[..n].iter().map(|&v| v as f64).collect();
        match (evaluation::spearman_rho(&x, &y), evaluation::spearman_rho(&y, &x)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.rho - b.rho).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a.rho));
                prop_assert!((0.0..=1.0).contains(&a.p_value));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric failure"),
        }
    }
}

#[test]
fn scoring_matches_summation_for_every_tuple() {
    for n in 1..=3usize {
        let count = 3usize.pow(n as u32);
        let decode = |mut code: usize| -> Vec<Label> {
            (0..n)
                .map(|_| {
                    let l = Label::ALL[code % 3];
                    code /= 3;
                    l
                })
                .collect()
        };
        for a in 0..count {
            for b in 0..count {
                let (orig, tran) = (decode(a), decode(b));
                let value = |l: &Label| match l {
                    Label::Correct => 1i64,
                    Label::Undecidable => 0,
                    Label::Incorrect => -1,
                };
                let o: i64 = orig.iter().map(value).sum();
                let t: i64 = -tran.iter().map(value).sum::<i64>();
                let got = scoring::aggregate("p", &orig, &tran, n, ScoreMode::Metamorphic, LabelMode::ThreeLabel)
                    .unwrap();
                assert_eq!((got.original_sum, got.transformed_sum), (o, t));
                assert_eq!(got.normalized, (o + t) as f64 / (2 * n) as f64);
            }
        }
    }
}

fn pipeline_config(n: usize, label_mode: LabelMode) -> PipelineConfig {
    PipelineConfig {
        query: QueryConfig {
            n_queries: n,
            ..QueryConfig::default()
        },
        label_mode,
        ..PipelineConfig::default()
    }
}

#[test]
fn perfect_oracle_precision_is_one_everywhere() {
    let out = pipeline::run_corpus(
        &common::fixture20(),
        &PromptTemplate::builtin(),
        &pipeline_config(3, LabelMode::TwoLabel),
        &MockBackend::PerfectOracle,
        false,
    )
    .unwrap();
    let rows = evaluation::sweep_thresholds(&out.results, &scoring::default_thresholds()).unwrap();
    assert!(rows.iter().all(|r| r.precision == 1.0 && r.recall == 1.0));
}

#[test]
fn rescoring_prefixes_matches_direct_run() {
    let corpus = common::synthetic_corpus(40);
    let backend = MockBackend::Stochastic(StochasticJudge::new(0.7, 0.2, 5));
    let template = PromptTemplate::builtin();
    let full = pipeline::run_corpus(&corpus, &template, &pipeline_config(5, LabelMode::ThreeLabel), &backend, false)
        .unwrap();
    let direct = pipeline::run_corpus(&corpus, &template, &pipeline_config(3, LabelMode::ThreeLabel), &backend, false)
        .unwrap();
    for (f, d) in full.results.iter().zip(&direct.results) {
        let r = f.rescore(ScoreMode::Metamorphic, 3, &scoring::default_thresholds()).unwrap();
        assert_eq!(&r, d);
    }
    assert!(full.results[0].rescore(ScoreMode::Metamorphic, 6, &[]).is_err());
}

#[test]
fn more_queries_separate_classes_better() {
    let corpus = common::synthetic_corpus(400);
    let backend = MockBackend::Stochastic(StochasticJudge::new(0.7, 0.1, 42));
    let out = pipeline::run_corpus(
        &corpus,
        &PromptTemplate::builtin(),
        &pipeline_config(5, LabelMode::ThreeLabel),
        &backend,
        false,
    )
    .unwrap();
    let separation: Vec<f64> = [1, 3, 5]
        .iter()
        .map(|&n| {
            let rescored: Vec<_> = out
                .results
                .iter()
                .map(|r| r.rescore(ScoreMode::Metamorphic, n, &[]).unwrap())
                .collect();
            evaluation::separation(&evaluation::labeled_scores(&rescored))
        })
        .collect();
    assert!(
        separation.windows(2).all(|w| w[1] > w[0]),
        "{separation:?}"
    );
}

#[test]
fn two_label_ablation_has_no_undecidable_verdicts() {
    let corpus = common::synthetic_corpus(30);
    let backend = MockBackend::Stochastic(StochasticJudge::new(0.8, 0.5, 1));
    let out = pipeline::run_corpus(
        &corpus,
        &PromptTemplate::builtin(),
        &pipeline_config(3, LabelMode::TwoLabel),
        &backend,
        false,
    )
    .unwrap();
    for r in &out.results {
        assert!(r
            .original_verdicts
            .iter()
            .chain(&r.transformed_verdicts)
            .all(|v| *v != Some(Label::Undecidable)));
    }
    let modes = [ModeSpec {
        score_mode: ScoreMode::OriginalOnly,
        label_mode: LabelMode::TwoLabel,
        n: 3,
    }];
    let reports = evaluation::evaluate_rescored(&out.results, &modes, &EvalConfig::default()).unwrap();
    assert_eq!(reports[0].labeled_count, 30);
}

#[test]
fn unknown_ground_truth_is_skipped_in_reports() {
    let mut corpus = common::synthetic_corpus(10);
    corpus[0].ground_truth = GroundTruth::Unknown;
    let out = pipeline::run_corpus(
        &corpus,
        &PromptTemplate::builtin(),
        &pipeline_config(1, LabelMode::ThreeLabel),
        &MockBackend::PerfectOracle,
        false,
    )
    .unwrap();
    let mode = evaluation::results_mode(&out.results).unwrap();
    let report = evaluation::evaluate(&out.results, mode, &EvalConfig::default()).unwrap();
    assert_eq!((report.labeled_count, report.unlabeled_skipped), (9, 1));
}

#[test]
fn results_round_trip_through_jsonl() {
    let out = pipeline::run_corpus(
        &common::fixture20(),
        &PromptTemplate::builtin(),
        &pipeline_config(2, LabelMode::ThreeLabel),
        &MockBackend::PerfectOracle,
        false,
    )
    .unwrap();
    let mut buf = Vec::new();
    evaluation::write_results_to(&out.results, &mut buf).unwrap();
    assert_eq!(evaluation::read_results(buf.as_slice()).unwrap(), out.results);
}

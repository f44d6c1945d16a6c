//! Experiment orchestration: corpora, plans, execution and reports.

pub mod corpus;
pub mod kv;
pub mod plan;
pub mod report;
pub mod run;

pub use corpus::{ingest_corpus, load_image, save_png, synthetic_corpus};
pub use plan::{AttackKind, CorpusSource, ExperimentPlan, ExtractorSettings, Scheme};
pub use report::{aggregate, write_outputs, AttackRow, CsvSink, CurvePoint, MarkRecord};
pub use run::{run_plan, run_plan_with, PlanOutcome};

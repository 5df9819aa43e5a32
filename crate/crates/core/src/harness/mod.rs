//! Configuration, evaluation, checkpoint selection and reporting.

mod config;
mod metrics;
mod pipeline;

pub use config::RunConfig;
pub use metrics::{
    edit_distance, evaluate_model, report_werr, select_peak_checkpoints, wer, EvalReport, LanguageWer, WerrReport,
};
pub use pipeline::{
    dev_test_split, finetune_full, finetune_lda, generate, nst_run, of_language, train_backbone, train_lm, PeakTracker,
};

//! Distillation of vision-language teachers into small students, regularized
//! toward the teacher's text embeddings.
//!
//! The objective combines cross-entropy, a temperature-scaled hint loss on
//! teacher logits, and absolute/relative distance losses between the
//! student's projected embedding and per-class text embeddings.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod student;
pub mod sweep;
pub mod synth;
pub mod teacher;
pub mod train;

pub use data::{zero_shot_teacher_accuracy, Dataset, DATA_FORMAT};
pub use embedding::{Embedding, ProbVector};
pub use error::{Result, RiseError};
pub use eval::{accuracy, evaluate_ensemble, EnsembleMember, EvalReport};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use losses::{
    AbsoluteMetric, AccessCounts, InnerMetric, LossBreakdown, LossConfig, LossContext, OuterMetric,
};
pub use optim::{Optimizer, OptimizerKind};
pub use student::{HeadMode, LabeledSample, StudentModel, STUDENT_FORMAT};
pub use sweep::{ablation_sweep, suite_variants, Suite, SweepReport, Variant, VariantKind};
pub use synth::{generate_synthetic, SynthParams, SyntheticBenchmark};
pub use teacher::{SupervisionSource, TeacherTable, TEACHER_FORMAT};
pub use train::{leave_one_domain_out, split_train_val, train, TrainConfig, TrainOutcome};

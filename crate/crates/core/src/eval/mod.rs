//! Metrics, the frozen-encoder fine-tuning protocol, attention export and
//! energy accounting.

pub mod attention;
pub mod energy;
pub mod finetune;
pub mod metrics;
pub mod predictions;
pub mod report;

pub use attention::{attention_export, parse_attention_csv, AttentionExport};
pub use energy::{energy_estimate, EnergyEstimate, Intensity};
pub use finetune::{finetune_protocol, AggInit, FinetuneConfig, FinetuneOutcome};
pub use metrics::{auc, balanced_accuracy, macro_auc_ovr, quadratic_kappa};
pub use report::{MetricReport, MetricSummary};

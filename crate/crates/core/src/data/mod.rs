//! Patient records, the synthetic generator and JSONL interchange.

pub mod jsonl;
mod record;
pub mod synth;

pub use record::{FeatureKind, FeaturePosition, LabStats, PatientRecord, Visit, PAD};
pub use synth::{generate, LabThresholdRule, RecordSchema, TaskName, TaskSpec};

/// Envelope kind used for patient records.
pub const RECORD_KIND: &str = "record";

pub fn write_records(path: impl AsRef<std::path::Path>, records: &[PatientRecord]) -> crate::Result<()> {
    jsonl::write_file(path, RECORD_KIND, records)
}

pub fn read_records(path: impl AsRef<std::path::Path>) -> crate::Result<Vec<PatientRecord>> {
    jsonl::read_file(path, RECORD_KIND)
}

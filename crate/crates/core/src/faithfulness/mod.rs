//! Comprehensiveness, sufficiency and the head-to-head comparison built
//! on their composite.

mod metrics;
mod report;
mod stats;
mod win;

pub use metrics::{
    composite_score, comprehensiveness, evaluate_record, evaluate_records, sufficiency, top_count, validate_k_grid,
    RecordFaithfulness, DEFAULT_K_GRID,
};
pub use report::{extrapolate_hours, FaithfulnessReport};
pub use stats::{binomial_upper_tail, sign_test_greater, SignTest};
pub use win::{method_applies, win_matrix, WinMatrix};

//! Histories of concurrent runs and the checks applied to them.

pub mod brute;
pub mod checker;
pub mod history;
pub mod oracle;
pub mod progress;
pub mod trace;

pub use checker::{check_final, check_history, may_in, sure_in, CheckReport, Clause, HistoryViolation, Malformed};
pub use history::{Clock, History, OpRecord, Recorder};
pub use oracle::oracle_apply;
pub use trace::{read_trace, write_trace, TraceError};

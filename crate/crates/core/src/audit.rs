//! Data-locality audit log.
//!
//! Sharing strategies must never read another org's raw samples. Training and
//! labeling entry points record `(context, data_owner)` pairs here so tests
//! can assert the access pattern. Recording is coarse (one entry per dataset
//! borrow, not per sample) and cheap enough to stay on in production builds.

use std::sync::Mutex;

/// One dataset access: which execution context touched whose data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    /// Logical actor, e.g. `local:uni_a` or `student:company`.
    pub context: String,
    /// Org (or other source) owning the samples that were read.
    pub owner: String,
    /// What the access was for, e.g. `train`, `teacher-label-inputs`.
    pub purpose: &'static str,
}

static LOG: Mutex<Vec<Access>> = Mutex::new(Vec::new());

pub fn record(context: &str, owner: &str, purpose: &'static str) {
    LOG.lock().unwrap().push(Access {
        context: context.to_string(),
        owner: owner.to_string(),
        purpose,
    });
}

/// Drain and return all recorded accesses.
pub fn take() -> Vec<Access> {
    std::mem::take(&mut *LOG.lock().unwrap())
}

pub fn clear() {
    LOG.lock().unwrap().clear();
}

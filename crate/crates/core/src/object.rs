//! Process-unique object identities.
//!
//! Every trackable object (vector, matrix, managed scalar, scratch buffer)
//! carries an `ObjectId` used by the stream dependency tracker to key its
//! access records. Ids are never reused within a process.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub(crate) u64);

impl ObjectId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "obj#{}", self.0)
    }
}

static NEXT: AtomicU64 = AtomicU64::new(1);

pub fn next_object_id() -> ObjectId {
    ObjectId(NEXT.fetch_add(1, Ordering::Relaxed))
}

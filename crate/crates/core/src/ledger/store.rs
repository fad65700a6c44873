use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::crypto::Digest;

use super::Version;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredValue {
    pub value: Vec<u8>,
    pub version: Version,
}

/// Anything that can answer "which version of this key is current".
pub trait VersionView {
    fn current_version(&self, key: &str) -> Option<Version>;
}

/// Committed world state. Absent keys are `None`, never empty bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedStore {
    entries: BTreeMap<String, StoredValue>,
}

impl VersionedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<&StoredValue> {
        self.entries.get(key)
    }

    pub fn range<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a StoredValue)> + 'a {
        self.entries.range(prefix.to_owned()..).take_while(move |(k, _)| k.starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoredValue)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Versions only move forward; the commit path is the only writer.
    pub(crate) fn apply(&mut self, key: &str, value: Vec<u8>, version: Version) {
        if let Some(old) = self.entries.get(key) {
            debug_assert!(old.version < version, "version regression on {key}");
        }
        self.entries.insert(key.to_owned(), StoredValue { value, version });
    }

    /// Unconditional write for replicas that may see blocks out of order.
    pub(crate) fn overwrite(&mut self, key: &str, value: Vec<u8>, version: Version) {
        self.entries.insert(key.to_owned(), StoredValue { value, version });
    }

    pub fn state_hash(&self) -> Digest {
        codec::digest(&self.entries)
    }
}

impl VersionView for VersionedStore {
    fn current_version(&self, key: &str) -> Option<Version> {
        self.entries.get(key).map(|v| v.version)
    }
}

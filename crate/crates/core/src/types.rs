//! Small shared domain types.

use anyhow::{bail, Result};
use std::fmt;

/// The four cooperative heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchId {
    Local,
    Global,
    Gcp,
    Ovr,
}

impl BranchId {
    pub const ALL: [BranchId; 4] = [BranchId::Local, BranchId::Global, BranchId::Gcp, BranchId::Ovr];

    pub fn key(&self) -> &'static str {
        match self {
            BranchId::Local => "local",
            BranchId::Global => "global",
            BranchId::Gcp => "gcp",
            BranchId::Ovr => "ovr",
        }
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for BranchId {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "local" => Ok(BranchId::Local),
            "global" => Ok(BranchId::Global),
            "gcp" => Ok(BranchId::Gcp),
            "ovr" => Ok(BranchId::Ovr),
            other => bail!("unknown branch id: {other:?} (expected local|global|gcp|ovr)"),
        }
    }
}

/// Train / query / gallery split markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Query => f.write_str("query"),
            Split::Gallery => f.write_str("gallery"),
        }
    }
}

//! Leakage-free split protocol.
//!
//! Source cases are split 3:1:1 into train / val / source_test. Every
//! target-domain case (target 1 or target 2) is test-only: it may never be
//! used for training, validation or checkpoint selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{DomainRole, DomainTag, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Train,
    Val,
    SourceTest,
    TargetTest,
}

impl Assignment {
    pub fn is_test(self) -> bool {
        matches!(self, Assignment::SourceTest | Assignment::TargetTest)
    }
}

/// One manifest row, flattened for the on-disk JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub center: String,
    pub phase: Phase,
    pub domain_role: DomainRole,
    pub assignment: Assignment,
}

impl ManifestEntry {
    pub fn tag(&self) -> DomainTag {
        DomainTag {
            center: self.center.clone(),
            phase: self.phase,
            role: self.domain_role,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: [u32; 3],
    /// Sorted by `case_id`.
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn ids(&self, assignment: Assignment) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.assignment == assignment)
            .map(|e| e.case_id.as_str())
            .collect()
    }

    pub fn count(&self, assignment: Assignment) -> usize {
        self.entries.iter().filter(|e| e.assignment == assignment).count()
    }

    pub fn get(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.case_id.as_str().cmp(case_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn target_ids(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.domain_role.is_target())
            .map(|e| e.case_id.as_str())
            .collect()
    }

    fn sort(&mut self) {
        self.entries.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut m: SplitManifest = serde_json::from_str(s)?;
        m.sort();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// SHA-256 over the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits source cases 3:1:1 (val and source_test get `floor(N/5)` each,
/// train the remainder) and assigns every target case to `target_test`.
/// The shuffle is keyed on the sorted case ids, so input order is irrelevant.
pub fn split_source(cases: &[(String, DomainTag)], seed: u64) -> Result<SplitManifest> {
    let mut seen = BTreeSet::new();
    for (id, tag) in cases {
        tag.validate()?;
        if !seen.insert(id.as_str()) {
            return Err(Error::Split(format!("duplicate case id {id}")));
        }
    }
    let mut source: Vec<&(String, DomainTag)> = cases.iter().filter(|(_, t)| !t.role.is_target()).collect();
    if source.is_empty() {
        return Err(Error::Split("no source cases".into()));
    }
    if source.len() < 5 {
        return Err(Error::Split(format!(
            "need at least 5 source cases for a 3:1:1 split, got {}",
            source.len()
        )));
    }
    source.sort_by(|a, b| a.0.cmp(&b.0));
    source.shuffle(&mut seed::rng(seed::derive_label(seed, "split_source")));

    let n = source.len();
    let held = n / 5;
    let mut entries: Vec<ManifestEntry> = source
        .iter()
        .enumerate()
        .map(|(i, (id, tag))| ManifestEntry {
            case_id: id.clone(),
            center: tag.center.clone(),
            phase: tag.phase,
            domain_role: tag.role,
            assignment: if i < held {
                Assignment::Val
            } else if i < 2 * held {
                Assignment::SourceTest
            } else {
                Assignment::Train
            },
        })
        .collect();
    entries.extend(
        cases
            .iter()
            .filter(|(_, t)| t.role.is_target())
            .map(|(id, tag)| ManifestEntry {
                case_id: id.clone(),
                center: tag.center.clone(),
                phase: tag.phase,
                domain_role: tag.role,
                assignment: Assignment::TargetTest,
            }),
    );
    let mut m = SplitManifest {
        seed,
        ratio: [3, 1, 1],
        entries,
    };
    m.sort();
    Ok(m)
}

/// Keeps `ceil(fraction * |train|)` training cases. The kept set is a prefix
/// of a seed-keyed permutation of the sorted train ids, so for a fixed seed
/// smaller fractions always select subsets of larger ones.
pub fn subsample_train(m: &SplitManifest, fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut train: Vec<&str> = m.ids(Assignment::Train);
    if train.is_empty() {
        return Err(Error::Split("manifest has no train cases".into()));
    }
    // guard ceil against representation error (0.3 * 100 = 30.000000000000004)
    let keep = ((fraction * train.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep < 1 {
        return Err(Error::Split("fraction keeps no training cases".into()));
    }
    train.sort_unstable();
    train.shuffle(&mut seed::rng(seed::derive_label(seed, "subsample_train")));
    let kept: BTreeSet<&str> = train.into_iter().take(keep).collect();
    let entries = m
        .entries
        .iter()
        .filter(|e| e.assignment != Assignment::Train || kept.contains(e.case_id.as_str()))
        .cloned()
        .collect();
    Ok(SplitManifest {
        seed: m.seed,
        ratio: m.ratio,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A target-domain case assigned anything other than `target_test`.
    TargetLeak,
    Duplicate,
    /// Domain role and phase disagree.
    InvalidTag,
    /// A source case assigned to `target_test`.
    SourceInTargetTest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub case_id: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl std::fmt::Display for IsolationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.passed {
            return write!(f, "isolation: pass");
        }
        write!(f, "isolation: FAIL")?;
        for v in &self.violations {
            write!(f, "; {} {}", v.case_id, v.detail)?;
        }
        Ok(())
    }
}

/// Audits a manifest; never fails, only reports.
pub fn verify_isolation(m: &SplitManifest) -> IsolationReport {
    let mut violations = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &m.entries {
        *counts.entry(e.case_id.as_str()).or_default() += 1;
        if let Err(err) = e.tag().validate() {
            violations.push(Violation {
                case_id: e.case_id.clone(),
                kind: ViolationKind::InvalidTag,
                detail: err.to_string(),
            });
        }
        if e.domain_role.is_target() && e.assignment != Assignment::TargetTest {
            violations.push(Violation {
                case_id: e.case_id.clone(),
                kind: ViolationKind::TargetLeak,
                detail: format!("{} case assigned {:?}", e.domain_role.as_str(), e.assignment),
            });
        }
        if !e.domain_role.is_target() && e.assignment == Assignment::TargetTest {
            violations.push(Violation {
                case_id: e.case_id.clone(),
                kind: ViolationKind::SourceInTargetTest,
                detail: "source case assigned target_test".into(),
            });
        }
    }
    for (id, n) in counts {
        if n > 1 {
            violations.push(Violation {
                case_id: id.to_string(),
                kind: ViolationKind::Duplicate,
                detail: format!("duplicate ({n} entries)"),
            });
        }
    }
    IsolationReport {
        passed: violations.is_empty(),
        violations,
    }
}

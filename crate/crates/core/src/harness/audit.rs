//! Durability audit: recompute each block's failure product from the edges
//! that actually hold it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fog::StreamRecord;
use crate::placement::reliability_satisfied;
use crate::types::{BlockRef, EdgeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Satisfied,
    /// Short of the target, but the owner flagged it and the minimum
    /// replica count holds.
    AcceptedShortfall,
    Violated,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAudit {
    pub block: BlockRef,
    pub target: f64,
    pub hosts: Vec<(EdgeId, f64)>,
    pub failure_product: f64,
    pub outcome: AuditOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSection {
    pub label: String,
    pub at_ms: u64,
    pub blocks: usize,
    pub satisfied: usize,
    pub accepted_shortfall: usize,
    pub violated: usize,
    pub lost: usize,
    pub passed: bool,
    /// Blocks that did not pass.
    pub failures: Vec<BlockAudit>,
}

/// Audit every block registered in `streams` against `hosting`, the live
/// edges holding each block and their reliabilities.
pub fn audit_blocks<'a>(
    label: &str,
    at_ms: u64,
    streams: impl IntoIterator<Item = &'a StreamRecord>,
    hosting: &BTreeMap<BlockRef, Vec<(EdgeId, f64)>>,
) -> AuditSection {
    let mut s = AuditSection {
        label: label.to_owned(),
        at_ms,
        ..Default::default()
    };
    for stream in streams {
        for rec in stream.blocks.values() {
            let block = rec.block_ref();
            let hosts = hosting.get(&block).cloned().unwrap_or_default();
            let rs: Vec<f64> = hosts.iter().map(|(_, r)| *r).collect();
            let outcome = if hosts.is_empty() {
                AuditOutcome::Lost
            } else if reliability_satisfied(stream.reliability, &rs) {
                AuditOutcome::Satisfied
            } else if rec.reliability_unmet && hosts.len() >= stream.bounds.min {
                AuditOutcome::AcceptedShortfall
            } else {
                AuditOutcome::Violated
            };
            s.blocks += 1;
            match outcome {
                AuditOutcome::Satisfied => s.satisfied += 1,
                AuditOutcome::AcceptedShortfall => s.accepted_shortfall += 1,
                AuditOutcome::Violated => s.violated += 1,
                AuditOutcome::Lost => s.lost += 1,
            }
            if matches!(outcome, AuditOutcome::Violated | AuditOutcome::Lost) {
                s.failures.push(BlockAudit {
                    block,
                    target: stream.reliability,
                    failure_product: rs.iter().map(|r| 1.0 - r).product(),
                    hosts,
                    outcome,
                });
            }
        }
    }
    s.passed = s.violated == 0 && s.lost == 0;
    s
}

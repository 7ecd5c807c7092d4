//! Catalog of injectable silent bugs. Each one toggles a single site in the
//! emulated parallel execution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParallelConfig;
use crate::annotation::glob_match;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown bug id {0:?}")]
pub struct UnknownBugId(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BugId {
    WdStaleInput,
    WdWrongScale,
    WdLayout,
    WcWrongOrder,
    WcWrongGroup,
    WcWrongReduceOp,
    McTpRowAllreduce,
    McSpNormGrad,
    McDpGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taxonomy {
    WrongData,
    WrongCommunication,
    MissingCommunication,
}

impl Taxonomy {
    pub fn tag(self) -> &'static str {
        match self {
            Taxonomy::WrongData => "WD",
            Taxonomy::WrongCommunication => "WC",
            Taxonomy::MissingCommunication => "MC",
        }
    }
}

impl BugId {
    pub const ALL: [BugId; 9] = [
        BugId::WdStaleInput,
        BugId::WdWrongScale,
        BugId::WdLayout,
        BugId::WcWrongOrder,
        BugId::WcWrongGroup,
        BugId::WcWrongReduceOp,
        BugId::McTpRowAllreduce,
        BugId::McSpNormGrad,
        BugId::McDpGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BugId::WdStaleInput => "WD_STALE_INPUT",
            BugId::WdWrongScale => "WD_WRONG_SCALE",
            BugId::WdLayout => "WD_LAYOUT",
            BugId::WcWrongOrder => "WC_WRONG_ORDER",
            BugId::WcWrongGroup => "WC_WRONG_GROUP",
            BugId::WcWrongReduceOp => "WC_WRONG_REDUCE_OP",
            BugId::McTpRowAllreduce => "MC_TP_ROW_ALLREDUCE",
            BugId::McSpNormGrad => "MC_SP_NORM_GRAD",
            BugId::McDpGrad => "MC_DP_GRAD",
        }
    }

    pub fn taxonomy(self) -> Taxonomy {
        match self {
            BugId::WdStaleInput | BugId::WdWrongScale | BugId::WdLayout => Taxonomy::WrongData,
            BugId::WcWrongOrder | BugId::WcWrongGroup | BugId::WcWrongReduceOp => Taxonomy::WrongCommunication,
            _ => Taxonomy::MissingCommunication,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            BugId::WdStaleInput => "module computes on the previous microbatch's input",
            BugId::WdWrongScale => "word-embedding output multiplied by the tensor-parallel size",
            BugId::WdLayout => "context-parallel K/V used in gathered rank order instead of sequence order",
            BugId::WcWrongOrder => "sequence-parallel all-gather before the MLP concatenates ranks in reverse",
            BugId::WcWrongGroup => "data-parallel gradient all-reduce runs over half-size groups",
            BugId::WcWrongReduceOp => "sequence-parallel norm gradients averaged instead of summed over TP",
            BugId::McTpRowAllreduce => "row-parallel linear output left as a partial sum",
            BugId::McSpNormGrad => "sequence-parallel norm gradient all-reduce skipped",
            BugId::McDpGrad => "data-parallel gradient all-reduce skipped",
        }
    }

    /// Module or parameter pattern the bug is injected at by default.
    pub fn default_site(self) -> &'static str {
        match self {
            BugId::WdStaleInput => "model.layers.1.mlp",
            BugId::WdWrongScale => "model.embedding",
            BugId::WdLayout => "model.layers.1.self_attention",
            BugId::WcWrongOrder => "model.layers.1.mlp",
            BugId::WcWrongGroup => "model.layers.1.*",
            BugId::WcWrongReduceOp => "model.layers.1.pre_mlp_norm.*",
            BugId::McTpRowAllreduce => "model.layers.1.self_attention",
            BugId::McSpNormGrad => "model.layers.1.input_norm.*",
            BugId::McDpGrad => "model.layers.1.*",
        }
    }

    pub fn requirement(self) -> &'static str {
        match self {
            BugId::WdStaleInput => "at least 2 microbatches per data-parallel rank",
            BugId::WdWrongScale | BugId::McTpRowAllreduce => "tp >= 2",
            BugId::WdLayout => "cp >= 2",
            BugId::WcWrongOrder | BugId::WcWrongReduceOp | BugId::McSpNormGrad => "sp on and tp >= 2",
            BugId::WcWrongGroup => "dp >= 4",
            BugId::McDpGrad => "dp >= 2",
        }
    }

    /// Whether the bug's site executes under `pc`.
    pub fn is_active(self, pc: &ParallelConfig) -> bool {
        match self {
            BugId::WdStaleInput => pc.microbatches >= 2,
            BugId::WdWrongScale | BugId::McTpRowAllreduce => pc.tp >= 2,
            BugId::WdLayout => pc.cp >= 2,
            BugId::WcWrongOrder | BugId::WcWrongReduceOp | BugId::McSpNormGrad => pc.sp && pc.tp >= 2,
            BugId::WcWrongGroup => pc.dp >= 4,
            BugId::McDpGrad => pc.dp >= 2,
        }
    }
}

impl fmt::Display for BugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BugId {
    type Err = UnknownBugId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugId::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownBugId(s.to_string()))
    }
}

impl TryFrom<String> for BugId {
    type Error = UnknownBugId;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BugId> for String {
    fn from(b: BugId) -> String {
        b.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugInjection {
    #[serde(rename = "id")]
    pub bug_id: BugId,
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl BugInjection {
    pub fn new(bug_id: BugId) -> Self {
        Self { bug_id, site: None, enabled: true }
    }

    pub fn site(&self) -> &str {
        self.site.as_deref().unwrap_or(self.bug_id.default_site())
    }
}

/// Enabled injections, queried at each candidate code site.
#[derive(Debug, Clone, Default)]
pub struct BugSet(Vec<BugInjection>);

impl BugSet {
    pub fn new(bugs: &[BugInjection]) -> Self {
        Self(bugs.iter().filter(|b| b.enabled).cloned().collect())
    }

    pub fn hits(&self, id: BugId, name: &str) -> bool {
        self.0.iter().any(|b| b.bug_id == id && glob_match(b.site(), name))
    }

    pub fn any(&self, id: BugId) -> bool {
        self.0.iter().any(|b| b.bug_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_round_trips_names() {
        assert_eq!(BugId::ALL.len(), 9);
        for b in BugId::ALL {
            assert_eq!(b.name().parse::<BugId>().unwrap(), b);
            assert!(b.name().starts_with(b.taxonomy().tag()));
        }
        assert_eq!("NOPE".parse::<BugId>(), Err(UnknownBugId("NOPE".into())));
    }

    #[test]
    fn activity_follows_config() {
        let base = ParallelConfig::default();
        assert!(BugId::ALL.iter().all(|b| !b.is_active(&base)));
        let pc = ParallelConfig { tp: 2, sp: true, ..base.clone() };
        assert!(BugId::McSpNormGrad.is_active(&pc));
        assert!(!BugId::McDpGrad.is_active(&pc));
    }

    #[test]
    fn site_matching() {
        let set = BugSet::new(&[BugInjection::new(BugId::McDpGrad), BugInjection { enabled: false, ..BugInjection::new(BugId::WdLayout) }]);
        assert!(set.hits(BugId::McDpGrad, "model.layers.1.mlp.fc1.weight"));
        assert!(!set.hits(BugId::McDpGrad, "model.layers.10.mlp.fc1.weight"));
        assert!(!set.any(BugId::WdLayout));
    }
}

//! Self-checks run by `longattn check`: oracle agreement, limiting cases,
//! gradients, receptive fields, flop accounting and random-feature bias.
//!
//! Every suite returns a [`SuiteReport`] listing each measured quantity
//! next to the bound it has to meet.

mod flops;
mod gradient;
mod limits;
mod oracle;
mod performer;
mod receptive;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::VARIANT_TAGS;
use crate::error::{Error, Result};

pub use flops::flop_suite;
pub use gradient::gradient_suite;
pub use limits::limit_suite;
pub use oracle::oracle_suite;
pub use performer::{performer_kernel_error, performer_suite};
pub use receptive::{half_overlap_reach, input_jacobian_norms, receptive_field_suite};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracle,
    Limits,
    Gradient,
    ReceptiveField,
    Flops,
    Performer,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Oracle, Suite::Limits, Suite::Gradient, Suite::ReceptiveField, Suite::Flops, Suite::Performer];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Limits => "limits",
            Suite::Gradient => "gradient",
            Suite::ReceptiveField => "receptive_field",
            Suite::Flops => "flops",
            Suite::Performer => "performer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check suite {s:?}")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a measured value is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Within { low: f64, high: f64 },
    Equals(f64),
}

impl Bound {
    pub fn holds(self, x: f64) -> bool {
        match self {
            Bound::AtMost(b) => x <= b,
            Bound::AtLeast(b) => x >= b,
            Bound::Within { low, high } => (low..=high).contains(&x),
            Bound::Equals(b) => x == b,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Bound::AtMost(b) => write!(f, "<= {b:e}"),
            Bound::AtLeast(b) => write!(f, ">= {b}"),
            Bound::Within { low, high } => write!(f, "in [{low}, {high}]"),
            Bound::Equals(b) => write!(f, "== {b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Self { name: name.into(), value, bound, passed: bound.holds(value) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

/// Which variants the variant-specific suites cover, and their seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    /// `None` covers every variant.
    pub variant: Option<String>,
    pub seed: u64,
    pub oracle_cases: usize,
    pub performer_features: usize,
    pub performer_pairs: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { variant: None, seed: 0, oracle_cases: 100, performer_features: 10_000, performer_pairs: 100 }
    }
}

impl CheckOptions {
    /// Restricts the suites to `tag`, or to everything for `"all"`.
    pub fn for_variant(tag: &str) -> Result<Self> {
        let variant = match tag {
            "all" => None,
            t if VARIANT_TAGS.contains(&t) => Some(t.to_string()),
            t => return Err(Error::Config(format!("unknown attention variant {t:?}"))),
        };
        Ok(Self { variant, ..Self::default() })
    }

    pub fn covers(&self, tag: &str) -> bool {
        self.variant.as_deref().map_or(true, |v| v == tag)
    }
}

pub fn run_suite(suite: Suite, opts: &CheckOptions) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let results = match suite {
        Suite::Oracle => oracle_suite(opts)?,
        Suite::Limits => limit_suite(opts)?,
        Suite::Gradient => gradient_suite(opts)?,
        Suite::ReceptiveField => receptive_field_suite(opts)?,
        Suite::Flops => flop_suite(opts)?,
        Suite::Performer => performer_suite(opts)?,
    };
    Ok(SuiteReport { suite, results, seconds: t0.elapsed().as_secs_f64() })
}

/// Runs `suites` in order; a suite with nothing to check for the selected
/// variant is left out.
pub fn run_checks(suites: &[Suite], opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for &s in suites {
        let r = run_suite(s, opts)?;
        if !r.results.is_empty() {
            out.push(r);
        }
    }
    Ok(out)
}

//! Bundled worked scenarios with their printed reference values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ObserverRealization, ProblemFile, Structure};
use crate::synthesis::{DesignOptions, Stage};

/// Printed values carry four decimals.
pub const PRINT_TOL: f64 = 1e-3;

pub const NAMES: [&str; 8] = [
    "ex1-case1",
    "ex1-case2",
    "ex1-case3",
    "ex1-case4",
    "ex1-case5",
    "ex1-case6",
    "ex1-open-loop",
    "ex2",
];

fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "ex1-case1" => include_str!("../fixtures/ex1-case1.json"),
        "ex1-case2" => include_str!("../fixtures/ex1-case2.json"),
        "ex1-case3" => include_str!("../fixtures/ex1-case3.json"),
        "ex1-case4" => include_str!("../fixtures/ex1-case4.json"),
        "ex1-case5" => include_str!("../fixtures/ex1-case5.json"),
        "ex1-case6" => include_str!("../fixtures/ex1-case6.json"),
        "ex1-open-loop" => include_str!("../fixtures/ex1-open-loop.json"),
        "ex2" => include_str!("../fixtures/ex2.json"),
        _ => return None,
    })
}

type Nested = Vec<Vec<f64>>;

fn to_matrix(rows: &Nested) -> Matrix {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Matrix::from_row_slice(r, c, &flat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedObserver {
    pub structure: Structure,
    pub blocks: BTreeMap<String, Nested>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub stage: Option<String>,
    pub problem: ProblemFile,
    #[serde(default)]
    pub expected: BTreeMap<String, Nested>,
    #[serde(default)]
    pub published: Option<PublishedObserver>,
    /// Reference characteristic roots as (re, im).
    #[serde(default)]
    pub roots: Vec<[f64; 2]>,
}

/// Per-block comparison against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiff {
    pub name: String,
    pub max_abs_diff: f64,
    pub passed: bool,
}

impl Fixture {
    pub fn stage(&self) -> Option<Stage> {
        self.stage.as_deref().and_then(Stage::parse)
    }

    pub fn expected_blocks(&self) -> Vec<(String, Matrix)> {
        self.expected.iter().map(|(k, v)| (k.clone(), to_matrix(v))).collect()
    }

    /// Ladder options reproducing the printed design: pinned stage and design hints.
    pub fn design_options(&self) -> DesignOptions {
        DesignOptions {
            r_rows: self.problem.r.clone(),
            f_d: self.problem.f_d.clone(),
            pin_n_tau: self.problem.pin_n_tau,
            only_stage: self.stage(),
            ..DesignOptions::default()
        }
    }

    /// The printed observer, when the scenario lists one, padded with zeros.
    pub fn published_observer(&self, p: usize, m: usize) -> Result<Option<ObserverRealization>> {
        let Some(pb) = &self.published else {
            return Ok(None);
        };
        let s = pb.blocks.get("N").map_or(self.problem.h0.nrows(), |n| n.len());
        let mut obs = ObserverRealization::zeros(pb.structure, s, p, m);
        for (name, rows) in &pb.blocks {
            let slot = obs
                .block_mut(name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown observer block {name}")))?;
            let v = to_matrix(rows);
            if v.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "published {name} is {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
        }
        Ok(Some(obs))
    }

    /// Compares the listed reference blocks with `obs` at print precision.
    pub fn diff(&self, obs: &ObserverRealization) -> Vec<BlockDiff> {
        self.expected_blocks()
            .into_iter()
            .map(|(name, want)| {
                let d = match obs.block(&name) {
                    Some(got) if got.shape() == want.shape() => (got - &want).amax(),
                    _ => f64::INFINITY,
                };
                BlockDiff {
                    passed: d <= PRINT_TOL,
                    name,
                    max_abs_diff: d,
                }
            })
            .collect()
    }
}

pub fn load(name: &str) -> Result<Fixture> {
    let text = source(name).ok_or_else(|| {
        Error::InvalidInput(format!("unknown fixture {name}; known: {}", NAMES.join(", ")))
    })?;
    Ok(serde_json::from_str(text)?)
}

pub fn all() -> Result<Vec<Fixture>> {
    NAMES.iter().map(|n| load(n)).collect()
}

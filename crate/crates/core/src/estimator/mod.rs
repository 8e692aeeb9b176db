//! Centered-treatment least squares with participant-clustered standard errors.
//!
//! The regression is `Y ~ 1 + controls + (A - p) + (A - p) x moderators` over
//! available rows with an outcome. Randomization probabilities are constant
//! within a component, so every row carries unit weight.

pub mod linalg;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_traits::{Float, FromPrimitive};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{ComponentId, ParticipantId};
use crate::pipeline::{AnalysisRow, MissingnessCode};
use linalg::{Matrix, Qr};

/// Rank decisions are made relative to the largest pivot.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub const INTERCEPT: &str = "intercept";
pub const TREATMENT: &str = "treatment";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectSpec {
    pub component_id: ComponentId,
    /// Label of the imputation the rows carry; informational.
    pub variant: String,
    pub controls: Vec<String>,
    pub moderators: Vec<String>,
    /// Restrict to `start <= day_index < end`.
    pub day_range: Option<(u32, u32)>,
}

impl EffectSpec {
    pub fn main_effect(component: &str) -> Self {
        EffectSpec {
            component_id: ComponentId::new(component),
            variant: "zero".into(),
            controls: Vec::new(),
            moderators: Vec::new(),
            day_range: None,
        }
    }

    pub fn with_moderators(mut self, m: &[&str]) -> Self {
        self.moderators = m.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_controls(mut self, c: &[&str]) -> Self {
        self.controls = c.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn days(mut self, start: u32, end: u32) -> Self {
        self.day_range = Some((start, end));
        self
    }

    /// Coefficient names in design-matrix order.
    pub fn terms(&self) -> Vec<String> {
        let mut t = vec![INTERCEPT.to_string()];
        t.extend(self.controls.iter().cloned());
        t.push(TREATMENT.to_string());
        t.extend(self.moderators.iter().map(|m| format!("{TREATMENT}:{m}")));
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Term<T> {
    pub name: String,
    pub coefficient: T,
    pub std_error: T,
    pub t_stat: T,
    /// Two-sided, Student t with (clusters - 1) degrees of freedom.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EffectEstimate<T> {
    pub spec: EffectSpec,
    pub terms: Vec<Term<T>>,
    pub rows_used: usize,
    pub clusters: usize,
    /// Rows of the component left out, by reason.
    pub excluded: BTreeMap<String, usize>,
}

impl<T: Float> EffectEstimate<T> {
    pub fn term(&self, name: &str) -> Option<&Term<T>> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// The (A - p) coefficient.
    pub fn main_effect(&self) -> &Term<T> {
        self.term(TREATMENT).expect("treatment term is always present")
    }

    pub fn to_table(&self) -> String
    where
        T: std::fmt::Display,
    {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "component {}  variant {}  rows {}  participants {}",
            self.spec.component_id, self.spec.variant, self.rows_used, self.clusters
        );
        let _ = writeln!(s, "{:<28} {:>12} {:>12} {:>9} {:>9}", "term", "estimate", "std.err", "t", "p");
        for t in &self.terms {
            let _ = writeln!(
                s,
                "{:<28} {:>12.4} {:>12.4} {:>9.3} {:>9.4}",
                t.name, t.coefficient, t.std_error, t.t_stat, t.p_value
            );
        }
        for (k, v) in &self.excluded {
            let _ = writeln!(s, "excluded {k}: {v}");
        }
        s
    }
}

fn exclusion(row: &AnalysisRow, spec: &EffectSpec) -> Option<String> {
    if let Some((a, b)) = spec.day_range {
        if row.day_index < a || row.day_index >= b {
            return Some("OUTSIDE_DAY_RANGE".into());
        }
    }
    if row.travel_excluded {
        return Some(MissingnessCode::TravelExcluded.as_str().into());
    }
    if !row.available || row.treatment.is_none() {
        return Some(MissingnessCode::Unavailable.as_str().into());
    }
    if row.proximal_outcome.is_none() {
        let code = row.codes.get("proximal_outcome").map_or("MISSING", |c| c.as_str());
        return Some(format!("OUTCOME_{code}"));
    }
    for name in spec.controls.iter().chain(&spec.moderators) {
        if row.covariate(name).is_none() {
            return Some(format!("COVARIATE_{name}"));
        }
    }
    None
}

fn cast<T: FromPrimitive>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

pub fn estimate(rows: &[AnalysisRow], spec: &EffectSpec) -> Result<EffectEstimate<f64>> {
    estimate_with::<f64>(rows, spec)
}

/// Least squares of outcome on `[1, controls, (A-p), (A-p) x moderators]`.
pub fn estimate_with<T: Float + FromPrimitive>(rows: &[AnalysisRow], spec: &EffectSpec) -> Result<EffectEstimate<T>> {
    let names = spec.terms();
    let mut excluded = BTreeMap::new();
    let mut design = Vec::new();
    let mut y = Vec::new();
    let mut cluster_of = Vec::new();
    for row in rows.iter().filter(|r| r.component_id == spec.component_id) {
        if let Some(reason) = exclusion(row, spec) {
            *excluded.entry(reason).or_insert(0) += 1;
            continue;
        }
        let a = f64::from(row.treatment.expect("checked")) - row.probability.as_f64();
        let mut x = vec![T::one()];
        x.extend(spec.controls.iter().map(|c| cast::<T>(row.covariate(c).expect("checked"))));
        x.push(cast(a));
        x.extend(spec.moderators.iter().map(|m| cast::<T>(a * row.covariate(m).expect("checked"))));
        design.push(x);
        y.push(cast::<T>(row.proximal_outcome.expect("checked") as f64));
        cluster_of.push(row.participant_id);
    }
    let n = y.len();
    let k = names.len();
    if n == 0 {
        return Err(Error::NoRows);
    }
    let mut clusters: BTreeMap<ParticipantId, Vec<usize>> = BTreeMap::new();
    for (i, p) in cluster_of.iter().enumerate() {
        clusters.entry(*p).or_default().push(i);
    }
    let g = clusters.len();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let x = Matrix::from_rows(&design);
    let qr = Qr::new(&x, cast(RANK_TOLERANCE));
    if qr.rank < k || n <= k {
        let mut columns: Vec<String> = qr.dependent_columns().into_iter().map(|j| names[j].clone()).collect();
        if columns.is_empty() {
            columns.push(format!("{n} rows for {k} columns"));
        }
        return Err(Error::RankDeficient { columns });
    }
    let beta = qr.solve(&y);
    let bread = qr.xtx_inverse();

    // Meat: sum over participants of (X_g' e_g)(X_g' e_g)'.
    let resid: Vec<T> = (0..n)
        .map(|i| y[i] - (0..k).fold(T::zero(), |acc, j| acc + x[(i, j)] * beta[j]))
        .collect();
    let mut meat = Matrix::zeros(k, k);
    for idx in clusters.values() {
        let score: Vec<T> = (0..k)
            .map(|j| idx.iter().fold(T::zero(), |acc, &i| acc + x[(i, j)] * resid[i]))
            .collect();
        for a in 0..k {
            for b in 0..k {
                meat[(a, b)] = meat[(a, b)] + score[a] * score[b];
            }
        }
    }
    // Small-sample factor G/(G-1) * (n-1)/(n-k).
    let scale: T = cast::<T>(g as f64 / (g as f64 - 1.0)) * cast((n as f64 - 1.0) / (n as f64 - k as f64));
    let df = (g - 1) as f64;
    let t_dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::validation("clusters", e.to_string()))?;
    let terms = (0..k)
        .map(|j| {
            let mut var = T::zero();
            for a in 0..k {
                for b in 0..k {
                    var = var + bread[(j, a)] * meat[(a, b)] * bread[(b, j)];
                }
            }
            let se = (var * scale).sqrt();
            let t = beta[j] / se;
            let tf = t.to_f64().unwrap_or(f64::NAN);
            Term {
                name: names[j].clone(),
                coefficient: beta[j],
                std_error: se,
                t_stat: t,
                p_value: if tf.is_finite() { 2.0 * t_dist.sf(tf.abs()) } else { f64::NAN },
            }
        })
        .collect();
    Ok(EffectEstimate {
        spec: spec.clone(),
        terms,
        rows_used: n,
        clusters: g,
        excluded,
    })
}

/// Per-moderator interaction estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModerationReport {
    pub estimate: EffectEstimate<f64>,
    pub moderators: Vec<Term<f64>>,
}

pub fn moderation_report(rows: &[AnalysisRow], spec: &EffectSpec) -> Result<ModerationReport> {
    if spec.moderators.is_empty() {
        return Err(Error::validation("moderators", "a moderation report needs at least one moderator"));
    }
    let estimate = estimate(rows, spec)?;
    let moderators = estimate
        .terms
        .iter()
        .filter(|t| t.name.starts_with(&format!("{TREATMENT}:")))
        .cloned()
        .collect();
    Ok(ModerationReport { estimate, moderators })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sensitivity {
    pub zero: EffectEstimate<f64>,
    pub redundant: EffectEstimate<f64>,
    /// Redundant minus zero, per term.
    pub deltas: Vec<(String, f64)>,
    /// Rows of the component whose outcome or its source differs.
    pub differing_rows: usize,
}

pub fn sensitivity_compare(
    rows_zero: &[AnalysisRow],
    rows_redundant: &[AnalysisRow],
    spec: &EffectSpec,
) -> Result<Sensitivity> {
    if rows_zero.len() != rows_redundant.len() {
        return Err(Error::validation("rows", "imputation variants have different row counts"));
    }
    let mut zs = spec.clone();
    zs.variant = "zero".into();
    let mut rs = spec.clone();
    rs.variant = "redundant".into();
    let zero = estimate(rows_zero, &zs)?;
    let redundant = estimate(rows_redundant, &rs)?;
    let deltas = zero
        .terms
        .iter()
        .zip(&redundant.terms)
        .map(|(a, b)| (a.name.clone(), b.coefficient - a.coefficient))
        .collect();
    let differing_rows = rows_zero
        .iter()
        .zip(rows_redundant)
        .filter(|(a, b)| {
            a.component_id == spec.component_id
                && (a.proximal_outcome != b.proximal_outcome || a.outcome_source != b.outcome_source)
        })
        .count();
    Ok(Sensitivity {
        zero,
        redundant,
        deltas,
        differing_rows,
    })
}

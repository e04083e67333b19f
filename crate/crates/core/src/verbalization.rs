//! A-posteriori verbalization: cut a trajectory where ε enters a new cell,
//! and fit the recurrence `ω_n = Ω(ω_{n−1}, v_n; …)` on the result.

use std::fmt;
use std::sync::Arc;

use crate::dialogue::{DialogueTranscript, WindowFunctionals};
use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone)]
pub struct Cell {
    pub label: String,
    predicate: Arc<dyn Fn(&[f64]) -> bool + Send + Sync>,
}

impl fmt::Debug for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cell").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Cell {
    pub fn new<F>(label: impl Into<String>, predicate: F) -> Self
    where
        F: Fn(&[f64]) -> bool + Send + Sync + 'static,
    {
        Cell {
            label: label.into(),
            predicate: Arc::new(predicate),
        }
    }

    pub fn contains(&self, eps: &[f64]) -> bool {
        (self.predicate)(eps)
    }
}

/// Labeled cells partitioning the reachable part of ε-space.
#[derive(Clone, Debug)]
pub struct CellComplex {
    pub dim: usize,
    pub cells: Vec<Cell>,
    /// A flip into a new cell counts only if every axis probe at distance
    /// `hysteresis` around ε also lies in that cell.
    pub hysteresis: f64,
}

impl CellComplex {
    pub fn new(dim: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::contract("cell complex has no cells"));
        }
        Ok(CellComplex {
            dim,
            cells,
            hysteresis: 0.0,
        })
    }

    pub fn with_hysteresis(mut self, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::contract(format!("hysteresis margin must be finite and ≥ 0, got {delta}")));
        }
        self.hysteresis = delta;
        Ok(self)
    }

    /// Index of the unique cell containing `eps`.
    pub fn locate(&self, t: f64, eps: &[f64]) -> Result<usize> {
        if eps.len() != self.dim {
            return Err(Error::contract(format!(
                "cell complex is {}-dimensional, ε sample at t={t} has {} components",
                self.dim,
                eps.len()
            )));
        }
        let mut hits = self.cells.iter().enumerate().filter(|(_, c)| c.contains(eps)).map(|(i, _)| i);
        match (hits.next(), hits.next()) {
            (Some(i), None) => Ok(i),
            (None, _) => Err(Error::validation(
                "cells",
                format!("ε = {eps:?} at t = {t} lies in no cell"),
            )),
            (Some(i), Some(j)) => Err(Error::validation(
                "cells",
                format!(
                    "ε = {eps:?} at t = {t} lies in both `{}` and `{}`",
                    self.cells[i].label, self.cells[j].label
                ),
            )),
        }
    }

    /// Effective label at a node given the label in force before it.
    pub(crate) fn classify(&self, t: f64, eps: &[f64], current: Option<usize>) -> Result<usize> {
        let raw = self.locate(t, eps)?;
        let Some(cur) = current else { return Ok(raw) };
        if raw == cur || self.hysteresis == 0.0 {
            return Ok(raw);
        }
        let cell = &self.cells[raw];
        let mut probe = eps.to_vec();
        for j in 0..eps.len() {
            for s in [self.hysteresis, -self.hysteresis] {
                probe[j] = eps[j] + s;
                if !cell.contains(&probe) {
                    return Ok(cur);
                }
            }
            probe[j] = eps[j];
        }
        Ok(raw)
    }
}

/// Window frame produced by a cell segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Frame nodes: 0, every node whose label differs from its predecessor, N.
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    /// Effective cell index per node.
    pub labels: Vec<usize>,
}

impl Segmentation {
    pub fn interior(&self) -> &[f64] {
        let n = self.times.len();
        if n <= 2 {
            &[]
        } else {
            &self.times[1..n - 1]
        }
    }
}

/// Breakpoints where the cell label of ε changes between consecutive nodes.
pub fn segment_by_cells(times: &[f64], eps: &[Vec<f64>], complex: &CellComplex) -> Result<Segmentation> {
    if times.is_empty() || times.len() != eps.len() {
        return Err(Error::contract(format!(
            "need equal nonempty time and ε streams, got {} and {}",
            times.len(),
            eps.len()
        )));
    }
    let mut labels = Vec::with_capacity(times.len());
    let mut nodes = vec![0];
    let mut current = None;
    for (k, (t, e)) in times.iter().zip(eps).enumerate() {
        let label = complex.classify(*t, e, current)?;
        if current.is_some_and(|c| c != label) {
            nodes.push(k);
        }
        current = Some(label);
        labels.push(label);
    }
    let last = times.len() - 1;
    if *nodes.last().unwrap() != last {
        nodes.push(last);
    }
    Ok(Segmentation {
        times: nodes.iter().map(|&k| times[k]).collect(),
        nodes,
        labels,
    })
}

/// Transcript of a finished trajectory over its cell-transition windows.
pub fn verbalize_trajectory(traj: &Trajectory, complex: &CellComplex, fs: &WindowFunctionals) -> Result<DialogueTranscript> {
    let seg = segment_by_cells(&traj.times, &traj.eps, complex)?;
    if seg.nodes.len() < 2 {
        return Err(Error::contract("trajectory has a single node; nothing to verbalize"));
    }
    DialogueTranscript::from_nodes(traj, fs, &seg.nodes)
}

/// A scalar regressor built from `(ω_{n−1}, v_n, s_n)`.
#[derive(Clone)]
pub struct Feature {
    pub name: String,
    f: Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Feature").field("name", &self.name).finish_non_exhaustive()
    }
}

impl Feature {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        Feature {
            name: name.into(),
            f: Arc::new(f),
        }
    }
}

#[derive(Clone, Debug)]
pub enum RecurrenceFamily {
    /// `ω_n = A ω_{n−1} + B v_n [+ D s_n] [+ c]`.
    Affine { intercept: bool, use_summary: bool },
    /// `ω_n = Σ_j c_j f_j(ω_{n−1}, v_n, s_n)`, per ω component.
    Features(Vec<Feature>),
}

impl RecurrenceFamily {
    pub fn affine() -> Self {
        RecurrenceFamily::Affine {
            intercept: true,
            use_summary: false,
        }
    }

    fn regressors(&self, omega_prev: &[f64], v: &[f64], s: &[f64]) -> Vec<f64> {
        match self {
            RecurrenceFamily::Affine { intercept, use_summary } => {
                let mut r = omega_prev.to_vec();
                r.extend_from_slice(v);
                if *use_summary {
                    r.extend_from_slice(s);
                }
                if *intercept {
                    r.push(1.0);
                }
                r
            }
            RecurrenceFamily::Features(fs) => fs.iter().map(|f| (f.f)(omega_prev, v, s)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrenceModel {
    pub family: RecurrenceFamily,
    /// `coefficients[component][regressor]`; for the affine family the
    /// regressor order is ω_{n−1}, v_n, summary, intercept.
    pub coefficients: Vec<Vec<f64>>,
    /// `residuals[step][component]` for steps n = 1..M−1.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl RecurrenceModel {
    pub fn predict(&self, omega_prev: &[f64], v: &[f64], summary: &[f64]) -> Vec<f64> {
        let r = self.family.regressors(omega_prev, v, summary);
        self.coefficients.iter().map(|c| linalg::dot(c, &r)).collect()
    }
}

/// Least-squares fit of the recurrence over consecutive transcript windows.
/// `summaries`, when given, holds one window summary of φ per window.
pub fn fit_recurrence(
    transcript: &DialogueTranscript,
    summaries: Option<&[Vec<f64>]>,
    family: &RecurrenceFamily,
) -> Result<RecurrenceModel> {
    let m = transcript.len();
    if let Some(s) = summaries {
        if s.len() != m {
            return Err(Error::contract(format!("{} window summaries for {m} windows", s.len())));
        }
    }
    if let RecurrenceFamily::Affine { use_summary: true, .. } = family {
        if summaries.is_none() {
            return Err(Error::contract("affine family with summary needs window summaries"));
        }
    }
    let empty: Vec<f64> = Vec::new();
    let summary = |n: usize| summaries.map_or(&empty, |s| &s[n]);

    let mut rows = Vec::with_capacity(m.saturating_sub(1));
    let mut targets = Vec::with_capacity(m.saturating_sub(1));
    for n in 1..m {
        rows.push(family.regressors(&transcript.omega[n - 1], &transcript.v[n], summary(n)));
        targets.push(transcript.omega[n].clone());
    }
    let params = match rows.first() {
        Some(r) => r.len(),
        None => family.regressors(&[], &[], &[]).len(),
    };
    if m < params + 1 || m < 2 {
        return Err(Error::contract(format!(
            "transcript has {m} windows; the family has {params} parameters and needs at least {}",
            (params + 1).max(2)
        )));
    }
    let ls = linalg::solve(&rows, &targets);
    Ok(RecurrenceModel {
        family: family.clone(),
        max_residual: ls.max_abs_residual(),
        rank_deficient: !ls.full_rank(),
        rank: ls.rank,
        coefficients: ls.coef,
        residuals: ls.residuals,
    })
}

//! Quantitative read-out of a change map: ternary maps, volume change,
//! modified RANO classes and voxelwise ROC analysis.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::volume::{Mask, Shape, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => l1 == 1,
                        Connectivity::Eighteen => l1 == 1 || l1 == 2,
                        Connectivity::TwentySix => l1 >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TernaryParams {
    /// Values strictly above this become +1.
    pub tau_pos: f64,
    /// Values strictly below this become -1.
    pub tau_neg: f64,
    /// Width of the zeroed border band, in voxels.
    pub crop: usize,
    /// Same-sign components of at most this many voxels are removed.
    pub min_component: usize,
    pub connectivity: Connectivity,
    pub rano: RanoThresholds,
}

impl Default for TernaryParams {
    fn default() -> Self {
        Self { tau_pos: 0.15, tau_neg: -0.15, crop: 10, min_component: 30, connectivity: Connectivity::Six, rano: RanoThresholds::default() }
    }
}

impl TernaryParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.tau_neg < 0.0 && 0.0 < self.tau_pos) {
            return Err(CoreError::Invalid(format!(
                "thresholds must satisfy tau_neg < 0 < tau_pos, got ({}, {})",
                self.tau_neg, self.tau_pos
            )));
        }
        self.rano.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernaryMap {
    shape: Shape,
    data: Vec<i8>,
    pub params: TernaryParams,
}

impl TernaryMap {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn count(&self, value: i8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }
}

/// Connected components of the voxels where `member` holds, as lists of flat indices.
pub fn components(shape: Shape, member: impl Fn(usize) -> bool, conn: Connectivity) -> Vec<Vec<usize>> {
    let offsets = conn.offsets();
    let mut seen = vec![false; shape.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..shape.len() {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let c = shape.coords(i);
            for o in &offsets {
                let n: [i64; 3] = std::array::from_fn(|a| c[a] as i64 + o[a]);
                if (0..3).any(|a| n[a] < 0 || n[a] >= shape.0[a] as i64) {
                    continue;
                }
                let j = shape.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if !seen[j] && member(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Crop the border, threshold strictly, then drop small same-sign components.
pub fn ternarize(map: &Volume, params: &TernaryParams) -> Result<TernaryMap, CoreError> {
    params.validate()?;
    let shape = map.shape();
    if shape.0.iter().any(|&n| 2 * params.crop >= n) {
        return Err(CoreError::Invalid(format!("crop {} leaves nothing of grid {shape}", params.crop)));
    }
    let crop = params.crop;
    let inside = |c: [usize; 3]| (0..3).all(|a| c[a] >= crop && c[a] < shape.0[a] - crop);
    // thresholds are rounded to the map's precision so a stored 0.15 counts as equal to 0.15
    let (tau_pos, tau_neg) = (params.tau_pos as f32, params.tau_neg as f32);
    let mut data: Vec<i8> = map
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !inside(shape.coords(i)) {
                0
            } else if v > tau_pos {
                1
            } else if v < tau_neg {
                -1
            } else {
                0
            }
        })
        .collect();
    for sign in [1i8, -1] {
        let comps = components(shape, |i| data[i] == sign, params.connectivity);
        for comp in comps.into_iter().filter(|c| c.len() <= params.min_component) {
            for i in comp {
                data[i] = 0;
            }
        }
    }
    Ok(TernaryMap { shape, data, params: *params })
}

/// Signed voxel count: growth minus reduction.
pub fn volume_change(t: &TernaryMap) -> i64 {
    t.data.iter().map(|&v| v as i64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RanoCategory {
    Response,
    Stable,
    Progression,
}

impl RanoCategory {
    pub const ALL: [RanoCategory; 3] = [RanoCategory::Response, RanoCategory::Stable, RanoCategory::Progression];

    pub fn as_str(self) -> &'static str {
        match self {
            RanoCategory::Response => "response",
            RanoCategory::Stable => "stable",
            RanoCategory::Progression => "progression",
        }
    }
}

impl std::fmt::Display for RanoCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RanoAssessment {
    pub v1: u64,
    pub v2: i64,
    pub relative_change: f64,
    pub category: RanoCategory,
}

/// Volume change thresholds of the RANO classes, in whole percent of the
/// baseline volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RanoThresholds {
    /// Response when the volume drops by strictly more than this.
    pub response_drop_pct: u32,
    /// Progression when the volume grows by at least this.
    pub progression_growth_pct: u32,
}

impl Default for RanoThresholds {
    fn default() -> Self {
        Self { response_drop_pct: 50, progression_growth_pct: 25 }
    }
}

impl RanoThresholds {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.response_drop_pct > 100 {
            return Err(CoreError::Invalid(format!(
                "response_drop_pct must be at most 100, got {}",
                self.response_drop_pct
            )));
        }
        Ok(())
    }

    pub fn classify(&self, v1: u64, v2: i64) -> Result<RanoAssessment, CoreError> {
        if v1 == 0 {
            return Err(CoreError::UndefinedBaseline);
        }
        let (a, b) = (v1 as i128, v2 as i128);
        let category = if 100 * (a - b) > self.response_drop_pct as i128 * a {
            RanoCategory::Response
        } else if 100 * (b - a) >= self.progression_growth_pct as i128 * a {
            RanoCategory::Progression
        } else {
            RanoCategory::Stable
        };
        Ok(RanoAssessment { v1, v2, relative_change: (v2 as f64 - v1 as f64) / v1 as f64, category })
    }
}

/// Volume-only RANO with the default thresholds: response when the volume
/// shrinks by more than half, progression when it grows by a quarter or more.
pub fn classify_rano(v1: u64, v2: i64) -> Result<RanoAssessment, CoreError> {
    RanoThresholds::default().classify(v1, v2)
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted as
/// one half. `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // twice the count of (pos, neg) pairs with pos > neg, plus tied pairs once
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_u += 2 * pos as u128 * neg_below as u128 + pos as u128 * neg as u128;
        neg_below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// ROC points from the strictest threshold down, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Option<RocCurve> {
    let auc = auc(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        fpr.push(fp as f64 / n_neg as f64);
        tpr.push(tp as f64 / n_pos as f64);
        i = j;
    }
    Some(RocCurve { fpr, tpr, auc, positives: n_pos, negatives: n_neg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Growth voxels (in seg2, not seg1) scored by the map.
    pub growth: Option<RocCurve>,
    /// Reduction voxels (in seg1, not seg2) scored by the negated map.
    pub reduction: Option<RocCurve>,
    /// Both tasks' (score, label) pairs pooled.
    pub micro_auc: Option<f64>,
}

/// Voxelwise two-class ROC analysis. Voxels outside `brain` (when given) are ignored.
pub fn roc_analysis(map: &Volume, seg1: &Mask, seg2: &Mask, brain: Option<&Mask>) -> Result<RocResult, CoreError> {
    let shape = map.shape();
    for (name, m) in [("seg1", Some(seg1)), ("seg2", Some(seg2)), ("brain mask", brain)] {
        if let Some(m) = m {
            if m.shape() != shape {
                return Err(CoreError::Invalid(format!("{name} grid {} differs from map grid {shape}", m.shape())));
            }
        }
    }
    let mut g_scores = Vec::new();
    let mut g_labels = Vec::new();
    let mut r_scores = Vec::new();
    let mut r_labels = Vec::new();
    for i in 0..shape.len() {
        if brain.is_some_and(|b| !b.data()[i]) {
            continue;
        }
        let v = map.data()[i] as f64;
        let (a, b) = (seg1.data()[i], seg2.data()[i]);
        g_scores.push(v);
        g_labels.push(b && !a);
        r_scores.push(-v);
        r_labels.push(a && !b);
    }
    let growth = roc_curve(&g_scores, &g_labels);
    let reduction = roc_curve(&r_scores, &r_labels);
    let micro_auc = if growth.is_none() && reduction.is_none() {
        None
    } else {
        g_scores.extend_from_slice(&r_scores);
        g_labels.extend_from_slice(&r_labels);
        auc(&g_scores, &g_labels)
    };
    Ok(RocResult { growth, reduction, micro_auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub roc: RocResult,
    pub volume_change: i64,
    pub predicted: Option<RanoAssessment>,
    pub truth: Option<RanoAssessment>,
    pub matches: Option<bool>,
    /// Why the RANO part could not be computed, if it could not.
    pub error: Option<String>,
    pub params: TernaryParams,
}

/// ROC metrics plus predicted and ground-truth RANO classes for one case.
pub fn evaluate_case(
    map: &Volume,
    seg1: &Mask,
    seg2: &Mask,
    brain: Option<&Mask>,
    params: &TernaryParams,
) -> Result<CaseReport, CoreError> {
    let roc = roc_analysis(map, seg1, seg2, brain)?;
    let change = volume_change(&ternarize(map, params)?);
    let v1 = seg1.count() as u64;
    let truth = params.rano.classify(v1, seg2.count() as i64);
    let predicted = params.rano.classify(v1, v1 as i64 + change);
    let (predicted, truth, error) = match (predicted, truth) {
        (Ok(p), Ok(t)) => (Some(p), Some(t), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };
    let matches = predicted.zip(truth).map(|(p, t)| p.category == t.category);
    Ok(CaseReport { roc, volume_change: change, predicted, truth, matches, error, params: *params })
}

/// Per-category RANO accuracy over a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: RanoCategory,
    pub cases: usize,
    pub correct: usize,
}

pub fn cohort_accuracy(reports: &[CaseReport]) -> Vec<CategoryAccuracy> {
    RanoCategory::ALL
        .iter()
        .map(|&category| {
            let of_cat: Vec<_> = reports.iter().filter(|r| r.truth.map(|t| t.category) == Some(category)).collect();
            CategoryAccuracy { category, cases: of_cat.len(), correct: of_cat.iter().filter(|r| r.matches == Some(true)).count() }
        })
        .collect()
}

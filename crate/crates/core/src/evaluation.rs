//! Tile-level metrics and the method comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::colorops::{histogram_specification, macenko_normalize, reinhard_normalize, ChannelHistograms, ChannelStats, StainMatrix};
use crate::data::{color_batch, ColorTile, Dataset, Label};
use crate::error::{Error, Result};
use crate::networks::{Classifier, Generator};
use crate::training::apply_sst_batch;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Tumor).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Probability that a random tumor tile outscores a random normal tile, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from midranks; every quantity is a multiple of 1/2, so it is exact.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == Label::Tumor).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub warnings: Vec<String>,
}

/// Scores at or above `threshold` count as tumor predictions.
pub fn confusion_metrics(scores: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionMetrics> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, Label::Tumor) => tp += 1,
            (true, Label::Normal) => fp += 1,
            (false, Label::Normal) => tn += 1,
            (false, Label::Tumor) => fn_ += 1,
        }
    }
    let mut warnings = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| {
        if den == 0 {
            warnings.push(format!("{name} undefined (no {name} denominator); reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    Ok(ConfusionMetrics { precision, recall, specificity, tp, fp, tn, fn_, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method_name: String,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub n_samples: usize,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A recoloring applied to every tile before classification.
pub trait TileTransform {
    fn name(&self) -> &str;

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile>;

    fn apply_all(&self, tiles: &[ColorTile]) -> Result<Vec<ColorTile>> {
        tiles.iter().map(|t| self.apply(t)).collect()
    }
}

pub struct Identity;

impl TileTransform for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile> {
        Ok(tile.clone())
    }
}

pub struct SstTransform(pub Generator<f32>);

impl TileTransform for SstTransform {
    fn name(&self) -> &str {
        "sst"
    }

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile> {
        Ok(apply_sst_batch(&self.0, std::slice::from_ref(tile))?.remove(0))
    }

    fn apply_all(&self, tiles: &[ColorTile]) -> Result<Vec<ColorTile>> {
        apply_sst_batch(&self.0, tiles)
    }
}

pub struct ReinhardTransform(pub ChannelStats);

impl TileTransform for ReinhardTransform {
    fn name(&self) -> &str {
        "reinhard"
    }

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile> {
        reinhard_normalize(tile, &self.0)
    }
}

pub struct MacenkoTransform(pub StainMatrix);

impl TileTransform for MacenkoTransform {
    fn name(&self) -> &str {
        "macenko"
    }

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile> {
        macenko_normalize(tile, &self.0)
    }
}

pub struct HistogramTransform(pub ChannelHistograms);

impl TileTransform for HistogramTransform {
    fn name(&self) -> &str {
        "hs"
    }

    fn apply(&self, tile: &ColorTile) -> Result<ColorTile> {
        histogram_specification(tile, &self.0)
    }
}

/// Tumor probabilities of `tiles`.
pub fn score_tiles(classifier: &Classifier<f32>, tiles: &[ColorTile]) -> Result<Vec<f64>> {
    if let Some(t) = tiles.iter().find(|t| t.d() != classifier.config().d) {
        return Err(Error::ShapeMismatch(format!(
            "tile side {} does not match the classifier's {}",
            t.d(),
            classifier.config().d
        )));
    }
    if tiles.is_empty() {
        return Ok(Vec::new());
    }
    Ok(classifier.predict(&color_batch(tiles))?.into_iter().map(f64::from).collect())
}

/// Scores `dataset` after `transfer` (identity when `None`) with the frozen classifier.
pub fn evaluate(
    classifier: &Classifier<f32>,
    dataset: &Dataset,
    transfer: Option<&dyn TileTransform>,
    threshold: f64,
) -> Result<MetricsReport> {
    let transfer = transfer.unwrap_or(&Identity);
    let labels = dataset.labels();
    if !labels.contains(&Label::Tumor) || !labels.contains(&Label::Normal) {
        return Err(Error::SingleClass);
    }
    let tiles: Vec<ColorTile> = dataset.tiles().iter().map(|t| t.tile.clone()).collect();
    let transformed = transfer.apply_all(&tiles)?;
    let scores = score_tiles(classifier, &transformed)?;
    let auc = roc_auc(&scores, &labels)?;
    let cm = confusion_metrics(&scores, &labels, threshold)?;
    Ok(MetricsReport {
        method_name: transfer.name().to_string(),
        auc,
        precision: cm.precision,
        recall: cm.recall,
        specificity: cm.specificity,
        n_samples: scores.len(),
        threshold,
        warnings: cm.warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportRow {
    Metrics(MetricsReport),
    Failed { method_name: String, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn metrics(&self, method: &str) -> Option<&MetricsReport> {
        self.rows.iter().find_map(|r| match r {
            ReportRow::Metrics(m) if m.method_name == method => Some(m),
            _ => None,
        })
    }

    /// Rank (0 = best) of `method` among the successful rows.
    pub fn rank_of(&self, method: &str) -> Option<usize> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                ReportRow::Metrics(m) => Some(m.method_name.as_str()),
                ReportRow::Failed { .. } => None,
            })
            .position(|m| m == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("Tile-level metrics, sorted by AUC\n");
        let _ = writeln!(out, "{:<12} {:>7} {:>9} {:>7} {:>11} {:>7}", "method", "AUC", "precision", "recall", "specificity", "n");
        for row in &self.rows {
            match row {
                ReportRow::Metrics(m) => {
                    let _ = writeln!(
                        out,
                        "{:<12} {:>7.4} {:>9.4} {:>7.4} {:>11.4} {:>7}",
                        m.method_name, m.auc, m.precision, m.recall, m.specificity, m.n_samples
                    );
                }
                ReportRow::Failed { method_name, error } => {
                    let _ = writeln!(out, "{method_name:<12} error: {error}");
                }
            }
        }
        out
    }
}

/// One row per method; failures become annotations instead of aborting.
pub fn comparison_report(
    classifier: &Classifier<f32>,
    dataset: &Dataset,
    methods: &[&dyn TileTransform],
    threshold: f64,
) -> ComparisonReport {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for m in methods {
        match evaluate(classifier, dataset, Some(*m), threshold) {
            Ok(r) => ok.push(r),
            Err(e) => failed.push(ReportRow::Failed { method_name: m.name().to_string(), error: e.to_string() }),
        }
    }
    ok.sort_by(|a, b| b.auc.total_cmp(&a.auc));
    let mut rows: Vec<ReportRow> = ok.into_iter().map(ReportRow::Metrics).collect();
    rows.extend(failed);
    ComparisonReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Normal as N, Tumor as T};

    fn pairwise(scores: &[f64], labels: &[Label]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == T && lj == N {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_fixtures() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(roc_auc(&s, &[T, T, N, N]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[T, N, T, N]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.4; 6], &[T, N, T, N, N, T]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&s, &[T, T, T, T]), Err(Error::SingleClass)));
        assert!(roc_auc(&s, &[T, N]).is_err());
    }

    #[test]
    fn confusion_fixtures() {
        let cm = confusion_metrics(&[0.9, 0.4, 0.6, 0.1], &[T, T, N, N], 0.5).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (1, 1, 1, 1));
        assert_eq!((cm.precision, cm.recall, cm.specificity), (0.5, 0.5, 0.5));
        let perfect = confusion_metrics(&[0.9, 0.8, 0.2, 0.1], &[T, T, N, N], 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.specificity), (1.0, 1.0, 1.0));
        assert!(perfect.warnings.is_empty());
        let none = confusion_metrics(&[0.1, 0.2, 0.3], &[T, N, T], 0.5).unwrap();
        assert_eq!(none.precision, 0.0);
        assert_eq!(none.warnings.len(), 1);
    }

    #[test]
    fn report_sorting_and_failures() {
        let m = |name: &str, auc: f64| MetricsReport {
            method_name: name.into(),
            auc,
            precision: 0.0,
            recall: 0.0,
            specificity: 0.0,
            n_samples: 4,
            threshold: 0.5,
            warnings: vec![],
        };
        let report = ComparisonReport {
            rows: vec![
                ReportRow::Metrics(m("a", 0.9)),
                ReportRow::Metrics(m("b", 0.7)),
                ReportRow::Failed { method_name: "c".into(), error: "boom".into() },
            ],
        };
        assert_eq!(report.rank_of("b"), Some(1));
        assert_eq!(report.rank_of("c"), None);
        let table = report.to_table();
        assert!(table.contains("error: boom"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json.as_array().unwrap().len(), 3);
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..12, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 11.0).collect()),
                prop::collection::vec(any::<bool>(), n).prop_map(|v| v.into_iter().map(|b| if b { T } else { N }).collect()),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle((scores, labels) in scored_labels()) {
            prop_assume!(labels.contains(&T) && labels.contains(&N));
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
            prop_assume!(labels.contains(&T) && labels.contains(&N));
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn auc_complement_symmetry((scores, labels) in scored_labels()) {
            prop_assume!(labels.contains(&T) && labels.contains(&N));
            let flipped: Vec<Label> = labels.iter().map(|l| l.flipped()).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_and_specificity_extremes((scores, labels) in scored_labels()) {
            prop_assume!(labels.contains(&T) && labels.contains(&N));
            prop_assert_eq!(confusion_metrics(&scores, &labels, 0.0).unwrap().recall, 1.0);
            prop_assert_eq!(confusion_metrics(&scores, &labels, 1.5).unwrap().specificity, 1.0);
        }
    }
}

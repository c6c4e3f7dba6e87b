//! Group-wise accuracy, worst-group / average-group summaries and report rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Group, GroupedDataset};
use crate::error::{Error, Result};
use crate::model::{forward, predict, InterventionSpec, ModelParams};
use crate::steering::CandidateVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per group id `y·A + a`.
    pub group_accuracy: Vec<f64>,
    pub group_counts: Vec<usize>,
    pub group_correct: Vec<usize>,
    /// Worst-group accuracy.
    pub wga: f64,
    /// Unweighted mean of group accuracies.
    pub aga: f64,
    /// Sample-weighted accuracy.
    pub overall: f64,
    pub n_classes: usize,
    pub n_confounders: usize,
    pub intervention: String,
    pub dataset_digest: String,
}

impl EvalReport {
    pub fn from_tallies(
        group_correct: Vec<usize>,
        group_counts: Vec<usize>,
        n_classes: usize,
        n_confounders: usize,
        intervention: impl Into<String>,
        dataset_digest: impl Into<String>,
    ) -> Result<Self> {
        if group_counts.len() != n_classes * n_confounders
            || group_correct.len() != group_counts.len()
        {
            return Err(Error::Shape(format!(
                "expected {} group tallies",
                n_classes * n_confounders
            )));
        }
        if let Some(g) = group_counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!(
                "group {} has no examples",
                Group::from_id(g, n_confounders)
            )));
        }
        let group_accuracy: Vec<f64> = group_correct
            .iter()
            .zip(&group_counts)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect();
        let wga = group_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        let aga = group_accuracy.iter().sum::<f64>() / group_accuracy.len() as f64;
        let overall =
            group_correct.iter().sum::<usize>() as f64 / group_counts.iter().sum::<usize>() as f64;
        Ok(Self {
            group_accuracy,
            group_counts,
            group_correct,
            wga,
            aga,
            overall,
            n_classes,
            n_confounders,
            intervention: intervention.into(),
            dataset_digest: dataset_digest.into(),
        })
    }

    pub fn max_group_accuracy(&self) -> f64 {
        self.group_accuracy.iter().copied().fold(0.0, f64::max)
    }

    pub fn accuracy_of(&self, group: Group) -> f64 {
        self.group_accuracy[(group.y as usize) * self.n_confounders + group.a as usize]
    }

    /// One Table-1-style row with percentages.
    pub fn table_row(&self, dataset: &str, method: &str) -> TableRow {
        TableRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            worst: Some(100.0 * self.wga),
            average: Some(100.0 * self.aga),
            overall: Some(100.0 * self.overall),
        }
    }

    /// Per-group breakdown followed by the summary metrics.
    pub fn render(&self) -> String {
        let mut out = format!("intervention: {}\n", self.intervention);
        out.push_str(&format!("{:<14} {:>6} {:>9}\n", "group", "n", "accuracy"));
        for (g, (&acc, &n)) in self
            .group_accuracy
            .iter()
            .zip(&self.group_counts)
            .enumerate()
        {
            out.push_str(&format!(
                "{:<14} {:>6} {:>9.2}\n",
                Group::from_id(g, self.n_confounders).to_string(),
                n,
                100.0 * acc
            ));
        }
        out.push_str(&format!(
            "worst-group {:.2}  average-group {:.2}  overall {:.2}\n",
            100.0 * self.wga,
            100.0 * self.aga,
            100.0 * self.overall
        ));
        out
    }
}

/// Accuracy per `(class, confounder)` group under an intervention.
pub fn group_accuracies(
    params: &ModelParams<f32>,
    dataset: &GroupedDataset,
    intervention: &InterventionSpec,
) -> Result<EvalReport> {
    if let Some(g) = dataset.group_table.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "group {} has no examples in the evaluation set",
            Group::from_id(g, dataset.n_confounders)
        )));
    }
    let predictions: Vec<usize> = dataset
        .examples
        .par_iter()
        .map(|ex| forward(params, &ex.tokens, intervention, false).map(|(l, _)| predict(&l)))
        .collect::<Result<_>>()?;
    let mut correct = vec![0; dataset.n_groups()];
    for (ex, &pred) in dataset.examples.iter().zip(&predictions) {
        if pred == ex.y as usize {
            correct[ex.group as usize] += 1;
        }
    }
    EvalReport::from_tallies(
        correct,
        dataset.group_table.clone(),
        dataset.n_classes,
        dataset.n_confounders,
        intervention.describe(),
        dataset.digest(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub layer: usize,
    pub position: usize,
    pub wga: f64,
    pub aga: f64,
}

/// Index of the best entry: highest WGA, then highest AGA, then lowest layer.
pub fn best_entry(entries: &[ProfileEntry]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &entries[b];
                let better = e.wga > cur.wga
                    || (e.wga == cur.wga && e.aga > cur.aga)
                    || (e.wga == cur.wga && e.aga == cur.aga && e.layer < cur.layer);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub entries: Vec<ProfileEntry>,
}

impl LayerProfile {
    pub fn best(&self) -> Option<&ProfileEntry> {
        best_entry(&self.entries).map(|i| &self.entries[i])
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>5} {:>8} {:>7} {:>7}\n",
            "layer", "position", "worst", "average"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:>5} {:>8} {:>7.2} {:>7.2}\n",
                e.layer,
                e.position,
                100.0 * e.wga,
                100.0 * e.aga
            ));
        }
        out
    }
}

/// Evaluates single-direction ablation with each non-degenerate candidate, ordered by layer.
pub fn layer_profile(
    params: &ModelParams<f32>,
    candidates: &[CandidateVector],
    dataset: &GroupedDataset,
) -> Result<LayerProfile> {
    let mut usable: Vec<&CandidateVector> =
        candidates.iter().filter(|c| !c.is_degenerate()).collect();
    if usable.is_empty() {
        return Err(Error::Steering(
            "every candidate vector is degenerate".to_string(),
        ));
    }
    usable.sort_by_key(|c| (c.layer, c.position));
    let entries = usable
        .into_iter()
        .map(|c| {
            let spec = InterventionSpec::SingleGlobal {
                direction: c.direction.clone().expect("non-degenerate"),
            };
            let report = group_accuracies(params, dataset, &spec)?;
            Ok(ProfileEntry {
                layer: c.layer,
                position: c.position,
                wga: report.wga,
                aga: report.aga,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProfile { entries })
}

/// Metric deltas `steered − baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub wga: f64,
    pub aga: f64,
    pub overall: f64,
    pub per_group: Vec<f64>,
    pub baseline: String,
    pub steered: String,
}

impl DeltaReport {
    pub fn render(&self) -> String {
        format!(
            "{} -> {}: worst-group {:+.2}  average-group {:+.2}  overall {:+.2}\n",
            self.baseline,
            self.steered,
            100.0 * self.wga,
            100.0 * self.aga,
            100.0 * self.overall
        )
    }
}

pub fn compare(baseline: &EvalReport, steered: &EvalReport) -> Result<DeltaReport> {
    if baseline.dataset_digest != steered.dataset_digest {
        return Err(Error::Mismatch(format!(
            "reports were computed on different datasets ({} vs {})",
            baseline.dataset_digest, steered.dataset_digest
        )));
    }
    Ok(DeltaReport {
        wga: steered.wga - baseline.wga,
        aga: steered.aga - baseline.aga,
        overall: steered.overall - baseline.overall,
        per_group: steered
            .group_accuracy
            .iter()
            .zip(&baseline.group_accuracy)
            .map(|(s, b)| s - b)
            .collect(),
        baseline: baseline.intervention.clone(),
        steered: steered.intervention.clone(),
    })
}

/// A row of the comparison table; metric values are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub method: String,
    pub worst: Option<f64>,
    pub average: Option<f64>,
    pub overall: Option<f64>,
}

/// Aligned-column table with two-decimal metrics; missing values print as `-`.
pub fn render_table(rows: &[TableRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let header = ["Dataset", "Method", "Worst", "Average", "Overall"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.method.clone(),
                cell(r.worst),
                cell(r.average),
                cell(r.overall),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: [&str; 5]| {
        format!(
            "{:<w0$} | {:<w1$} | {:>w2$} | {:>w3$} | {:>w4$}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3],
            w4 = widths[4]
        )
    };
    let mut out = line(header);
    out.push_str(&format!(
        "{}\n",
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("-+-")
    ));
    for row in &body {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    out
}

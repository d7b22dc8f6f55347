//! Confusion matrices, mIoU and the multi-length summaries mmIoU and LDIoU.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeaError};

/// Pixel counts, rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self> {
        let k = counts.len();
        let mut cm = ConfusionMatrix::new(k);
        for (gt, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(TeaError::Shape(format!("confusion row {gt} has {} entries, expected {k}", row.len())));
            }
            cm.counts[gt * k..(gt + 1) * k].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: u32, pred: u32) -> Result<()> {
        let k = self.num_classes;
        if gt as usize >= k || pred as usize >= k {
            return Err(TeaError::Index(format!("class pair ({gt}, {pred}) outside {k} classes")));
        }
        self.counts[gt as usize * k + pred as usize] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, gt: &[u32], pred: &[u32]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(TeaError::Shape(format!("{} labels vs {} predictions", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g, p)?;
        }
        Ok(())
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(TeaError::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class, `None` when the class has zero union.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes with nonzero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(TeaError::InvalidInput("mIoU of an empty confusion matrix".into()));
    }
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Normalized reciprocal-length weights.
pub fn ldiou_weights(lengths: &[f64]) -> Result<Vec<f64>> {
    if lengths.is_empty() {
        return Err(TeaError::InvalidInput("no sequence lengths".into()));
    }
    if let Some(bad) = lengths.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(TeaError::InvalidInput(format!("sequence length {bad} must be positive")));
    }
    let inv: Vec<f64> = lengths.iter().map(|t| 1.0 / t).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / z).collect())
}

/// Length-decayed mIoU: per-ratio mIoU weighted by normalized reciprocal
/// sequence lengths.
pub fn ldiou(per_ratio_miou: &[f64], lengths: &[f64]) -> Result<f64> {
    if per_ratio_miou.len() != lengths.len() {
        return Err(TeaError::Shape(format!(
            "{} mIoU values vs {} lengths",
            per_ratio_miou.len(),
            lengths.len()
        )));
    }
    let w = ldiou_weights(lengths)?;
    Ok(w.iter().zip(per_ratio_miou).map(|(w, m)| w * m).sum())
}

pub fn mmiou(per_ratio_miou: &[f64]) -> Result<f64> {
    if per_ratio_miou.is_empty() {
        return Err(TeaError::InvalidInput("mmIoU of an empty list".into()));
    }
    Ok(per_ratio_miou.iter().sum::<f64>() / per_ratio_miou.len() as f64)
}

/// mIoU of one sliding evaluation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub length_ratio: f64,
    pub start_index: usize,
    pub length: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ratios: Vec<f64>,
    pub per_ratio_miou: Vec<f64>,
    pub mmiou: f64,
    pub ldiou: f64,
    #[serde(default)]
    pub sweep: Vec<SweepCell>,
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    ratio: f64,
    start_index: Option<usize>,
    length: Option<usize>,
    miou: f64,
}

impl EvalReport {
    /// Summarizes per-ratio mIoU, using the ratios themselves as lengths.
    pub fn from_per_ratio(ratios: Vec<f64>, per_ratio_miou: Vec<f64>) -> Result<Self> {
        let ld = ldiou(&per_ratio_miou, &ratios)?;
        let mm = mmiou(&per_ratio_miou)?;
        Ok(EvalReport {
            ratios,
            per_ratio_miou,
            mmiou: mm,
            ldiou: ld,
            sweep: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.len() != self.per_ratio_miou.len() {
            return Err(TeaError::Validation("ratios and per-ratio mIoU differ in length".into()));
        }
        if self.per_ratio_miou.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(TeaError::Validation("per-ratio mIoU outside [0, 1]".into()));
        }
        if self.ratios.is_empty() {
            return Ok(());
        }
        let ld = ldiou(&self.per_ratio_miou, &self.ratios)?;
        let mm = mmiou(&self.per_ratio_miou)?;
        if (ld - self.ldiou).abs() > 1e-9 || (mm - self.mmiou).abs() > 1e-9 {
            return Err(TeaError::Validation("summary metrics disagree with per-ratio mIoU".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| TeaError::InvalidInput(e.to_string()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| TeaError::parse(path, e))?;
        report.validate()?;
        Ok(report)
    }

    /// One row per ratio followed by one row per sweep cell.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| TeaError::InvalidInput(e.to_string());
        for (r, m) in self.ratios.iter().zip(&self.per_ratio_miou) {
            w.serialize(CsvRow {
                kind: "ratio",
                ratio: *r,
                start_index: None,
                length: None,
                miou: *m,
            })
            .map_err(err)?;
        }
        for cell in &self.sweep {
            w.serialize(CsvRow {
                kind: "sweep",
                ratio: cell.length_ratio,
                start_index: Some(cell.start_index),
                length: Some(cell.length),
                miou: cell.miou,
            })
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| TeaError::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Percentages laid out with one column per ratio plus the two summaries.
    pub fn render_table(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "model");
        for r in &self.ratios {
            let _ = write!(out, "{:>8}", format!("{:.0}%", r * 100.0));
        }
        let _ = writeln!(out, "{:>8}{:>8}", "LDIoU", "mmIoU");
        let _ = write!(out, "{label:<12}");
        for m in &self.per_ratio_miou {
            let _ = write!(out, "{:>8.2}", m * 100.0);
        }
        let _ = writeln!(out, "{:>8.2}{:>8.2}", self.ldiou * 100.0, self.mmiou * 100.0);
        if !self.sweep.is_empty() {
            let _ = writeln!(out, "\n{:>8}{:>8}{:>8}{:>8}", "length", "start", "frames", "mIoU");
            for c in &self.sweep {
                let _ = writeln!(
                    out,
                    "{:>8}{:>8}{:>8}{:>8.2}",
                    format!("{:.0}%", c.length_ratio * 100.0),
                    c.start_index,
                    c.length,
                    c.miou * 100.0
                );
            }
        }
        out
    }
}

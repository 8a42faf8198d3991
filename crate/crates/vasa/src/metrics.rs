//! Segmentation quality metrics: per-item IoU, the gIoU / cIoU aggregates,
//! and xIoU, the fraction of predicted pixels that land inside other
//! annotated concepts in the same image (cross-concept confusion).
//!
//! All aggregation runs on exact integer pixel counts; values are rounded
//! to four decimals only when a report is printed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{MaskError, RasterMask};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty input: no evaluation pairs")]
    EmptyInput,
    #[error("item {0}: others-union mask is required for xIoU but missing")]
    MissingOthersUnion(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Benchmark split an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "ad-hoc")]
    AdHoc,
    #[serde(rename = "common")]
    Common,
    #[serde(rename = "none")]
    None,
}

impl SplitTag {
    pub fn label(self) -> &'static str {
        match self {
            SplitTag::AdHoc => "ad-hoc",
            SplitTag::Common => "common",
            SplitTag::None => "none",
        }
    }
}

/// One scored example: a prediction against its ground truth, plus the
/// optional union of all other annotated concepts in the same image.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub item_id: String,
    pub prediction: RasterMask,
    pub ground_truth: RasterMask,
    pub others_union: Option<RasterMask>,
    pub split: SplitTag,
}

impl EvalPair {
    /// Validates that all present masks share dimensions.
    pub fn new(
        item_id: impl Into<String>,
        prediction: RasterMask,
        ground_truth: RasterMask,
        others_union: Option<RasterMask>,
        split: SplitTag,
    ) -> Result<Self, MetricsError> {
        prediction.intersect(&ground_truth)?;
        if let Some(o) = &others_union {
            prediction.intersect(o)?;
        }
        Ok(Self {
            item_id: item_id.into(),
            prediction,
            ground_truth,
            others_union,
            split,
        })
    }
}

/// Intersection-over-union of two masks as exact integer counts.
///
/// Returns `(intersection, union)`; both masks empty gives `(0, 0)`.
pub fn iou_counts(p: &RasterMask, g: &RasterMask) -> Result<(u64, u64), MaskError> {
    let inter = p.intersect(g)?.area();
    let union = p.area() + g.area() - inter;
    Ok((inter, union))
}

/// Intersection-over-union. Both masks empty is scored 1.0 (vacuous match).
pub fn iou(p: &RasterMask, g: &RasterMask) -> Result<f64, MaskError> {
    let (inter, union) = iou_counts(p, g)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean of per-item IoU over all pairs.
pub fn giou(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = 0.0;
    for pair in pairs {
        sum += iou(&pair.prediction, &pair.ground_truth)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Cumulative IoU: summed intersections over summed unions.
///
/// If every union is empty the pairs match vacuously and the result is 1.0.
pub fn ciou(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut inter_sum: u64 = 0;
    let mut union_sum: u64 = 0;
    for pair in pairs {
        let (i, u) = iou_counts(&pair.prediction, &pair.ground_truth)?;
        inter_sum += i;
        union_sum += u;
    }
    if union_sum == 0 {
        return Ok(1.0);
    }
    Ok(inter_sum as f64 / union_sum as f64)
}

/// Per-item cross-concept confusion: `|P ∩ O| / |P|`.
///
/// An empty prediction includes no wrong regions and scores 0.
pub fn xiou_item(p: &RasterMask, others: &RasterMask) -> Result<f64, MaskError> {
    let p_area = p.area();
    if p_area == 0 {
        return Ok(0.0);
    }
    Ok(p.intersect(others)?.area() as f64 / p_area as f64)
}

/// Mean cross-concept confusion. Every pair must carry an others-union.
pub fn xiou(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let others = pair
            .others_union
            .as_ref()
            .ok_or_else(|| MetricsError::MissingOthersUnion(pair.item_id.clone()))?;
        sum += xiou_item(&pair.prediction, others)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Metrics for one slice of the dataset (a split, or the full set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    /// Number of items in the slice.
    pub n: usize,
    pub giou: f64,
    pub ciou: f64,
    /// Present only if at least one item in the slice carries an
    /// others-union; averaged over exactly those items.
    pub xiou: Option<f64>,
    /// Number of items the xIoU mean was taken over.
    pub xiou_n: usize,
}

/// Per-item scores kept alongside the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item_id: String,
    pub split: SplitTag,
    pub iou: f64,
    pub xiou: Option<f64>,
    /// The prediction had zero foreground pixels (xIoU defined as 0).
    pub empty_prediction: bool,
    /// Prediction and ground truth were both empty (IoU defined as 1).
    pub vacuous_match: bool,
}

/// Full evaluation report: overall aggregates plus one row per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_item: Vec<ItemMetrics>,
    pub total: SliceMetrics,
    /// Split rows in fixed order (ad-hoc, common, none); empty splits are
    /// omitted.
    pub per_split: Vec<(SplitTag, SliceMetrics)>,
}

fn slice_metrics(pairs: &[&EvalPair]) -> Result<SliceMetrics, MetricsError> {
    let mut iou_sum = 0.0;
    let mut inter_sum: u64 = 0;
    let mut union_sum: u64 = 0;
    let mut xiou_sum = 0.0;
    let mut xiou_n = 0usize;
    for pair in pairs {
        let (i, u) = iou_counts(&pair.prediction, &pair.ground_truth)?;
        inter_sum += i;
        union_sum += u;
        iou_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        if let Some(o) = &pair.others_union {
            xiou_sum += xiou_item(&pair.prediction, o)?;
            xiou_n += 1;
        }
    }
    let n = pairs.len();
    Ok(SliceMetrics {
        n,
        giou: iou_sum / n as f64,
        ciou: if union_sum == 0 {
            1.0
        } else {
            inter_sum as f64 / union_sum as f64
        },
        xiou: (xiou_n > 0).then(|| xiou_sum / xiou_n as f64),
        xiou_n,
    })
}

/// Score every pair and aggregate overall and per split.
///
/// Items without an others-union still count toward gIoU/cIoU; xIoU is
/// averaged over the items that carry one.
pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_item = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (i, u) = iou_counts(&pair.prediction, &pair.ground_truth)?;
        let item_xiou = match &pair.others_union {
            Some(o) => Some(xiou_item(&pair.prediction, o)?),
            None => None,
        };
        per_item.push(ItemMetrics {
            item_id: pair.item_id.clone(),
            split: pair.split,
            iou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
            xiou: item_xiou,
            empty_prediction: pair.prediction.is_empty(),
            vacuous_match: u == 0,
        });
    }

    let total = slice_metrics(&pairs.iter().collect::<Vec<_>>())?;
    let mut grouped: BTreeMap<SplitTag, Vec<&EvalPair>> = BTreeMap::new();
    for pair in pairs {
        grouped.entry(pair.split).or_default().push(pair);
    }
    let mut per_split = Vec::new();
    for (split, members) in grouped {
        per_split.push((split, slice_metrics(&members)?));
    }
    Ok(MetricsReport {
        per_item,
        total,
        per_split,
    })
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt4_opt(v: Option<f64>) -> String {
    v.map(fmt4).unwrap_or_else(|| "-".to_string())
}

impl MetricsReport {
    /// CSV with one row per split plus a total row.
    /// Columns: `split,n,giou,ciou,xiou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,n,giou,ciou,xiou\n");
        for (split, m) in &self.per_split {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                split.label(),
                m.n,
                fmt4(m.giou),
                fmt4(m.ciou),
                fmt4_opt(m.xiou)
            ));
        }
        out.push_str(&format!(
            "total,{},{},{},{}\n",
            self.total.n,
            fmt4(self.total.giou),
            fmt4(self.total.ciou),
            fmt4_opt(self.total.xiou)
        ));
        out
    }

    /// Markdown table with the metric triple per split and a Total row.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Split | gIoU | cIoU | xIoU |\n|---|---|---|---|\n");
        for (split, m) in &self.per_split {
            let name = match split {
                SplitTag::AdHoc => "Ad-hoc",
                SplitTag::Common => "Common",
                SplitTag::None => "Unsplit",
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                name,
                fmt4(m.giou),
                fmt4(m.ciou),
                fmt4_opt(m.xiou)
            ));
        }
        out.push_str(&format!(
            "| Total | {} | {} | {} |\n",
            fmt4(self.total.giou),
            fmt4(self.total.ciou),
            fmt4_opt(self.total.xiou)
        ));
        out
    }
}

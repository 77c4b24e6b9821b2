//! Detection matching by overlap with ground-truth circles, precision,
//! recall and F-value at three cumulative overlap levels, and pixel-level
//! Dice and IoU.
//!
//! Overlap is `|instance ∩ disc| / |disc|`. A match lands in TP75 (≥ 0.75),
//! TP50 (≥ 0.5) or TP25 (≥ 0.25). At a given level, matches below the
//! level's threshold count as both a false positive and a false negative.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postdetect::DetectedInstance;
use crate::raster::{Circle, LabelMask};

/// How below-level matches are scored; written next to every report.
pub const LEVEL_CONVENTION: &str =
    "matches below a level's overlap threshold count as one FP and one FN at that level";

pub const CSV_COLUMNS: [&str; 16] = [
    "tp75",
    "tp50",
    "tp25",
    "fp",
    "fn",
    "precision_75",
    "recall_75",
    "f_75",
    "precision_50c",
    "recall_50c",
    "f_50c",
    "precision_25c",
    "recall_25c",
    "f_25c",
    "dice",
    "iou",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    TP75,
    TP50,
    TP25,
}

impl Category {
    pub fn of(fraction: f64) -> Option<Self> {
        if fraction >= 0.75 {
            Some(Category::TP75)
        } else if fraction >= 0.5 {
            Some(Category::TP50)
        } else if fraction >= 0.25 {
            Some(Category::TP25)
        } else {
            None
        }
    }
}

/// Cumulative level at which precision and recall are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// TP75 only.
    L75,
    /// TP75 + TP50.
    L50,
    /// TP75 + TP50 + TP25.
    L25,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L75, Level::L50, Level::L25];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp75: usize,
    pub tp50: usize,
    pub tp25: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl DetectionCounts {
    pub fn matched(&self) -> usize {
        self.tp75 + self.tp50 + self.tp25
    }

    pub fn num_predictions(&self) -> usize {
        self.matched() + self.fp
    }

    pub fn num_truths(&self) -> usize {
        self.matched() + self.fn_
    }

    pub fn true_positives(&self, level: Level) -> usize {
        match level {
            Level::L75 => self.tp75,
            Level::L50 => self.tp75 + self.tp50,
            Level::L25 => self.matched(),
        }
    }

    pub fn add(&mut self, o: &DetectionCounts) {
        self.tp75 += o.tp75;
        self.tp50 += o.tp50;
        self.tp25 += o.tp25;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        if num == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &DetectionCounts, level: Level) -> f64 {
    ratio(c.true_positives(level), c.num_predictions())
}

pub fn recall(c: &DetectionCounts, level: Level) -> f64 {
    ratio(c.true_positives(level), c.num_truths())
}

pub fn f_value(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * recall + precision;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * recall * precision / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub instance: usize,
    pub gt: usize,
    pub fraction: f64,
    pub category: Category,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub unmatched_instances: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

impl MatchResult {
    pub fn counts(&self) -> DetectionCounts {
        let mut c = DetectionCounts { fp: self.unmatched_instances.len(), fn_: self.unmatched_truths.len(), ..Default::default() };
        for m in &self.matches {
            match m.category {
                Category::TP75 => c.tp75 += 1,
                Category::TP50 => c.tp50 += 1,
                Category::TP25 => c.tp25 += 1,
            }
        }
        c
    }
}

/// `|instance ∩ disc| / |disc|` with the disc rasterized on a
/// `width x height` grid.
pub fn overlap_fraction(instance: &DetectedInstance, gt: &Circle, width: usize, height: usize) -> Result<f64> {
    let disc = gt.pixels(width, height).count();
    if disc == 0 {
        return Err(Error::InvalidArgument(format!("ground-truth circle {gt:?} has zero area")));
    }
    let hit = instance.pixels().filter(|&(x, y)| gt.contains(x, y)).count();
    Ok(hit as f64 / disc as f64)
}

/// Overlap fractions `[gt][instance]`. Instances are assumed disjoint.
pub fn overlap_matrix(
    instances: &[DetectedInstance],
    gts: &[Circle],
    width: usize,
    height: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut owner = vec![usize::MAX; width * height];
    for (k, inst) in instances.iter().enumerate() {
        for (x, y) in inst.pixels() {
            if x < width && y < height {
                owner[y * width + x] = k;
            }
        }
    }
    gts.iter()
        .map(|gt| {
            let mut hits = vec![0usize; instances.len()];
            let mut area = 0usize;
            for (x, y) in gt.pixels(width, height) {
                area += 1;
                let o = owner[y * width + x];
                if o != usize::MAX {
                    hits[o] += 1;
                }
            }
            if area == 0 {
                return Err(Error::InvalidArgument(format!("ground-truth circle {gt:?} has zero area")));
            }
            Ok(hits.into_iter().map(|h| h as f64 / area as f64).collect())
        })
        .collect()
}

/// Greedy one-to-one matching on a `[gt][instance]` fraction matrix.
/// Pairs below 0.25 are never matched; the rest are taken in descending
/// fraction order, ties by lower gt index then lower instance index.
pub fn match_fractions(fractions: &[Vec<f64>], num_instances: usize) -> MatchResult {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, row) in fractions.iter().enumerate() {
        for (i, &f) in row.iter().enumerate().take(num_instances) {
            if f >= 0.25 {
                pairs.push((f, g, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; fractions.len()];
    let mut inst_used = vec![false; num_instances];
    let mut matches = Vec::new();
    for (f, g, i) in pairs {
        if gt_used[g] || inst_used[i] {
            continue;
        }
        gt_used[g] = true;
        inst_used[i] = true;
        let category = Category::of(f).expect("fraction >= 0.25");
        matches.push(Match { instance: i, gt: g, fraction: f, category });
    }
    matches.sort_by_key(|m| m.gt);
    MatchResult {
        matches,
        unmatched_instances: (0..num_instances).filter(|&i| !inst_used[i]).collect(),
        unmatched_truths: (0..fractions.len()).filter(|&g| !gt_used[g]).collect(),
    }
}

/// Matches instances to ground-truth circles. Ids in the result are indices
/// into the two slices.
pub fn match_detections(
    instances: &[DetectedInstance],
    gts: &[Circle],
    width: usize,
    height: usize,
) -> Result<MatchResult> {
    let m = overlap_matrix(instances, gts, width, height)?;
    Ok(match_fractions(&m, instances.len()))
}

/// Pixel tallies behind Dice and IoU, summable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTally {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl MaskTally {
    pub fn of(pred: &LabelMask, truth: &LabelMask) -> Result<Self> {
        if pred.width() != truth.width() || pred.height() != truth.height() {
            return Err(Error::ShapeMismatch(format!(
                "masks are {}x{} and {}x{}",
                pred.width(),
                pred.height(),
                truth.width(),
                truth.height()
            )));
        }
        let mut t = MaskTally::default();
        for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
            t.pred += (a != 0) as u64;
            t.truth += (b != 0) as u64;
            t.intersection += (a != 0 && b != 0) as u64;
        }
        Ok(t)
    }

    pub fn add(&mut self, o: &MaskTally) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.truth += o.truth;
    }

    pub fn dice(&self) -> f64 {
        let den = self.pred + self.truth;
        if den == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / den as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let union = self.pred + self.truth - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    Ok(MaskTally::of(a, b)?.dice())
}

pub fn iou(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    Ok(MaskTally::of(a, b)?.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub precision: f64,
    pub recall: f64,
    pub f_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: DetectionCounts,
    /// Indexed like [`Level::ALL`].
    pub levels: [LevelScores; 3],
    pub dice: f64,
    pub iou: f64,
}

impl MetricsReport {
    pub fn from_counts(counts: DetectionCounts, dice: f64, iou: f64) -> Self {
        let levels = Level::ALL.map(|l| {
            let (p, r) = (precision(&counts, l), recall(&counts, l));
            LevelScores { precision: p, recall: r, f_value: f_value(p, r, 1.0) }
        });
        Self { counts, levels, dice, iou }
    }

    pub fn from_tallies(counts: DetectionCounts, pixels: &MaskTally) -> Self {
        Self::from_counts(counts, pixels.dice(), pixels.iou())
    }

    pub fn level(&self, level: Level) -> LevelScores {
        self.levels[Level::ALL.iter().position(|&l| l == level).expect("level")]
    }

    /// Values in [`CSV_COLUMNS`] order.
    pub fn csv_values(&self) -> [f64; 16] {
        let c = &self.counts;
        let [a, b, d] = self.levels;
        [
            c.tp75 as f64,
            c.tp50 as f64,
            c.tp25 as f64,
            c.fp as f64,
            c.fn_ as f64,
            a.precision,
            a.recall,
            a.f_value,
            b.precision,
            b.recall,
            b.f_value,
            d.precision,
            d.recall,
            d.f_value,
            self.dice,
            self.iou,
        ]
    }

    /// Field-wise arithmetic mean, counts included (rounded).
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let cnt = |f: &dyn Fn(&DetectionCounts) -> usize| avg(&|r| f(&r.counts) as f64).round() as usize;
        let levels = [0, 1, 2].map(|k| LevelScores {
            precision: avg(&|r| r.levels[k].precision),
            recall: avg(&|r| r.levels[k].recall),
            f_value: avg(&|r| r.levels[k].f_value),
        });
        Some(MetricsReport {
            counts: DetectionCounts {
                tp75: cnt(&|c| c.tp75),
                tp50: cnt(&|c| c.tp50),
                tp25: cnt(&|c| c.tp25),
                fp: cnt(&|c| c.fp),
                fn_: cnt(&|c| c.fn_),
            },
            levels,
            dice: avg(&|r| r.dice),
            iou: avg(&|r| r.iou),
        })
    }
}

/// Matches, counts and the full report for one image. Detection uses the
/// instances; Dice and IoU use the two masks.
pub fn evaluate_image(
    instances: &[DetectedInstance],
    gts: &[Circle],
    pred: &LabelMask,
    truth: &LabelMask,
) -> Result<(MatchResult, MetricsReport)> {
    let tally = MaskTally::of(pred, truth)?;
    let m = match_detections(instances, gts, truth.width(), truth.height())?;
    let report = MetricsReport::from_tallies(m.counts(), &tally);
    Ok((m, report))
}

/// One CSV row per report under a leading `name` column, preceded by a
/// `#` comment line carrying [`LEVEL_CONVENTION`].
pub fn reports_to_csv(rows: &[(String, MetricsReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("name").chain(CSV_COLUMNS))?;
    for (name, r) in rows {
        let vals = r.csv_values();
        let fields = vals.iter().enumerate().map(|(i, v)| if i < 5 { format!("{}", *v as u64) } else { format!("{v:.6}") });
        w.write_record(std::iter::once(name.clone()).chain(fields))?;
    }
    let body = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = format!("# {LEVEL_CONVENTION}\n");
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(out)
}

/// Parses [`reports_to_csv`] output back into `(name, values)` rows.
pub fn read_report_csv(text: &str) -> Result<Vec<(String, [f64; 16])>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() != 17 || header[0] != "name" || header[1..] != CSV_COLUMNS {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut vals = [0.0; 16];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = rec[k + 1].parse().map_err(|_| Error::Format(format!("bad number {:?}", &rec[k + 1])))?;
        }
        rows.push((rec[0].to_string(), vals));
    }
    Ok(rows)
}

pub fn write_report_csv(rows: &[(String, MetricsReport)], path: impl AsRef<Path>) -> Result<()> {
    crate::raster::write_bytes(path.as_ref(), reports_to_csv(rows)?.as_bytes())
}

#[derive(Serialize)]
struct JsonReport<'a> {
    convention: &'a str,
    rows: Vec<JsonRow<'a>>,
}

#[derive(Serialize)]
struct JsonRow<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub fn reports_to_json(rows: &[(String, MetricsReport)]) -> Result<String> {
    let doc = JsonReport {
        convention: LEVEL_CONVENTION,
        rows: rows.iter().map(|(name, report)| JsonRow { name, report }).collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

//! Patch datasets, augmentation, the training loop, stitched full-image
//! inference and k-fold cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{match_detections, DetectionCounts, MaskTally, MetricsReport};
use crate::nnet::{adam_step, argmax_labels, softmax_cross_entropy, Tensor4, TrainHyper, UNet, UNetConfig};
use crate::postdetect::{detect_instances, PostParams};
use crate::raster::{split_patches, stitch_patches, BitDepth, GrayImage, LabelMask, PatchGrid};
use crate::rng::{derive_seed, DetRng};
use crate::synthgen::CorpusItem;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const FOLD_STREAM: u64 = 3;
const INFER_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_lr_prob: f64,
    pub translate_prob: f64,
    /// Offsets are drawn from `[-translate_range, translate_range]` per axis.
    pub translate_range: i64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_lr_prob: 0.5, translate_prob: 0.5, translate_range: 10 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip_lr_prob: 0.0, translate_prob: 0.0, translate_range: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.flip_lr_prob) || !p(self.translate_prob) || self.translate_range < 0 {
            return Err(Error::InvalidArgument(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// An image patch and its label patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub image: GrayImage,
    pub mask: LabelMask,
}

/// Splits every 8-bit image and its mask into the same non-overlapping grid.
pub fn make_patch_dataset<'a>(
    items: impl IntoIterator<Item = (&'a GrayImage, &'a LabelMask)>,
    patch_size: usize,
) -> Result<Vec<PatchPair>> {
    let mut out = Vec::new();
    for (img, mask) in items {
        img.require_depth(BitDepth::Eight)?;
        if (img.width(), img.height()) != (mask.width(), mask.height()) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                img.width(),
                img.height(),
                mask.width(),
                mask.height()
            )));
        }
        let ig = split_patches(img, patch_size)?;
        let mg = split_patches(mask, patch_size)?;
        out.extend(ig.patches.into_iter().zip(mg.patches).map(|(image, mask)| PatchPair { image, mask }));
    }
    Ok(out)
}

/// Left-right mirror of both rasters.
pub fn flip_lr_pair(img: &GrayImage, mask: &LabelMask) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width(), img.height());
    let mut oi = img.clone();
    let mut om = mask.clone();
    for y in 0..h {
        for x in 0..w {
            oi.set(x, y, img.get(w - 1 - x, y));
            om.set(x, y, mask.get(w - 1 - x, y) != 0);
        }
    }
    (oi, om)
}

/// Moves content by `(dx, dy)`; vacated pixels become 0 and background.
pub fn translate_pair(img: &GrayImage, mask: &LabelMask, dx: i64, dy: i64) -> (GrayImage, LabelMask) {
    let (w, h) = (img.width(), img.height());
    let mut oi = img.map(img.depth(), |_| 0).expect("same depth");
    let mut om = LabelMask::empty(w, h).expect("non-empty");
    for y in 0..h {
        let sy = y as i64 - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w {
            let sx = x as i64 - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            oi.set(x, y, img.get(sx, sy));
            om.set(x, y, mask.get(sx, sy) != 0);
        }
    }
    (oi, om)
}

/// Random flip, then random translation, applied identically to both.
pub fn augment_pair(
    img: &GrayImage,
    mask: &LabelMask,
    aug: &AugmentConfig,
    rng: &mut DetRng,
) -> (GrayImage, LabelMask) {
    let flip = rng.bernoulli(aug.flip_lr_prob);
    let shift = rng.bernoulli(aug.translate_prob);
    let (dx, dy) = if shift {
        let r = aug.translate_range;
        (rng.int_in(-r, r), rng.int_in(-r, r))
    } else {
        (0, 0)
    };
    let (mut i, mut m) = if flip { flip_lr_pair(img, mask) } else { (img.clone(), mask.clone()) };
    if dx != 0 || dy != 0 {
        (i, m) = translate_pair(&i, &m, dx, dy);
    }
    (i, m)
}

fn write_input(img: &GrayImage, dst: &mut [f32]) {
    let scale = 1.0 / img.depth().max_value() as f32;
    for (d, &v) in dst.iter_mut().zip(img.pixels()) {
        *d = v as f32 * scale;
    }
}

/// Stacks images into a `(n, 1, h, w)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor4<f32>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut t = Tensor4::zeros([images.len(), 1, h, w]);
    for (n, img) in images.iter().enumerate() {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
        }
        write_input(img, t.sample_mut(n));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Pixel accuracy of the training forward passes.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub cfg: UNetConfig,
    pub hyper: TrainHyper,
    pub aug: AugmentConfig,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    /// Training accuracy reached 90% within the first 10% of epochs.
    pub early_90: bool,
    pub model: UNet<f32>,
}

impl TrainRun {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

/// Serialisable summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub cfg: UNetConfig,
    pub hyper: TrainHyper,
    pub aug: AugmentConfig,
    pub corpus: Option<String>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub early_90: bool,
    pub checkpoint: Option<String>,
}

impl RunManifest {
    pub fn new(run: &TrainRun, corpus: Option<String>, checkpoint: Option<String>) -> Self {
        Self {
            seed: run.seed,
            cfg: run.cfg,
            hyper: run.hyper,
            aug: run.aug,
            corpus,
            losses: run.loss_history(),
            accuracies: run.history.iter().map(|e| e.accuracy).collect(),
            early_90: run.early_90,
            checkpoint,
        }
    }
}

/// Trains a fresh network. `on_epoch` sees every finished epoch.
pub fn train(
    dataset: &[PatchPair],
    cfg: UNetConfig,
    hyper: &TrainHyper,
    aug: &AugmentConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainRun> {
    let model = UNet::<f32>::new(cfg, derive_seed(seed, INIT_STREAM))?;
    train_model(model, dataset, hyper, aug, seed, on_epoch)
}

/// Continues training `model` on `dataset`.
pub fn train_model(
    mut model: UNet<f32>,
    dataset: &[PatchPair],
    hyper: &TrainHyper,
    aug: &AugmentConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainRun> {
    hyper.validate()?;
    aug.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let size = model.cfg.input_size;
    if let Some(p) = dataset.iter().find(|p| p.image.width() != size || p.image.height() != size) {
        return Err(Error::ShapeMismatch(format!(
            "patch {}x{} does not match network input {size}",
            p.image.width(),
            p.image.height()
        )));
    }
    let n = dataset.len();
    let px = size * size;
    let aug_root = derive_seed(seed, AUGMENT_STREAM);
    let mut shuffle = DetRng::new(derive_seed(seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let b = chunk.len();
            let mut x = Tensor4::<f32>::zeros([b, 1, size, size]);
            let mut labels = vec![0u8; b * px];
            for (k, &idx) in chunk.iter().enumerate() {
                let mut rng = DetRng::new(derive_seed(aug_root, (epoch * n + idx) as u64));
                let (img, mask) = augment_pair(&dataset[idx].image, &dataset[idx].mask, aug, &mut rng);
                write_input(&img, x.sample_mut(k));
                labels[k * px..(k + 1) * px].copy_from_slice(mask.labels());
            }
            let logits = model.forward(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                model.clear_cache();
                return Err(Error::Diverged { epoch, step, loss });
            }
            correct += argmax_labels(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
            seen += labels.len();
            let grads = model.backward(&dlogits)?;
            adam_step(&mut model.params, &grads, hyper)?;
            loss_sum += loss * b as f64;
            step += 1;
        }
        let stats = EpochStats { epoch, mean_loss: loss_sum / n as f64, accuracy: correct as f64 / seen as f64 };
        on_epoch(&stats);
        history.push(stats);
    }
    let early_window = hyper.epochs.div_ceil(10);
    let early_90 = history.iter().take(early_window).any(|e| e.accuracy >= 0.9);
    Ok(TrainRun { cfg: model.cfg, hyper: *hyper, aug: *aug, seed, history, early_90, model })
}

/// Label masks predicted for a list of equally sized images.
pub fn predict_masks(model: &UNet<f32>, images: &[&GrayImage]) -> Result<Vec<LabelMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let x = images_to_tensor(chunk)?;
        let labels = model.predict_labels(&x)?;
        let (h, w) = (x.height(), x.width());
        for k in 0..chunk.len() {
            out.push(LabelMask::new(w, h, labels[k * w * h..(k + 1) * w * h].to_vec())?);
        }
    }
    Ok(out)
}

/// Split into network-sized patches, predict each, stitch back.
pub fn infer_full_image(model: &UNet<f32>, img: &GrayImage) -> Result<LabelMask> {
    let grid = split_patches(img, model.cfg.input_size)?;
    let refs: Vec<&GrayImage> = grid.patches.iter().collect();
    let masks = predict_masks(model, &refs)?;
    stitch_patches(&PatchGrid { patch_size: grid.patch_size, rows: grid.rows, cols: grid.cols, patches: masks })
}

/// Assignment of images to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `assignment[image] = fold`.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn test_images(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_images(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Seeded shuffle of the image ids, then round-robin over `k` folds.
pub fn kfold_split(n_images: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > n_images {
        return Err(Error::InvalidArgument(format!("cannot split {n_images} images into {k} folds")));
    }
    let mut ids: Vec<usize> = (0..n_images).collect();
    DetRng::new(seed).shuffle(&mut ids);
    let mut assignment = vec![0; n_images];
    for (pos, &id) in ids.iter().enumerate() {
        assignment[id] = pos % k;
    }
    Ok(FoldPlan { k, assignment })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_images: Vec<usize>,
    pub losses: Vec<f64>,
    /// Counts and pixel tallies pooled over the fold's held-out images.
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold reports.
    pub average: MetricsReport,
}

impl CrossvalReport {
    /// `fold_0 .. fold_{k-1}` then `average`.
    pub fn rows(&self) -> Vec<(String, MetricsReport)> {
        let mut rows: Vec<_> = self.folds.iter().map(|f| (format!("fold_{}", f.fold), f.report)).collect();
        rows.push(("average".into(), self.average));
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossvalConfig {
    pub k: usize,
    pub seed: u64,
    pub cfg: UNetConfig,
    pub hyper: TrainHyper,
    pub aug: AugmentConfig,
    pub post: PostParams,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            cfg: UNetConfig::desk(),
            hyper: TrainHyper::default(),
            aug: AugmentConfig::default(),
            post: PostParams::default(),
        }
    }
}

/// Progress events of [`run_crossval`].
#[derive(Debug, Clone, Copy)]
pub enum CrossvalEvent<'a> {
    FoldStart { fold: usize, train_patches: usize },
    Epoch { fold: usize, stats: &'a EpochStats },
    FoldDone { fold: usize, report: &'a MetricsReport },
}

/// Trains on `k - 1` folds and evaluates on the held-out one, for every
/// fold. Dice and IoU are scored on the raw stitched masks, detection on
/// the cleaned instances.
pub fn run_crossval(
    corpus: &[CorpusItem],
    cv: &CrossvalConfig,
    on_event: &mut dyn FnMut(CrossvalEvent<'_>),
) -> Result<CrossvalReport> {
    let plan = kfold_split(corpus.len(), cv.k, derive_seed(cv.seed, FOLD_STREAM))?;
    let mut folds = Vec::with_capacity(cv.k);
    for fold in 0..cv.k {
        let train_ids = plan.train_images(fold);
        let test_ids = plan.test_images(fold);
        let dataset =
            make_patch_dataset(train_ids.iter().map(|&i| (&corpus[i].image, &corpus[i].mask)), cv.cfg.input_size)?;
        on_event(CrossvalEvent::FoldStart { fold, train_patches: dataset.len() });
        let fold_seed = derive_seed(cv.seed, 100 + fold as u64);
        let run = train(&dataset, cv.cfg, &cv.hyper, &cv.aug, fold_seed, &mut |s| {
            on_event(CrossvalEvent::Epoch { fold, stats: s })
        })?;
        drop(dataset);
        let mut counts = DetectionCounts::default();
        let mut tally = MaskTally::default();
        for &i in &test_ids {
            let item = &corpus[i];
            let pred = infer_full_image(&run.model, &item.image)?;
            tally.add(&MaskTally::of(&pred, &item.mask)?);
            let inst = detect_instances(&pred, &cv.post)?;
            counts.add(&match_detections(&inst, &item.circles, pred.width(), pred.height())?.counts());
        }
        let report = MetricsReport::from_tallies(counts, &tally);
        on_event(CrossvalEvent::FoldDone { fold, report: &report });
        folds.push(FoldResult { fold, test_images: test_ids, losses: run.loss_history(), report });
    }
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report).collect();
    let average = MetricsReport::mean(&reports).expect("k >= 1");
    Ok(CrossvalReport { plan, folds, average })
}

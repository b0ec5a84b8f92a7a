//! Synthetic data, training-sample mining and the per-stage SGD loop.

pub mod corpus;
pub mod samples;
pub mod synth;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{stage_loss, Cascade, LossWeights, SampleBand, StageId, StageLabels};
use crate::error::{PcnError, Result};
use crate::nn::{sgd_step, Network, OptimState};
use crate::tensor::Tensor;

pub use corpus::{write_corpus, DiskCorpus, ImageSource, LabeledImage, MemoryCorpus, Subset, ANNOTATION_FILE};
pub use samples::{
    band_for_iou, face_sample, mine_hard_negatives, misoriented_range, misoriented_sample, orient_label,
    random_negative, rotate_annotations,
    stage_angle_range, window_labels, MiningConfig, TrainingSample, ViewWindow,
};
pub use synth::{gen_synthetic, FaceAnnotation, SceneSpec, SyntheticCorpus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub optim: OptimState,
    pub batch: usize,
    /// Positive : negative : suspected.
    pub ratio: [usize; 3],
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(base_lr: f64, max_iter: usize, seed: u64) -> Self {
        TrainConfig {
            loss_weights: LossWeights::default(),
            optim: OptimState::new(base_lr, max_iter),
            batch: 10,
            ratio: [2, 2, 1],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio.contains(&0) || self.batch == 0 {
            return Err(PcnError::InsufficientData(format!(
                "batch {} with ratio {:?} leaves a band empty",
                self.batch, self.ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BandCounts {
    pub positive: usize,
    pub negative: usize,
    pub suspected: usize,
}

/// Splits a minibatch by band: suspected gets the floor of its share, the
/// remainder is divided between positives (rounded up) and negatives.
pub fn band_counts(batch: usize, ratio: [usize; 3]) -> BandCounts {
    let [p, n, s] = ratio;
    let suspected = batch * s / (p + n + s);
    let rest = batch - suspected;
    let positive = (rest * p).div_ceil(p + n);
    BandCounts {
        positive,
        negative: rest - positive,
        suspected,
    }
}

/// Anything that can hand out training samples of a requested band.
pub trait SampleSource {
    fn draw(&mut self, band: SampleBand, rng: &mut ChaCha8Rng) -> Result<TrainingSample>;
}

/// Fixed samples of one band visited in a fresh random order each epoch.
#[derive(Clone, Debug)]
pub struct ShuffledPool {
    items: Vec<TrainingSample>,
    order: Vec<usize>,
    cursor: usize,
}

impl ShuffledPool {
    pub fn new(items: Vec<TrainingSample>) -> Self {
        let order = (0..items.len()).collect();
        ShuffledPool {
            items,
            order,
            cursor: usize::MAX,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> Option<&TrainingSample> {
        if self.items.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        Some(&self.items[i])
    }
}

/// In-memory samples, one shuffled pool per band.
#[derive(Clone, Debug)]
pub struct PoolSource {
    pools: [ShuffledPool; 3],
}

impl PoolSource {
    pub fn new(samples: Vec<TrainingSample>) -> Self {
        let mut split: [Vec<TrainingSample>; 3] = Default::default();
        for s in samples {
            split[band_slot(s.labels.band)].push(s);
        }
        PoolSource {
            pools: split.map(ShuffledPool::new),
        }
    }
}

fn band_slot(band: SampleBand) -> usize {
    match band {
        SampleBand::Positive => 0,
        SampleBand::Negative => 1,
        SampleBand::Suspected => 2,
    }
}

impl SampleSource for PoolSource {
    fn draw(&mut self, band: SampleBand, rng: &mut ChaCha8Rng) -> Result<TrainingSample> {
        self.pools[band_slot(band)]
            .next(rng)
            .cloned()
            .ok_or_else(|| PcnError::InsufficientData(format!("no {band:?} samples")))
    }
}

/// Where negatives come from during streaming.
#[derive(Clone, Debug)]
pub enum NegativeSource {
    /// Random low-overlap windows.
    Random,
    /// Precomputed hard-negative patches.
    Pool(Vec<Tensor<f32>>, Vec<usize>, usize),
}

impl NegativeSource {
    pub fn pool(patches: Vec<Tensor<f32>>) -> Self {
        let n = patches.len();
        NegativeSource::Pool(patches, (0..n).collect(), usize::MAX)
    }
}

// Each rendered image serves this many draws before the next one is loaded.
const DRAWS_PER_IMAGE: usize = 3;

/// Share of negative draws for stages 2 and 3 that are faces turned outside
/// the stage's range, so an orientation mistake upstream gets rejected.
pub const MISORIENTED_SHARE: f64 = 0.25;

struct Cached {
    item: LabeledImage,
    uses_left: usize,
}

/// Streams freshly cropped samples from an annotated image source: every
/// positive or suspected draw rotates a face to a new random angle in the
/// stage range and perturbs its box.
pub struct StreamingSource<'a> {
    source: &'a dyn ImageSource,
    stage: StageId,
    with_faces: Vec<usize>,
    negatives: NegativeSource,
    face_cache: Option<Cached>,
    negative_cache: Option<Cached>,
}

impl<'a> StreamingSource<'a> {
    pub fn new(source: &'a dyn ImageSource, stage: StageId, negatives: NegativeSource) -> Result<Self> {
        let mut with_faces = Vec::new();
        for i in 0..source.len() {
            if !source.load_faces(i)?.is_empty() {
                with_faces.push(i);
            }
        }
        if with_faces.is_empty() {
            return Err(PcnError::InsufficientData("no annotated faces to sample positives from".into()));
        }
        if let NegativeSource::Pool(p, _, _) = &negatives {
            if p.is_empty() {
                return Err(PcnError::InsufficientData("empty hard-negative pool".into()));
            }
        }
        Ok(StreamingSource {
            source,
            stage,
            with_faces,
            negatives,
            face_cache: None,
            negative_cache: None,
        })
    }

    fn refill(
        cache: &mut Option<Cached>,
        source: &dyn ImageSource,
        candidates: Option<&[usize]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if cache.as_ref().is_some_and(|c| c.uses_left > 0) {
            return Ok(());
        }
        let index = match candidates {
            Some(c) => c[rng.random_range(0..c.len())],
            None => rng.random_range(0..source.len()),
        };
        *cache = Some(Cached {
            item: source.load(index)?,
            uses_left: DRAWS_PER_IMAGE,
        });
        Ok(())
    }
}

impl SampleSource for StreamingSource<'_> {
    fn draw(&mut self, band: SampleBand, rng: &mut ChaCha8Rng) -> Result<TrainingSample> {
        if band != SampleBand::Negative {
            Self::refill(&mut self.face_cache, self.source, Some(&self.with_faces), rng)?;
            let cached = self.face_cache.as_mut().expect("filled above");
            cached.uses_left -= 1;
            let faces = &cached.item.faces;
            let face = faces[rng.random_range(0..faces.len())];
            return face_sample(&cached.item.image, &face, self.stage, band, rng);
        }
        if misoriented_range(self.stage).is_some() && rng.random_bool(MISORIENTED_SHARE) {
            Self::refill(&mut self.face_cache, self.source, Some(&self.with_faces), rng)?;
            let cached = self.face_cache.as_mut().expect("filled above");
            cached.uses_left -= 1;
            let faces = &cached.item.faces;
            let face = faces[rng.random_range(0..faces.len())];
            return misoriented_sample(&cached.item.image, &face, self.stage, rng);
        }
        match &mut self.negatives {
            NegativeSource::Random => {
                Self::refill(&mut self.negative_cache, self.source, None, rng)?;
                let cached = self.negative_cache.as_mut().expect("filled above");
                cached.uses_left -= 1;
                random_negative(&cached.item.image, &cached.item.faces, self.stage.input_side(), rng)
            }
            NegativeSource::Pool(patches, order, cursor) => {
                if *cursor >= order.len() {
                    order.shuffle(rng);
                    *cursor = 0;
                }
                let patch = patches[order[*cursor]].clone();
                *cursor += 1;
                Ok(TrainingSample {
                    patch,
                    labels: StageLabels::negative(),
                })
            }
        }
    }
}

/// One row of the training log: batch-mean losses after an update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub total_loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub cal_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "iteration,total_loss,cls_loss,reg_loss,cal_loss,lr";

    /// Appends rows as CSV; the header is written only when `header` is set.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "{}", Self::HEADER)?;
        }
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iteration, r.total_loss, r.cls_loss, r.reg_loss, r.cal_loss, r.lr
            )?;
        }
        Ok(())
    }

    /// Mean total loss over the last `n` rows.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.total_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Runs `cfg.optim.max_iter` SGD steps on `net`. Every minibatch holds the
/// band counts of [`band_counts`]; the loss and gradients are averaged over
/// the batch.
pub fn train_stage(
    net: &mut Network<f32>,
    stage: StageId,
    source: &mut dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let counts = band_counts(cfg.batch, cfg.ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = cfg.optim.clone();
    let mut log = TrainingLog::default();
    let scale = 1.0 / cfg.batch as f32;
    let bands = [
        (SampleBand::Positive, counts.positive),
        (SampleBand::Negative, counts.negative),
        (SampleBand::Suspected, counts.suspected),
    ];
    while optim.iteration < optim.max_iter {
        let mut batch = Vec::with_capacity(cfg.batch);
        for (band, n) in bands {
            for _ in 0..n {
                batch.push(source.draw(band, &mut rng)?);
            }
        }
        net.zero_grad();
        let mut row = LogRow {
            iteration: optim.iteration,
            total_loss: 0.0,
            cls_loss: 0.0,
            reg_loss: 0.0,
            cal_loss: 0.0,
            lr: optim.lr(),
        };
        for sample in &batch {
            let (raw, trace) = net.forward_trace(&sample.patch)?;
            let (loss, mut grad, parts) = stage_loss(&raw, &sample.labels, stage, &cfg.loss_weights)?;
            if !loss.is_finite() {
                return Err(PcnError::Divergence {
                    iteration: optim.iteration,
                    detail: format!("{stage} loss is {loss} for a {:?} sample", sample.labels.band),
                });
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            net.backward(&trace, &grad)?;
            row.total_loss += loss as f64;
            row.cls_loss += parts.cls;
            row.reg_loss += parts.reg;
            row.cal_loss += parts.cal;
        }
        let n = batch.len() as f64;
        row.total_loss /= n;
        row.cls_loss /= n;
        row.reg_loss /= n;
        row.cal_loss /= n;
        sgd_step(net, &mut optim);
        if net.params().iter().any(|p| !p.value.all_finite()) {
            return Err(PcnError::Divergence {
                iteration: row.iteration,
                detail: format!("{stage} weights became non-finite"),
            });
        }
        log.rows.push(row);
    }
    Ok(log)
}

/// Settings for training all three stages in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrainConfig {
    /// Per-stage optimizer settings; seeds are derived from `seed`.
    pub stages: [TrainConfig; 3],
    /// Hard-negative mining for stages 2 and 3.
    pub mining: MiningConfig,
    pub seed: u64,
}

impl CascadeTrainConfig {
    /// Desk-scale schedule: `max_iter` steps per stage with the learning
    /// rate dropped tenfold at 70%.
    pub fn desk(max_iter: usize, seed: u64) -> Self {
        CascadeTrainConfig {
            stages: StageId::ALL.map(|s| TrainConfig::new(DEFAULT_LR, max_iter, seed ^ ((s as u64) << 32))),
            mining: MiningConfig::default(),
            seed,
        }
    }
}

/// Base learning rate of the desk schedule. Ten times fewer iterations than
/// a full-scale run, so the step is ten times larger.
pub const DEFAULT_LR: f64 = 1e-2;

/// Progress callback: called after each stage with its log.
pub type StageHook<'a> = &'a mut dyn FnMut(StageId, &TrainingLog);

/// Trains stages 1, 2 and 3 in order on `source`. Stages 2 and 3 draw their
/// negatives from windows that the already trained stages accept.
pub fn train_cascade(
    source: &dyn ImageSource,
    cfg: &CascadeTrainConfig,
    hook: StageHook<'_>,
) -> Result<(Cascade, [TrainingLog; 3])> {
    let mut cascade = Cascade::new(cfg.seed);
    let mut logs: [TrainingLog; 3] = Default::default();
    for stage in StageId::ALL {
        let stage_cfg = &cfg.stages[stage.index()];
        if stage_cfg.optim.max_iter == 0 {
            hook(stage, &logs[stage.index()]);
            continue;
        }
        let negatives = match stage {
            StageId::One => NegativeSource::Random,
            _ => NegativeSource::pool(mine_hard_negatives(
                source,
                &cascade,
                stage,
                &cfg.mining,
                cfg.seed.wrapping_add(stage as u64),
            )?),
        };
        let mut stream = StreamingSource::new(source, stage, negatives)?;
        let log = train_stage(cascade.net_mut(stage), stage, &mut stream, stage_cfg)?;
        hook(stage, &log);
        logs[stage.index()] = log;
    }
    Ok((cascade, logs))
}

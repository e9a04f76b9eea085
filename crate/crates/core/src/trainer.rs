//! The training harness: patch scheduling, augmentation, the optimization
//! loop, test-time augmentation and the training-fraction sweep.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentTransform};
use crate::error::{Error, Result};
use crate::groundtruth::proximity_map;
use crate::model::{EmNet, ModelConfig};
use crate::objectives::{threshold_mask, total_loss, volume_metrics, VolumeMetrics};
use crate::optim::{lr_schedule, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::synth::{extract_patch, SyntheticSample};
use crate::tensor::{Graph, Tensor};
use crate::volume::Volume;

fn default_lr0() -> f64 {
    1e-4
}
fn default_decay_step() -> usize {
    15
}
fn default_decay_rate() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    50
}
fn default_patch_shape() -> [usize; 3] {
    [32, 32, 32]
}
fn default_batch_size() -> usize {
    2
}
fn default_seed() -> u64 {
    42
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_train_fraction() -> f64 {
    1.0
}

/// Optimization hyperparameters and run bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs per learning-rate decay step.
    pub decay_step: usize,
    pub decay_rate: f64,
    pub epochs: usize,
    pub patch_shape: [usize; 3],
    pub batch_size: usize,
    /// Loss trade-off override; falls back to the model config when unset.
    pub lambda: Option<f64>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Train on the leading fraction of the dataset.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: default_lr0(),
            decay_step: default_decay_step(),
            decay_rate: default_decay_rate(),
            epochs: default_epochs(),
            patch_shape: default_patch_shape(),
            batch_size: default_batch_size(),
            lambda: None,
            seed: default_seed(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            train_fraction: default_train_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_step == 0 {
            return Err(Error::Config("decay_step must be positive".into()));
        }
        for &d in &self.patch_shape {
            if d == 0 || d % 8 != 0 {
                return Err(Error::Config(format!(
                    "patch dims must be positive multiples of 8, got {:?}",
                    self.patch_shape
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda must lie in [0, 1], got {l}")));
            }
        }
        if !(0.0 < self.train_fraction && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One training example: image, binary label and normalized proximity map.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Volume,
    pub label: Volume,
    pub proximity: Volume,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
}

impl Dataset {
    /// Attach normalized proximity targets to synthetic samples.
    pub fn from_synthetic(samples: &[SyntheticSample], alpha: f64, d_max: f64) -> Result<Self> {
        let out = samples
            .iter()
            .map(|s| {
                let prox = proximity_map(s.label.shape(), &s.centerline, alpha, d_max)?;
                Ok(TrainSample {
                    image: s.image.clone(),
                    label: s.label.clone(),
                    proximity: prox.normalized,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples: out })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self, patch: [usize; 3]) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArg("dataset is empty".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let shape = s.image.shape();
            if s.label.shape() != shape || s.proximity.shape() != shape {
                return Err(Error::Shape(format!(
                    "sample {i}: image/label/proximity shapes differ"
                )));
            }
            if !s.label.is_binary() {
                return Err(Error::Data(format!("sample {i}: label is not binary")));
            }
            for a in 0..3 {
                if patch[a] > shape[a] {
                    return Err(Error::InvalidArg(format!(
                        "sample {i}: patch {patch:?} exceeds volume {shape:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-epoch record written to the JSON-lines metrics log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub train_jac: f64,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// All grid-aligned patch corners (stride = patch size) of every sample.
fn epoch_positions(data: &[&TrainSample], patch: [usize; 3]) -> Vec<(usize, [usize; 3])> {
    let mut positions = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let shape = s.image.shape();
        let mut z = 0;
        while z + patch[0] <= shape[0] {
            let mut y = 0;
            while y + patch[1] <= shape[1] {
                let mut x = 0;
                while x + patch[2] <= shape[2] {
                    positions.push((i, [z, y, x]));
                    x += patch[2];
                }
                y += patch[1];
            }
            z += patch[0];
        }
    }
    positions
}

fn volume_to_row(v: &Volume, out: &mut Vec<f32>) {
    match v.data() {
        crate::volume::VolumeData::F32(d) => out.extend_from_slice(d),
        crate::volume::VolumeData::U8(d) => out.extend(d.iter().map(|&b| b as f32)),
    }
}

/// Train in place for `cfg.epochs` epochs starting at `start_epoch`
/// (nonzero when resuming). Returns the per-epoch logs; each is also
/// written to `log_sink` as one JSON line.
pub fn train(
    net: &EmNet,
    params: &mut ParamSet<f32>,
    opt: &mut AdamState<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let n_train = subset_len(data.len(), cfg.train_fraction);
    let subset: Vec<&TrainSample> = data.samples[..n_train].iter().collect();
    let patch = cfg.patch_shape;
    data.validate(patch)?;
    let lambda = if net.config.single_task {
        1.0
    } else {
        cfg.lambda.unwrap_or(net.config.lambda)
    };
    let adam = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in start_epoch..start_epoch + cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr0, cfg.decay_step, cfg.decay_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let mut positions = epoch_positions(&subset, patch);
        for i in (1..positions.len()).rev() {
            positions.swap(i, rng.random_range(0..=i));
        }

        let mut seg_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut total_sum = 0.0;
        let mut batches = 0usize;
        let mut inter = 0u64;
        let mut union = 0u64;

        for chunk in positions.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut image_row = Vec::with_capacity(b * patch[0] * patch[1] * patch[2]);
            let mut label_row = Vec::with_capacity(image_row.capacity());
            let mut prox_row = Vec::with_capacity(image_row.capacity());
            for &(si, corner) in chunk {
                let s = subset[si];
                let img = extract_patch(&s.image, corner, patch)?;
                let lab = extract_patch(&s.label, corner, patch)?;
                let prx = extract_patch(&s.proximity, corner, patch)?;
                let (img, lab, prx, _) = augment(&img, &lab, &prx, &mut rng)?;
                volume_to_row(&img, &mut image_row);
                volume_to_row(&lab, &mut label_row);
                volume_to_row(&prx, &mut prox_row);
            }
            let bshape = [b, 1, patch[0], patch[1], patch[2]];
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_vec(&bshape, image_row)?);
            let label_t = Tensor::from_vec(&bshape, label_row)?;
            let label = g.constant(label_t.clone());
            let prox = g.constant(Tensor::from_vec(&bshape, prox_row)?);
            let vars = params.bind_all(&mut g);

            let out = net.forward(&mut g, x, &vars)?;
            let (loss, values) = total_loss(
                &mut g,
                out.seg_prob,
                label,
                out.proximity,
                out.proximity.map(|_| prox),
                lambda,
            )?;
            params.zero_grads();
            g.backward(loss)?;
            params.accumulate_from_graph(&g);
            opt.adam_step(params, &adam, lr);

            seg_sum += values.seg;
            reg_sum += values.reg;
            total_sum += values.total;
            batches += 1;
            for (&p, &y) in g.value(out.seg_prob).data().iter().zip(label_t.data()) {
                let pm = p >= 0.5;
                let ym = y >= 0.5;
                inter += u64::from(pm && ym);
                union += u64::from(pm || ym);
            }
        }

        let n = batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            seg_loss: seg_sum / n,
            reg_loss: reg_sum / n,
            total_loss: total_sum / n,
            train_jac: if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            },
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &log)?;
            writeln!(sink)?;
        }
        logs.push(log);
    }
    Ok(logs)
}

pub(crate) fn subset_len(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total.max(1))
}

fn volume_to_tensor(v: &Volume) -> Result<Tensor<f32>> {
    let [d, h, w] = v.shape();
    Tensor::from_vec(&[1, 1, d, h, w], v.as_f32()?.to_vec())
}

/// Single forward pass over a whole volume; returns foreground
/// probabilities.
pub fn predict(net: &EmNet, params: &ParamSet<f32>, image: &Volume) -> Result<Volume> {
    let input = volume_to_tensor(image)?;
    let (seg, _) = crate::model::infer(net, params, &input)?;
    Volume::from_f32(image.shape(), seg.into_data())
}

/// Average the predictions over the identity and the three in-plane
/// quarter-turn rotations, each mapped back through its inverse.
///
/// An input fixed by a quarter turn is fixed by the whole rotation group,
/// so all four passes coincide and the averaging is skipped outright.
pub fn predict_tta(net: &EmNet, params: &ParamSet<f32>, image: &Volume) -> Result<Volume> {
    let [_, h, w] = image.shape();
    if h != w {
        return Err(Error::InvalidArg(format!(
            "test-time rotation requires square in-plane dims, got {h}x{w}"
        )));
    }
    if AugmentTransform::rotation(1).apply(image)? == *image {
        return predict(net, params, image);
    }
    let mut acc = vec![0f32; image.numel()];
    for k in 0..4u8 {
        let t = AugmentTransform::rotation(k);
        let rotated = t.apply(image)?;
        let prob = predict(net, params, &rotated)?;
        let restored = t.apply_inverse(&prob)?;
        for (a, &p) in acc.iter_mut().zip(restored.as_f32()?) {
            *a += p;
        }
    }
    for a in &mut acc {
        *a *= 0.25;
    }
    Volume::from_f32(image.shape(), acc)
}

/// Mean metrics across an evaluation set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeanMetrics {
    pub dice: f64,
    pub jac: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub mean: MeanMetrics,
}

/// Evaluate thresholded predictions against the dataset labels.
pub fn evaluate(
    net: &EmNet,
    params: &ParamSet<f32>,
    data: &Dataset,
    tta: bool,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArg("evaluation dataset is empty".into()));
    }
    let mut per_volume = Vec::with_capacity(data.len());
    for s in &data.samples {
        let prob = if tta {
            predict_tta(net, params, &s.image)?
        } else {
            predict(net, params, &s.image)?
        };
        per_volume.push(volume_metrics(&threshold_mask(&prob)?, &s.label)?);
    }
    let n = per_volume.len() as f64;
    let mean = MeanMetrics {
        dice: per_volume.iter().map(|m| m.dice).sum::<f64>() / n,
        jac: per_volume.iter().map(|m| m.jac).sum::<f64>() / n,
    };
    Ok(EvalReport { per_volume, mean })
}

/// One row of the training-fraction sweep report.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub variant: String,
    pub dice: f64,
    pub jac: f64,
}

/// Train multi-task and single-task variants on leading fractions of the
/// training set and evaluate each on a fixed held-out set.
pub fn fraction_sweep(
    train_data: &Dataset,
    holdout: &Dataset,
    fractions: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if train_data.is_empty() {
        return Err(Error::InvalidArg(
            "sweep requires a non-empty training set".into(),
        ));
    }
    for &f in fractions {
        if !(0.0 < f && f <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "fractions must lie in (0, 1], got {f}"
            )));
        }
        if (f * train_data.len() as f64).ceil() < 1.0 {
            return Err(Error::InvalidArg(format!(
                "fraction {f} selects zero samples"
            )));
        }
    }
    let mut rows = Vec::with_capacity(fractions.len() * 2);
    for &fraction in fractions {
        for single_task in [false, true] {
            let variant_cfg = ModelConfig {
                single_task,
                ..model_cfg.clone()
            };
            let run_cfg = TrainConfig {
                train_fraction: fraction,
                ..cfg.clone()
            };
            let (net, mut params) = EmNet::build::<f32>(variant_cfg, cfg.seed)?;
            let mut opt = AdamState::new(&params);
            train(&net, &mut params, &mut opt, train_data, &run_cfg, 0, None)?;
            let report = evaluate(&net, &params, holdout, false)?;
            rows.push(SweepRow {
                fraction,
                variant: if single_task {
                    "single_task"
                } else {
                    "multi_task"
                }
                .to_string(),
                dice: report.mean.dice,
                jac: report.mean.jac,
            });
        }
    }
    Ok(rows)
}

/// Render sweep rows as `fraction,variant,dice,jac` CSV.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,variant,dice,jac\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.fraction, r.variant, r.dice, r.jac
        ));
    }
    out
}

//! Ensembles of independently trained networks.
//!
//! Each member draws its own hyperparameters and its own patch set, trains
//! alone, and contributes equally to the per-pixel vessel probability:
//! `p(vessel | x) = (1/k) Σ_j p(vessel | m_j, patch at x)`.
//!
//! Every random stream of a member is derived from its seed alone, so a
//! member is reproducible from the manifest regardless of how many members
//! train at once.

use std::path::Path;

use rayon::prelude::*;

use crate::codec::{parse_key_values, write_atomic, ByteReader, ByteWriter};
use crate::data::raster::Raster;
use crate::data::{
    sample_training_set, write_patch, FundusSample, Normalization, PatchSpec, TrainingSet,
    PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::layers::{LayerParams, Mode};
use crate::network::{Architecture, VesselNet, HIDDEN_CHOICES, LAYER_NAMES};
use crate::optim::{RmsPropConfig, RmsPropState};
use crate::tensor::{Rng, Tensor};

/// Per-member hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyperparams {
    /// Dropout retention probability.
    pub retention_prob: f64,
    pub l2: f64,
    pub hidden_units: usize,
    pub seed: u64,
}

impl ModelHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention_prob > 0.0 && self.retention_prob <= 1.0) {
            return Err(Error::Parameter(format!(
                "retention probability {} outside (0, 1]",
                self.retention_prob
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Parameter(format!(
                "l2 coefficient {} must be finite and >= 0",
                self.l2
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::Parameter("hidden units must be >= 1".into()));
        }
        Ok(())
    }
}

/// Distributions the member hyperparameters are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperparamRanges {
    pub retention: (f64, f64),
    pub l2: (f64, f64),
    pub hidden_choices: Vec<usize>,
}

impl Default for HyperparamRanges {
    fn default() -> Self {
        HyperparamRanges {
            retention: (0.5, 0.9),
            l2: (1e-3, 2.5e-3),
            hidden_choices: HIDDEN_CHOICES.to_vec(),
        }
    }
}

impl HyperparamRanges {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.retention;
        let (l0, l1) = self.l2;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 1.0) {
            return Err(Error::Parameter(format!(
                "retention range [{r0}, {r1}] must lie in (0, 1]"
            )));
        }
        if !(l0 >= 0.0 && l0 <= l1 && l1.is_finite()) {
            return Err(Error::Parameter(format!(
                "l2 range [{l0}, {l1}] is empty or negative"
            )));
        }
        if self.hidden_choices.is_empty()
            || self
                .hidden_choices
                .iter()
                .any(|h| !HIDDEN_CHOICES.contains(h))
        {
            return Err(Error::Parameter(format!(
                "hidden choices {:?} must be a non-empty subset of {HIDDEN_CHOICES:?}",
                self.hidden_choices
            )));
        }
        Ok(())
    }
}

/// Draws retention, l2, hidden units and member seed, in that order.
pub fn sample_hyperparams(rng: &mut Rng, ranges: &HyperparamRanges) -> ModelHyperparams {
    let retention_prob = rng.uniform(ranges.retention.0, ranges.retention.1);
    let l2 = rng.uniform(ranges.l2.0, ranges.l2.1);
    let hidden_units =
        ranges.hidden_choices[rng.below(ranges.hidden_choices.len() as u64) as usize];
    let seed = rng.next_u64();
    ModelHyperparams {
        retention_prob,
        l2,
        hidden_units,
        seed,
    }
}

/// The independent random streams of one member.
struct MemberStreams {
    sampling: Rng,
    init: Rng,
    order: Rng,
    dropout: Rng,
}

impl MemberStreams {
    fn new(seed: u64) -> Self {
        let mut root = Rng::new(seed);
        MemberStreams {
            sampling: root.split(),
            init: root.split(),
            order: root.split(),
            dropout: root.split(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    /// Anneal after every step instead of after every epoch.
    pub anneal_per_iteration: bool,
    /// Sample vessel and background centers in equal numbers.
    pub balance: bool,
    /// Subtract the training-set FOV channel means from every patch.
    pub mean_subtract: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 200,
            optimizer: RmsPropConfig::default(),
            anneal_per_iteration: false,
            balance: false,
            mean_subtract: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training patches classified correctly during the epoch
    /// (dropout active).
    pub train_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Evaluation-mode accuracy over the whole training set after the last
    /// epoch.
    pub final_accuracy: f64,
}

impl TrainingLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

pub fn train_member(
    hyper: &ModelHyperparams,
    set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(VesselNet, TrainingLog)> {
    train_member_observed(hyper, set, config, &|_| {})
}

/// [`train_member`], calling `observer` after every epoch.
pub fn train_member_observed(
    hyper: &ModelHyperparams,
    set: &TrainingSet,
    config: &TrainConfig,
    observer: &dyn Fn(&EpochRecord),
) -> Result<(VesselNet, TrainingLog)> {
    hyper.validate()?;
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mut streams = MemberStreams::new(hyper.seed);
    let mut net = VesselNet::build(hyper, &mut streams.init)?;
    let mut opt = RmsPropState::new(config.optimizer)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        streams.order.shuffle(&mut order);
        let learning_rate = opt.effective_lr();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = set.batch::<f32>(chunk)?;
            let (loss, probs) =
                net.loss_and_grads_mode(&x, &labels, hyper.l2, Mode::Train, &mut streams.dropout)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    member: None,
                    epoch,
                    step,
                });
            }
            opt.step(net.layers_mut())?;
            if config.anneal_per_iteration {
                opt.advance_epoch();
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += count_correct(&probs, &labels);
        }
        if !config.anneal_per_iteration {
            opt.advance_epoch();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / set.len() as f64,
            train_accuracy: correct as f64 / set.len() as f64,
            learning_rate,
        };
        observer(&record);
        log.epochs.push(record);
    }
    net.zero_grads();
    log.final_accuracy = set_accuracy(&net, set, config.batch_size)?;
    Ok((net, log))
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    probs
        .data()
        .chunks_exact(2)
        .zip(labels)
        .filter(|(p, &l)| usize::from(p[1] > p[0]) == l)
        .count()
}

/// Evaluation-mode accuracy of `net` over every patch of `set`.
pub fn set_accuracy(net: &VesselNet, set: &TrainingSet, batch_size: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = set.batch::<f32>(chunk)?;
        correct += count_correct(&net.predict(&x)?, &labels);
    }
    Ok(correct as f64 / set.len().max(1) as f64)
}

/// Everything needed to train an ensemble besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub k: usize,
    pub patches_per_model: usize,
    pub ranges: HyperparamRanges,
    pub train: TrainConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: 12,
            patches_per_model: 60000,
            ranges: HyperparamRanges::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Manifest entry of one trained member.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberRecord {
    pub hyper: ModelHyperparams,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// What produced an ensemble; stored as text in the model file.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub patches_per_model: usize,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub members: Vec<MemberRecord>,
}

const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn to_text(&self, members: &[VesselNet]) -> String {
        let t = &self.train;
        let o = &t.optimizer;
        let m = self.normalization.channel_mean;
        let mut s = format!(
            "format_version = {MANIFEST_VERSION}\nk = {}\npatches_per_model = {}\nepochs = {}\nbatch_size = {}\n\
             base_lr = {}\nanneal = {}\nanneal_interval = {}\nrmsprop_rho = {}\nrmsprop_eps = {}\n\
             balance = {}\nmean_subtract = {}\nchannel_mean = {},{},{}\n",
            self.members.len(),
            self.patches_per_model,
            t.epochs,
            t.batch_size,
            o.base_lr,
            o.anneal,
            if t.anneal_per_iteration { "iteration" } else { "epoch" },
            o.rho,
            o.eps,
            t.balance,
            t.mean_subtract,
            m[0],
            m[1],
            m[2],
        );
        for (i, (rec, net)) in self.members.iter().zip(members).enumerate() {
            let h = &rec.hyper;
            let a = net.architecture();
            s += &format!(
                "member.{i}.retention_prob = {}\nmember.{i}.l2 = {}\nmember.{i}.hidden_units = {}\nmember.{i}.seed = {}\n\
                 member.{i}.geometry = {},{},{},{},{},{},{}\nmember.{i}.final_loss = {}\nmember.{i}.final_accuracy = {}\n",
                h.retention_prob,
                h.l2,
                h.hidden_units,
                h.seed,
                a.input_channels,
                a.input_size,
                a.filters,
                a.kernel,
                a.stride,
                a.pad,
                a.pool,
                rec.final_loss,
                rec.final_accuracy,
            );
        }
        s
    }

    /// Parses the manifest text, returning it with each member's geometry.
    pub fn parse(text: &str) -> std::result::Result<(Manifest, Vec<Architecture>), String> {
        let kv =
            parse_key_values(text).map_err(|(line, e)| format!("manifest line {line}: {e}"))?;
        let get = |key: &str| -> std::result::Result<&str, String> {
            kv.iter()
                .find(|e| e.key == key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| format!("manifest lacks `{key}`"))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("manifest `{key}` has invalid value {v:?}"))
        }
        let field = |key: &str| get(key).and_then(|v| num::<f64>(key, v));
        let count = |key: &str| get(key).and_then(|v| num::<usize>(key, v));
        let flag = |key: &str| get(key).and_then(|v| num::<bool>(key, v));
        let version: u32 = get("format_version").and_then(|v| num("format_version", v))?;
        if version != MANIFEST_VERSION {
            return Err(format!("unsupported manifest version {version}"));
        }
        let train = TrainConfig {
            epochs: count("epochs")?,
            batch_size: count("batch_size")?,
            optimizer: RmsPropConfig {
                base_lr: field("base_lr")?,
                anneal: field("anneal")?,
                rho: field("rmsprop_rho")?,
                eps: field("rmsprop_eps")?,
            },
            anneal_per_iteration: match get("anneal_interval")? {
                "epoch" => false,
                "iteration" => true,
                other => {
                    return Err(format!(
                        "manifest `anneal_interval` has invalid value {other:?}"
                    ))
                }
            },
            balance: flag("balance")?,
            mean_subtract: flag("mean_subtract")?,
        };
        let means: Vec<f32> = get("channel_mean")?
            .split(',')
            .map(|v| num("channel_mean", v.trim()))
            .collect::<std::result::Result<_, _>>()?;
        let channel_mean: [f32; 3] = means
            .try_into()
            .map_err(|_| "manifest `channel_mean` needs 3 values".to_string())?;
        let k = count("k")?;
        let mut members = Vec::with_capacity(k);
        let mut geometry = Vec::with_capacity(k);
        for i in 0..k {
            let key = |f: &str| format!("member.{i}.{f}");
            let hyper = ModelHyperparams {
                retention_prob: field(&key("retention_prob"))?,
                l2: field(&key("l2"))?,
                hidden_units: count(&key("hidden_units"))?,
                seed: get(&key("seed")).and_then(|v| num(&key("seed"), v))?,
            };
            let g: Vec<usize> = get(&key("geometry"))?
                .split(',')
                .map(|v| num(&key("geometry"), v.trim()))
                .collect::<std::result::Result<_, _>>()?;
            let [input_channels, input_size, filters, kernel, stride, pad, pool] = g[..] else {
                return Err(format!("manifest `{}` needs 7 values", key("geometry")));
            };
            geometry.push(Architecture {
                input_channels,
                input_size,
                filters,
                kernel,
                stride,
                pad,
                pool,
                hidden_units: hyper.hidden_units,
            });
            members.push(MemberRecord {
                hyper,
                final_loss: field(&key("final_loss"))?,
                final_accuracy: field(&key("final_accuracy"))?,
            });
        }
        let manifest = Manifest {
            patches_per_model: count("patches_per_model")?,
            train,
            normalization: Normalization { channel_mean },
            members,
        };
        Ok((manifest, geometry))
    }
}

/// `k ≥ 1` trained members and the manifest describing them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    members: Vec<VesselNet>,
    manifest: Manifest,
}

impl EnsembleModel {
    pub fn new(members: Vec<VesselNet>, manifest: Manifest) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Parameter(
                "an ensemble needs at least one member".into(),
            ));
        }
        if members.len() != manifest.members.len() {
            return Err(Error::Parameter(format!(
                "{} members but {} manifest entries",
                members.len(),
                manifest.members.len()
            )));
        }
        if let Some(bad) = members
            .iter()
            .find(|m| m.architecture().input_size != PATCH_SIZE)
        {
            return Err(Error::Parameter(format!(
                "member input size {} is not {PATCH_SIZE}",
                bad.architecture().input_size
            )));
        }
        Ok(EnsembleModel { members, manifest })
    }

    /// Wraps already-trained networks with an otherwise default manifest.
    pub fn from_members(members: Vec<VesselNet>, normalization: Normalization) -> Result<Self> {
        let records = members
            .iter()
            .map(|m| MemberRecord {
                hyper: m.hyper().clone(),
                final_loss: f64::NAN,
                final_accuracy: f64::NAN,
            })
            .collect();
        let manifest = Manifest {
            patches_per_model: 0,
            train: TrainConfig::default(),
            normalization,
            members: records,
        };
        Self::new(members, manifest)
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[VesselNet] {
        &self.members
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// The ensemble of the selected members, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.k()) {
            return Err(Error::Parameter(format!(
                "member {i} out of range for k = {}",
                self.k()
            )));
        }
        let members = indices.iter().map(|&i| self.members[i].clone()).collect();
        let records = indices
            .iter()
            .map(|&i| self.manifest.members[i].clone())
            .collect();
        Self::new(
            members,
            Manifest {
                members: records,
                ..self.manifest.clone()
            },
        )
    }
}

/// Trains `config.k` members on patches drawn from `samples`.
/// Hyperparameters are drawn serially from `rng`; members then train in
/// parallel on the current rayon pool. `observer` receives the member
/// index and each epoch record.
pub fn train_ensemble(
    samples: &[FundusSample],
    config: &EnsembleConfig,
    rng: &mut Rng,
    observer: &(dyn Fn(usize, &EpochRecord) + Sync),
) -> Result<EnsembleModel> {
    if config.k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    config.ranges.validate()?;
    config.train.validate()?;
    let hypers: Vec<ModelHyperparams> = (0..config.k)
        .map(|_| sample_hyperparams(rng, &config.ranges))
        .collect();
    let normalization = if config.train.mean_subtract {
        Normalization::fov_mean(samples)
    } else {
        Normalization::default()
    };
    let trained: Vec<(VesselNet, TrainingLog)> = hypers
        .par_iter()
        .enumerate()
        .map(|(i, hyper)| {
            let mut sampling = MemberStreams::new(hyper.seed).sampling;
            let set = sample_training_set(
                samples,
                config.patches_per_model,
                &mut sampling,
                config.train.balance,
            )?
            .with_normalization(normalization);
            train_member_observed(hyper, &set, &config.train, &|r| observer(i, r)).map_err(|e| {
                match e {
                    Error::Training {
                        member: None,
                        epoch,
                        step,
                    } => Error::Training {
                        member: Some(i),
                        epoch,
                        step,
                    },
                    other => other,
                }
            })
        })
        .collect::<Result<_>>()?;
    let records = trained
        .iter()
        .map(|(net, log)| MemberRecord {
            hyper: net.hyper().clone(),
            final_loss: log.final_loss(),
            final_accuracy: log.final_accuracy,
        })
        .collect();
    let manifest = Manifest {
        patches_per_model: config.patches_per_model,
        train: config.train,
        normalization,
        members: records,
    };
    EnsembleModel::new(trained.into_iter().map(|(net, _)| net).collect(), manifest)
}

/// Per-pixel vessel probability; pixels outside the field of view are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} map with {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// `PMAP`, width and height as u32, then row-major f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"PMAP");
        w.u32(self.width as u32);
        w.u32(self.height as u32);
        w.f32s(self.values.iter().copied());
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != b"PMAP" {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected PMAP".into(),
            });
        }
        let (width, height) = (r.u32()? as usize, r.u32()? as usize);
        if width == 0 || height == 0 {
            return r.error(format!("empty {width}x{height} map"));
        }
        let at = r.offset();
        let values = r.f32s(width * height)?;
        r.expect_end()?;
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format {
                offset: at + 4 * i as u64,
                reason: format!("probability {} outside [0, 1]", values[i]),
            });
        }
        Ok(ProbabilityMap {
            width,
            height,
            values,
        })
    }

    /// 8-bit grayscale rendering, `round(p·255)`.
    pub fn to_raster(&self) -> Raster {
        let data = self
            .values
            .iter()
            .map(|&p| (p * 255.0).round() as u8)
            .collect();
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Ensemble prediction for every FOV pixel of `sample`, evaluated
/// `batch_size` patches at a time in parallel over batches. Members are
/// summed in a fixed order, so the map does not depend on the thread count.
pub fn predict_image(
    model: &EnsembleModel,
    sample: &FundusSample,
    batch_size: usize,
) -> Result<ProbabilityMap> {
    let (w, h) = (sample.width(), sample.height());
    let pixels: Vec<usize> = sample
        .fov()
        .iter()
        .enumerate()
        .filter(|(_, &f)| f == 1)
        .map(|(p, _)| p)
        .collect();
    let plen = 3 * PATCH_SIZE * PATCH_SIZE;
    let norm = &model.manifest.normalization;
    let k = model.k() as f64;
    let batches: Vec<Vec<f32>> = pixels
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let mut data = vec![0f32; chunk.len() * plen];
            for (&p, out) in chunk.iter().zip(data.chunks_exact_mut(plen)) {
                write_patch(
                    sample,
                    PatchSpec {
                        row: p / w,
                        col: p % w,
                    },
                    norm,
                    out,
                )?;
            }
            let x = Tensor::new(&[chunk.len(), 3, PATCH_SIZE, PATCH_SIZE], data)?;
            let mut sum = vec![0f64; chunk.len()];
            for member in &model.members {
                let probs = member.predict(&x)?;
                for (s, row) in sum.iter_mut().zip(probs.data().chunks_exact(2)) {
                    *s += row[1] as f64;
                }
            }
            Ok(sum.into_iter().map(|s| (s / k) as f32).collect())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0f32; w * h];
    for (&p, v) in pixels.iter().zip(batches.iter().flatten()) {
        values[p] = v.clamp(0.0, 1.0);
    }
    ProbabilityMap::new(w, h, values)
}

pub const MODEL_VERSION: u32 = 1;

fn tensor_names() -> impl Iterator<Item = (String, bool)> {
    LAYER_NAMES
        .into_iter()
        .flat_map(|l| [(format!("{l}.weights"), true), (format!("{l}.bias"), false)])
}

impl EnsembleModel {
    /// `VNET`, version, k, length-prefixed manifest, then every parameter
    /// tensor of every member as name, rank, dims and raw f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"VNET");
        w.u32(MODEL_VERSION);
        w.u32(self.k() as u32);
        let text = self.manifest.to_text(&self.members);
        w.u32(text.len() as u32);
        w.bytes(text.as_bytes());
        for member in &self.members {
            let tensors = member.layers().iter().flat_map(|l| [&l.weights, &l.bias]);
            for ((name, _), t) in tensor_names().zip(tensors) {
                w.u16(name.len() as u16);
                w.bytes(name.as_bytes());
                w.u8(t.rank() as u8);
                t.dims().iter().for_each(|&d| w.u32(d as u32));
                w.f32s(t.data().iter().copied());
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != b"VNET" {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic, expected VNET".into(),
            });
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported model version {version}"),
            });
        }
        let k = r.u32()? as usize;
        let len = r.u32()? as usize;
        let text_at = r.offset();
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format {
            offset: text_at,
            reason: format!("manifest is not UTF-8: {e}"),
        })?;
        let (manifest, geometry) = Manifest::parse(text).map_err(|reason| Error::Format {
            offset: text_at,
            reason,
        })?;
        if manifest.members.len() != k || k == 0 {
            return Err(Error::Format {
                offset: 8,
                reason: format!(
                    "header says k = {k}, manifest lists {}",
                    manifest.members.len()
                ),
            });
        }
        let mut members = Vec::with_capacity(k);
        for (record, arch) in manifest.members.iter().zip(&geometry) {
            let dims = arch.weight_dims().map_err(|e| Error::Format {
                offset: text_at,
                reason: e.to_string(),
            })?;
            let mut tensors = Vec::with_capacity(10);
            for (name, is_weight) in tensor_names() {
                let at = r.offset();
                let n = r.u16()? as usize;
                if r.take(n)? != name.as_bytes() {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("expected tensor {name}"),
                    });
                }
                let rank = r.u8()? as usize;
                let shape: Vec<usize> = (0..rank)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<_>>()?;
                let layer = &dims[tensors.len() / 2];
                let expected = if is_weight {
                    layer.clone()
                } else {
                    vec![if layer.len() == 4 { layer[0] } else { layer[1] }]
                };
                if shape != expected {
                    return Err(Error::Format {
                        offset: at,
                        reason: format!("{name} has dims {shape:?}, expected {expected:?}"),
                    });
                }
                let values = r.f32s(shape.iter().product())?;
                tensors.push(Tensor::new(&shape, values)?);
            }
            let mut it = tensors.into_iter();
            let layers = std::array::from_fn(|_| {
                let w = it.next().expect("ten tensors");
                LayerParams::new(w, it.next().expect("ten tensors"))
            });
            members.push(VesselNet::from_layers(*arch, record.hyper.clone(), layers)?);
        }
        r.expect_end()?;
        EnsembleModel::new(members, manifest).map_err(|e| Error::Format {
            offset: text_at,
            reason: e.to_string(),
        })
    }
}

pub fn save_model(model: &EnsembleModel, path: &Path) -> Result<()> {
    write_atomic(path, &model.to_bytes())
}

pub fn load_model(path: &Path) -> Result<EnsembleModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    EnsembleModel::from_bytes(&bytes)
}

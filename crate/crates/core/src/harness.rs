//! Experiment driver: trains the bare classifier and its augmented variants
//! from a shared initialization, applies the learning-rate schedule and the
//! freeze rule, and reports accuracy series with the minimum-available-epoch
//! metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Flavor, Split};
use crate::error::{Error, Result};
use crate::framework::{predict, sample_grads};
use crate::nn::{lr_at, Adam, AdamHyper, LrSchedule, ModelSpec, ModelState, ParamSet, RateGroup};
use crate::par;
use crate::tensor3::Tensor3;
use crate::tlayer::{Activation, Preset, TAdafParams};
use crate::tprod::TprodKernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Cifar {
        flavor: Flavor,
        dir: PathBuf,
        /// Stratified training subset size; `None` keeps the full split.
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    Synth {
        classes: usize,
        per_class: usize,
        side: usize,
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Lenet5,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleId {
    /// Two stages, 0.1 then 0.02.
    Lenet,
    /// Four stages, 0.1 / 0.02 / 0.004 / 0.0008.
    Deep,
    /// Two stages, 1e-3 then 2e-4.
    Desk,
}

impl ScheduleId {
    pub fn build(self, epochs: usize) -> Result<LrSchedule> {
        match self {
            ScheduleId::Lenet => LrSchedule::lenet(epochs),
            ScheduleId::Deep => LrSchedule::deep(epochs),
            ScheduleId::Desk => LrSchedule::desk(epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub model: ModelKind,
    /// Augmented variants trained next to the always-present baseline.
    pub presets: Vec<Preset>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleId,
    pub freeze_fraction: f64,
    pub activation: Activation,
    pub kernel: TprodKernel,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Cifar {
                flavor: Flavor::Cifar10,
                dir: PathBuf::from("data"),
                train_subset: None,
                test_subset: None,
            },
            data_seed: 0,
            model: ModelKind::Lenet5,
            presets: vec![Preset::P333],
            epochs: 100,
            batch_size: 32,
            schedule: ScheduleId::Lenet,
            freeze_fraction: 0.6,
            activation: Activation::Identity,
            kernel: TprodKernel::Fft,
            seed: 0,
            output: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn parse_opt_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "all" | "none" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

impl ExperimentConfig {
    /// Sets one field from its textual `key=value` form. Keys match the CLI
    /// flag names with dashes or underscores.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "dataset" => {
                self.dataset = match value {
                    "synth" => match &self.dataset {
                        DatasetSpec::Synth { .. } => self.dataset.clone(),
                        DatasetSpec::Cifar { .. } => DatasetSpec::Synth {
                            classes: 4,
                            per_class: 200,
                            side: 8,
                            test_per_class: 50,
                        },
                    },
                    other => {
                        let flavor: Flavor = other.parse()?;
                        match &self.dataset {
                            DatasetSpec::Cifar {
                                dir,
                                train_subset,
                                test_subset,
                                ..
                            } => DatasetSpec::Cifar {
                                flavor,
                                dir: dir.clone(),
                                train_subset: *train_subset,
                                test_subset: *test_subset,
                            },
                            DatasetSpec::Synth { .. } => DatasetSpec::Cifar {
                                flavor,
                                dir: PathBuf::from("data"),
                                train_subset: None,
                                test_subset: None,
                            },
                        }
                    }
                }
            }
            "data_dir" | "subset" | "test_subset" => match &mut self.dataset {
                DatasetSpec::Cifar {
                    dir,
                    train_subset,
                    test_subset,
                    ..
                } => match key.as_str() {
                    "data_dir" => *dir = PathBuf::from(value),
                    "subset" => *train_subset = parse_opt_count(&key, value)?,
                    _ => *test_subset = parse_opt_count(&key, value)?,
                },
                DatasetSpec::Synth { .. } => {
                    return Err(Error::Config(format!("`{key}` applies to CIFAR datasets only")))
                }
            },
            "synth_classes" | "synth_per_class" | "synth_side" | "synth_test_per_class" => {
                match &mut self.dataset {
                    DatasetSpec::Synth {
                        classes,
                        per_class,
                        side,
                        test_per_class,
                    } => {
                        let v = parse_num(&key, value)?;
                        match key.as_str() {
                            "synth_classes" => *classes = v,
                            "synth_per_class" => *per_class = v,
                            "synth_side" => *side = v,
                            _ => *test_per_class = v,
                        }
                    }
                    DatasetSpec::Cifar { .. } => {
                        return Err(Error::Config(format!(
                            "`{key}` applies to the synthetic dataset only"
                        )))
                    }
                }
            }
            "data_seed" => self.data_seed = parse_num(&key, value)?,
            "model" => {
                self.model = match value {
                    "lenet5" => ModelKind::Lenet5,
                    "mlp" => ModelKind::Mlp {
                        hidden: match self.model {
                            ModelKind::Mlp { hidden } => hidden,
                            ModelKind::Lenet5 => 64,
                        },
                    },
                    other => return Err(Error::Config(format!("unknown model `{other}`"))),
                }
            }
            "hidden" => {
                let h = parse_num(&key, value)?;
                match &mut self.model {
                    ModelKind::Mlp { hidden } => *hidden = h,
                    ModelKind::Lenet5 => {
                        return Err(Error::Config("`hidden` applies to the mlp model only".into()))
                    }
                }
            }
            "preset" | "presets" => {
                let mut presets = Vec::new();
                for tok in value.split(',').filter(|t| !t.trim().is_empty()) {
                    let p: Preset = tok.parse()?;
                    if p.is_armed() && !presets.contains(&p) {
                        presets.push(p);
                    }
                }
                self.presets = presets;
            }
            "epochs" => self.epochs = parse_num(&key, value)?,
            "batch_size" => self.batch_size = parse_num(&key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "lenet" => ScheduleId::Lenet,
                    "deep" => ScheduleId::Deep,
                    "desk" => ScheduleId::Desk,
                    other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
                }
            }
            "freeze_fraction" => self.freeze_fraction = parse_num(&key, value)?,
            "activation" => self.activation = value.parse()?,
            "kernel" => self.kernel = value.parse()?,
            "seed" => self.seed = parse_num(&key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("need at least one epoch".into()));
        }
        if !(self.freeze_fraction > 0.0 && self.freeze_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "freeze fraction {} is outside (0, 1]",
                self.freeze_fraction
            )));
        }
        self.schedule.build(self.epochs)?;
        Ok(())
    }

    /// Last epoch in which the augmentation weights are updated.
    pub fn last_learnable_epoch(&self) -> usize {
        // The small epsilon absorbs representation error in products like 0.6 * 10.
        ((self.freeze_fraction * self.epochs as f64) - 1e-9).ceil() as usize
    }

    pub fn model_spec(&self, side: (usize, usize), classes: usize) -> ModelSpec {
        match self.model {
            ModelKind::Lenet5 => ModelSpec::lenet5(side.0, side.1, classes),
            ModelKind::Mlp { hidden } => ModelSpec::mlp(side.0, side.1, hidden, classes),
        }
    }
}

/// Loads `(train, test)` according to the dataset spec.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Cifar {
            flavor,
            dir,
            train_subset,
            test_subset,
        } => {
            let mut train = data::load_cifar(dir, *flavor, Split::Train)?;
            let mut test = data::load_cifar(dir, *flavor, Split::Test)?;
            if let Some(k) = train_subset {
                train = data::subset(&train, *k, cfg.data_seed)?;
            }
            if let Some(k) = test_subset {
                test = data::subset(&test, *k, cfg.data_seed.wrapping_add(1))?;
            }
            Ok((train, test))
        }
        DatasetSpec::Synth {
            classes,
            per_class,
            side,
            test_per_class,
        } => Ok((
            data::synth_dataset(*classes, *per_class, (*side, *side), cfg.data_seed, Split::Train)?,
            data::synth_dataset(
                *classes,
                *test_per_class,
                (*side, *side),
                cfg.data_seed.wrapping_add(1_000_003),
                Split::Test,
            )?,
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAccounting {
    pub base: usize,
    pub additional: usize,
    pub ratio: f64,
}

impl ParamAccounting {
    /// Ratio as a percentage with four decimals, e.g. `0.3957%`.
    pub fn ratio_percent(&self) -> String {
        format!("{:.4}%", self.ratio * 100.0)
    }
}

pub fn param_accounting(model: &ModelState, params: Option<&TAdafParams>) -> ParamAccounting {
    account(model.parameter_count(), params.map_or(0, TAdafParams::parameter_count))
}

pub fn account(base: usize, additional: usize) -> ParamAccounting {
    ParamAccounting {
        base,
        additional,
        ratio: if base == 0 { 0.0 } else { additional as f64 / base as f64 },
    }
}

/// Group metrics of one baseline series and any number of other series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailableEpochs {
    pub lambda_max_baseline: f64,
    /// 1-based epoch of the first occurrence of the baseline maximum.
    pub lambda_max_epoch: usize,
    pub lambda_floor: f64,
    /// 1-based first epoch reaching the floor, per input series.
    pub t_ava: Vec<Option<usize>>,
}

/// Rounds an accuracy down to whole percentage points.
pub fn floor_percent(lambda: f64) -> f64 {
    let mut q = (lambda * 100.0).floor();
    // Representation error can leave e.g. 0.29 * 100 just under 29.
    if (q + 1.0) / 100.0 <= lambda {
        q += 1.0;
    }
    q / 100.0
}

fn first_max(series: &[f64]) -> (usize, f64) {
    series
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
}

/// Minimum-available-epoch metrics: the baseline's best accuracy, that value
/// floored to percentage points, and for every series the first epoch whose
/// accuracy reaches the floor.
pub fn min_available_epochs(acc: &[Vec<f64>], baseline_acc: &[f64]) -> Result<AvailableEpochs> {
    if baseline_acc.is_empty() || acc.iter().any(Vec::is_empty) {
        return Err(Error::Argument("accuracy series must be non-empty".into()));
    }
    if acc
        .iter()
        .flatten()
        .chain(baseline_acc)
        .any(|v| !(0.0..=1.0).contains(v))
    {
        return Err(Error::Argument("accuracies must lie in [0, 1]".into()));
    }
    let (idx, lambda_max) = first_max(baseline_acc);
    let lambda_floor = floor_percent(lambda_max);
    let t_ava = acc
        .iter()
        .map(|s| s.iter().position(|&v| v >= lambda_floor).map(|i| i + 1))
        .collect();
    Ok(AvailableEpochs {
        lambda_max_baseline: lambda_max,
        lambda_max_epoch: idx + 1,
        lambda_floor,
        t_ava,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr_model: f64,
    pub lr_tprod: f64,
    pub frozen: bool,
    pub seconds: f64,
    pub model_checksum: String,
    pub tadaf_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    /// Test accuracy before any update.
    pub initial_test_acc: f64,
    pub epochs: Vec<EpochRecord>,
    pub lambda_max: f64,
    pub lambda_max_epoch: usize,
    pub best_test_error: f64,
    pub t_ava: Option<usize>,
    pub mean_epoch_seconds: f64,
    pub learnable_phase_seconds: f64,
    /// Mean learnable-phase epoch time relative to the baseline's.
    pub time_ratio: f64,
    pub params: ParamAccounting,
    pub params_ratio_percent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub num_classes: usize,
    pub parallel: bool,
    pub lambda_max_baseline: f64,
    pub lambda_min_ava: f64,
    pub variants: Vec<VariantReport>,
}

impl TrainReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

/// Final parameters of one trained variant.
#[derive(Debug, Clone)]
pub struct TrainedVariant {
    pub preset: Preset,
    pub model: ModelState,
    pub tadaf: Option<TAdafParams>,
}

fn argmax(v: &[f64]) -> usize {
    first_max(v).0
}

/// Fraction of `d` classified correctly.
pub fn evaluate(d: &Dataset, model: &ModelState, tadaf: Option<&TAdafParams>) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..d.len()).collect();
    let hits = par::map(&idx, |&i| {
        predict(&d.images[i], model, tadaf).map(|l| usize::from(argmax(&l) == d.labels[i]))
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / d.len() as f64)
}

struct BatchOutcome {
    loss: f64,
    correct: usize,
}

fn train_batch(
    train: &Dataset,
    batch: &[usize],
    model: &mut ModelState,
    tadaf: &mut Option<TAdafParams>,
    tadaf_adam: &mut Option<Adam>,
    lr_model: f64,
    lr_tprod: f64,
) -> Result<BatchOutcome> {
    let frozen_view = tadaf.as_ref();
    let per_sample = par::map(batch, |&i| {
        sample_grads(&train.images[i], train.labels[i], model, frozen_view)
    });

    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamSet::zeros_like(model.params());
    let mut dw: Option<(Tensor3, Tensor3)> = None;
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, &i) in per_sample.into_iter().zip(batch) {
        let s = s?;
        loss += s.loss;
        correct += usize::from(argmax(&s.logits) == train.labels[i]);
        grads.add_assign(&s.model);
        if let (Some(a), Some(b)) = (s.dw1, s.dw2) {
            match &mut dw {
                Some((x, y)) => {
                    x.add_assign(&a)?;
                    y.add_assign(&b)?;
                }
                None => dw = Some((a, b)),
            }
        }
    }
    grads.scale(scale);
    model.adam_step(&grads, lr_model, AdamHyper::default())?;

    if let (Some(params), Some(adam), Some((d1, d2))) = (tadaf.as_mut(), tadaf_adam.as_mut(), dw) {
        if !params.frozen {
            let (g1, g2) = (d1.scale(scale), d2.scale(scale));
            let (w1, w2) = (&mut params.w1, &mut params.w2);
            adam.step(
                &mut [w1.data_mut(), w2.data_mut()],
                &[g1.data(), g2.data()],
                lr_tprod,
            )?;
        }
    }
    Ok(BatchOutcome { loss, correct })
}

/// Trains the baseline and every configured preset. All variants share the
/// initial classifier parameters and the per-epoch sample order.
pub fn train_with_states(cfg: &ExperimentConfig) -> Result<(TrainReport, Vec<TrainedVariant>)> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    train_on(cfg, &train, &test)
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    Ok(train_with_states(cfg)?.0)
}

/// Same as [`train_with_states`] on already loaded data.
pub fn train_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(TrainReport, Vec<TrainedVariant>)> {
    cfg.validate()?;
    let side = train
        .image_dims()
        .ok_or_else(|| Error::Config("empty training set".into()))?;
    let schedule = cfg.schedule.build(cfg.epochs)?;
    let initial = ModelState::new(cfg.model_spec(side, train.num_classes), cfg.seed)?;
    let learnable_until = cfg.last_learnable_epoch();

    let mut variants = vec![Preset::Off];
    variants.extend(cfg.presets.iter().copied().filter(|p| p.is_armed()));

    let mut reports = Vec::with_capacity(variants.len());
    let mut finals = Vec::with_capacity(variants.len());
    for preset in variants {
        let mut model = initial.clone();
        let mut tadaf = preset.weights().map(|w| {
            TAdafParams::new(side.0, side.1, w, cfg.activation).with_kernel(cfg.kernel)
        });
        let mut tadaf_adam = tadaf.as_ref().map(|p| {
            Adam::new(
                &ParamSet(vec![p.w1.data().to_vec(), p.w2.data().to_vec()]),
                AdamHyper::default(),
            )
        });

        let initial_test_acc = evaluate(test, &model, tadaf.as_ref())?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            let started = Instant::now();
            let lr_model = lr_at(&schedule, epoch, RateGroup::Model)?;
            let lr_tprod = lr_at(&schedule, epoch, RateGroup::Tprod)?;
            if let Some(p) = tadaf.as_mut() {
                p.frozen = epoch > learnable_until;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
            order.shuffle(&mut rng);

            let (mut loss, mut correct) = (0.0, 0);
            for batch in order.chunks(cfg.batch_size) {
                let out = train_batch(
                    train,
                    batch,
                    &mut model,
                    &mut tadaf,
                    &mut tadaf_adam,
                    lr_model,
                    lr_tprod,
                )?;
                loss += out.loss;
                correct += out.correct;
            }
            let test_acc = evaluate(test, &model, tadaf.as_ref())?;
            epochs.push(EpochRecord {
                epoch,
                train_loss: loss / train.len() as f64,
                train_acc: correct as f64 / train.len() as f64,
                test_acc,
                lr_model,
                lr_tprod,
                frozen: tadaf.as_ref().is_some_and(|p| p.frozen),
                seconds: started.elapsed().as_secs_f64(),
                model_checksum: format!("{:016x}", model.checksum()),
                tadaf_checksum: tadaf.as_ref().map(|p| format!("{:016x}", p.checksum())),
            });
        }

        let accounting = param_accounting(&model, tadaf.as_ref());
        let test_series: Vec<f64> = epochs.iter().map(|e| e.test_acc).collect();
        let (best_idx, best) = first_max(&test_series);
        let mean = |recs: &[EpochRecord]| {
            if recs.is_empty() {
                0.0
            } else {
                recs.iter().map(|e| e.seconds).sum::<f64>() / recs.len() as f64
            }
        };
        let learnable = &epochs[..learnable_until.min(epochs.len())];
        reports.push(VariantReport {
            variant: preset.name().to_string(),
            initial_test_acc,
            lambda_max: best,
            lambda_max_epoch: best_idx + 1,
            best_test_error: 1.0 - best,
            t_ava: None,
            mean_epoch_seconds: mean(&epochs),
            learnable_phase_seconds: mean(learnable),
            time_ratio: 1.0,
            params: accounting,
            params_ratio_percent: accounting.ratio_percent(),
            epochs,
        });
        finals.push(TrainedVariant {
            preset,
            model,
            tadaf,
        });
    }

    let series: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| r.epochs.iter().map(|e| e.test_acc).collect())
        .collect();
    let metrics = min_available_epochs(&series, &series[0])?;
    let base_time = reports[0].learnable_phase_seconds;
    for (r, t) in reports.iter_mut().zip(&metrics.t_ava) {
        r.t_ava = *t;
        r.time_ratio = if base_time > 0.0 {
            r.learnable_phase_seconds / base_time
        } else {
            0.0
        };
    }

    Ok((
        TrainReport {
            config: cfg.clone(),
            train_size: train.len(),
            test_size: test.len(),
            num_classes: train.num_classes,
            parallel: par::is_parallel(),
            lambda_max_baseline: metrics.lambda_max_baseline,
            lambda_min_ava: metrics.lambda_floor,
            variants: reports,
        },
        finals,
    ))
}

pub const CSV_HEADER: &str = "epoch,variant,train_loss,train_acc,test_acc,lr_model,lr_tprod,frozen";

/// Per-epoch series, one row per (variant, epoch).
pub fn report_csv(r: &TrainReport) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for v in &r.variants {
        for e in &v.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                v.variant,
                e.train_loss,
                e.train_acc,
                e.test_acc,
                e.lr_model,
                e.lr_tprod,
                e.frozen
            );
        }
    }
    s
}

/// Writes `summary.json` and `epochs.csv` into `dir`.
pub fn emit_report(r: &TrainReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = dir.join("summary.json");
    let csv = dir.join("epochs.csv");
    let json = serde_json::to_string_pretty(r)
        .map_err(|e| Error::Format(format!("cannot serialize report: {e}")))?;
    fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
    fs::write(&csv, report_csv(r)).map_err(|e| Error::io(&csv, e))?;
    Ok((summary, csv))
}

/// Writes one checkpoint file per trained variant.
pub fn write_checkpoints(finals: &[TrainedVariant], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    finals
        .iter()
        .map(|v| {
            let path = dir.join(format!("checkpoint_{}.txt", v.preset.name()));
            let mut text = v.model.to_checkpoint(true);
            if let Some(p) = &v.tadaf {
                text.push_str(&p.to_dump());
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Reads a checkpoint written by [`write_checkpoints`].
pub fn read_checkpoint(text: &str) -> Result<(ModelState, Option<TAdafParams>)> {
    let mut tokens = crate::tensor3::dump_tokens(text).peekable();
    let model = ModelState::parse_checkpoint(&mut tokens)?;
    let tadaf = if tokens.peek().is_some() {
        Some(TAdafParams::parse_dump(&mut tokens)?)
    } else {
        None
    };
    if tokens.next().is_some() {
        return Err(Error::Format("trailing data after checkpoint".into()));
    }
    Ok((model, tadaf))
}

/// Per-variant test-accuracy series parsed from an emitted CSV, in first
/// appearance order.
pub fn parse_series_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty series file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    };
    let (ce, cv, ca) = (find("epoch")?, find("variant")?, find("test_acc")?);
    let mut out: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!("row {} has {} fields", n + 2, fields.len())));
        }
        let epoch: usize = fields[ce]
            .parse()
            .map_err(|e| Error::Format(format!("row {}: bad epoch: {e}", n + 2)))?;
        let acc: f64 = fields[ca]
            .parse()
            .map_err(|e| Error::Format(format!("row {}: bad accuracy: {e}", n + 2)))?;
        let name = fields[cv].to_string();
        match out.iter_mut().find(|(v, _)| *v == name) {
            Some((_, s)) => s.push((epoch, acc)),
            None => out.push((name, vec![(epoch, acc)])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(name, mut s)| {
            s.sort_by_key(|&(e, _)| e);
            (name, s.into_iter().map(|(_, a)| a).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_matches_table_value() {
        assert_eq!(floor_percent(0.6888), 0.68);
        assert_eq!(floor_percent(0.29), 0.29);
        assert_eq!(floor_percent(0.7), 0.7);
        assert_eq!(floor_percent(1.0), 1.0);
        assert_eq!(floor_percent(0.0), 0.0);
    }

    #[test]
    fn available_epochs_examples() {
        let base = vec![0.5, 0.6888, 0.66];
        let m = min_available_epochs(&[vec![0.50, 0.67, 0.683, 0.69]], &base).unwrap();
        assert_eq!(m.lambda_floor, 0.68);
        assert_eq!(m.lambda_max_epoch, 2);
        assert_eq!(m.t_ava, vec![Some(3)]);

        let never = min_available_epochs(&[vec![0.5; 5]], &base).unwrap();
        assert_eq!(never.t_ava, vec![None]);

        assert!(matches!(min_available_epochs(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(
            min_available_epochs(&[vec![]], &base),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ties_resolve_to_earliest_epoch() {
        let m = min_available_epochs(&[], &[0.3, 0.7, 0.7]).unwrap();
        assert_eq!(m.lambda_max_epoch, 2);
    }

    #[test]
    fn accounting_examples() {
        let a = account(145_578, 576);
        assert_eq!(a.ratio_percent(), "0.3957%");
        let none = account(145_578, 0);
        assert_eq!((none.additional, none.ratio), (0, 0.0));
    }

    #[test]
    fn config_text_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# desk run\ndataset = synth\nsynth_classes=3\nmodel=mlp\nhidden=16\npreset=333,525\nepochs=4\nfreeze-fraction=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.presets, vec![Preset::P333, Preset::P525]);
        assert_eq!(cfg.model, ModelKind::Mlp { hidden: 16 });
        assert!(matches!(cfg.dataset, DatasetSpec::Synth { classes: 3, .. }));
        assert_eq!(cfg.last_learnable_epoch(), 2);
        cfg.apply("epochs", "10").unwrap();
        cfg.apply("freeze_fraction", "0.6").unwrap();
        assert_eq!(cfg.last_learnable_epoch(), 6);
        cfg.validate().unwrap();

        assert!(cfg.apply("nonsense", "1").is_err());
        assert!(cfg.apply_text("novalue").is_err());
        cfg.apply("freeze_fraction", "0").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.apply("freeze_fraction", "1").unwrap();
        cfg.apply("batch_size", "0").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn series_csv_parses_back() {
        let text = format!("{CSV_HEADER}\n1,off,0.5,0.5,0.25,0.1,0.02,false\n2,off,0.4,0.6,0.5,0.1,0.02,false\n1,333,0.5,0.5,0.3,0.1,0.02,false\n");
        let s = parse_series_csv(&text).unwrap();
        assert_eq!(s[0], ("off".to_string(), vec![0.25, 0.5]));
        assert_eq!(s[1], ("333".to_string(), vec![0.3]));
        assert!(parse_series_csv("epoch,variant\n1,off\n").is_err());
    }
}

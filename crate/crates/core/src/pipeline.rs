//! The commands behind the CLI: corpus synthesis, both training stages,
//! evaluation and inference. Every command is a pure function of its config,
//! seed and input files, and writes its resolved config next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::dataset::{write_dataset, DatasetReader};
use crate::data::image_io::{load_image, save_image};
use crate::data::synth::{synth_generate, SynthConfig};
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masks::rasterize;
use crate::metrics::{region_restricted_eval, EvalReport, REPORT_CSV_HEADER};
use crate::model::{ModelConfig, PromptedModel, TaskId, DOWNSAMPLE};
use crate::tensor::{no_grad, Tensor};
use crate::trainer::{
    load_checkpoint, save_checkpoint, AdamWConfig, BmLoss, Stage, TrainConfig, Trainer, LOSS_CSV_HEADER,
};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const CHECKPOINT_NAME: &str = "checkpoint.tmim";
pub const LOSS_CSV: &str = "losses.csv";

/// Flat run configuration shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub box_width_min: usize,
    pub box_width_max: usize,
    pub box_height_min: usize,
    pub box_height_max: usize,
    pub max_shapes: usize,
    pub stroke_width_min: usize,
    pub stroke_width_max: usize,

    /// Corpus root holding `train/` and `test/`, as written by `synth`.
    pub data_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,

    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub bm_loss: BmLoss,
    pub mask_dilation: usize,
    pub augment: bool,
    pub flip_prob: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub color_min: f64,
    pub color_max: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,

    pub widths: [usize; 3],
    pub prompt_init: f64,

    /// Dilation of the text mask for region-restricted evaluation.
    pub region_pad: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let jitter = AugmentConfig::default();
        let opt = AdamWConfig::default();
        let w = LossWeights::default();
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            train_size: 512,
            test_size: 64,
            image_size: 64,
            min_boxes: synth.min_boxes,
            max_boxes: synth.max_boxes,
            box_width_min: synth.box_width.0,
            box_width_max: synth.box_width.1,
            box_height_min: synth.box_height.0,
            box_height_max: synth.box_height.1,
            max_shapes: synth.max_shapes,
            stroke_width_min: synth.stroke_width.0,
            stroke_width_max: synth.stroke_width.1,
            data_dir: PathBuf::from("corpus"),
            train_manifest: None,
            test_manifest: None,
            pretrain_epochs: 5,
            finetune_epochs: 20,
            batch_size: train.batch_size,
            bm_loss: train.bm_loss,
            mask_dilation: train.mask_dilation,
            augment: train.augment,
            flip_prob: jitter.flip_prob,
            brightness_min: jitter.brightness.0,
            brightness_max: jitter.brightness.1,
            color_min: jitter.color.0,
            color_max: jitter.color.1,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            alpha: w.alpha,
            beta: w.beta,
            widths: model.widths,
            prompt_init: model.prompt_init,
            region_pad: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            },
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.image_size,
            width: self.image_size,
            min_boxes: self.min_boxes,
            max_boxes: self.max_boxes,
            box_width: (self.box_width_min, self.box_width_max),
            box_height: (self.box_height_min, self.box_height_max),
            max_shapes: self.max_shapes,
            stroke_width: (self.stroke_width_min, self.stroke_width_max),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            prompt_init: self.prompt_init,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            batch_size: self.batch_size,
            epochs: match stage {
                Stage::Pretrain => self.pretrain_epochs,
                Stage::Finetune => self.finetune_epochs,
            },
            seed: self.seed,
            image_size: self.image_size,
            bm_loss: self.bm_loss,
            mask_dilation: self.mask_dilation,
            augment: self.augment,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                alpha: self.alpha,
                beta: self.beta,
            },
            jitter: AugmentConfig {
                flip_prob: self.flip_prob,
                brightness: (self.brightness_min, self.brightness_max),
                color: (self.color_min, self.color_max),
            },
            model: self.model_config(),
        }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.train_manifest
            .clone()
            .unwrap_or_else(|| self.data_dir.join("train").join(crate::data::dataset::MANIFEST_NAME))
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.test_manifest
            .clone()
            .unwrap_or_else(|| self.data_dir.join("test").join(crate::data::dataset::MANIFEST_NAME))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be >= 1".into()));
        }
        self.train_config(Stage::Pretrain).validate()
    }
}

pub fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    Ok(())
}

/// Manifests of a synthesized corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes `train/` and `test/` splits under `out`. Train samples are drawn
/// first from one seeded stream, then test samples.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let scfg = cfg.synth_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize| -> Result<Vec<AnnotatedImage>> { (0..n).map(|_| synth_generate(&scfg, &mut rng)).collect() };
    let train = draw(cfg.train_size)?;
    let test = draw(cfg.test_size)?;
    let corpus = Corpus {
        train: write_dataset(&out.join("train"), &train)?,
        test: write_dataset(&out.join("test"), &test)?,
    };
    write_snapshot(out, cfg)?;
    Ok(corpus)
}

/// How a training command starts.
#[derive(Clone, Debug, Default)]
pub enum Start {
    /// `init(seed)` for pretraining or the scratch baseline.
    #[default]
    Fresh,
    /// Weights from an earlier checkpoint, with a fresh optimizer.
    Init(PathBuf),
    /// Continue an interrupted run from its checkpoint.
    Resume(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps: u64,
    /// Every dataset file read while loading the training set.
    pub files_read: Vec<PathBuf>,
}

fn csv_lines(rows: &[String], header: &str) -> String {
    let mut s = String::with_capacity(rows.len() * 48);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Runs one training stage and writes `checkpoint.tmim`, `losses.csv` and
/// the config snapshot under `out`. `max_steps` stops early, leaving a
/// checkpoint that `Start::Resume` continues bit-exactly.
pub fn train(cfg: &RunConfig, stage: Stage, start: &Start, out: &Path, max_steps: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let reader = DatasetReader::new();
    let manifest = cfg.train_manifest();
    let data = match stage {
        Stage::Pretrain => reader.load_detection(&manifest, cfg.image_size)?,
        Stage::Finetune => reader.load_supervised(&manifest, cfg.image_size)?,
    };
    let loss_path = out.join(LOSS_CSV);
    let (mut trainer, mut rows) = match start {
        Start::Fresh => {
            let tc = cfg.train_config(stage);
            let model = PromptedModel::with_config(&tc.model, tc.seed);
            (Trainer::new(tc, model)?, Vec::new())
        }
        Start::Init(path) => {
            let ck = load_checkpoint(path)?;
            let tc = cfg.train_config(stage);
            if ck.config.model != tc.model {
                return Err(Error::Format(format!(
                    "checkpoint model {:?} does not match configured model {:?}",
                    ck.config.model, tc.model
                )));
            }
            let model = PromptedModel::with_config(&tc.model, tc.seed);
            ck.load_into(&model)?;
            (Trainer::new(tc, model)?, Vec::new())
        }
        Start::Resume(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.stage != stage {
                return Err(Error::Config(format!("cannot resume a {:?} checkpoint as {stage:?}", ck.config.stage)));
            }
            let rows = resumed_rows(&path.with_file_name(LOSS_CSV), ck.rng.step)?;
            (Trainer::resume(&ck)?, rows)
        }
    };
    fs::create_dir_all(out)?;
    trainer.run(&data, max_steps, &mut |r| rows.push(r.csv_row()))?;
    let checkpoint = out.join(CHECKPOINT_NAME);
    save_checkpoint(&checkpoint, &trainer.checkpoint())?;
    fs::write(&loss_path, csv_lines(&rows, LOSS_CSV_HEADER))?;
    write_snapshot(out, cfg)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_csv: loss_path,
        steps: trainer.steps_done(),
        files_read: reader.opened(),
    })
}

/// Rows already logged before a checkpoint taken at `steps`.
fn resumed_rows(csv: &Path, steps: u64) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(csv) else {
        return Ok(Vec::new());
    };
    let rows: Vec<String> = text.lines().skip(1).map(str::to_string).collect();
    if rows.len() as u64 != steps {
        return Err(Error::Format(format!(
            "{} has {} rows but the checkpoint is at step {steps}",
            csv.display(),
            rows.len()
        )));
    }
    Ok(rows)
}

/// Reflect-pads `[3,h,w]` up to multiples of the model's downsampling factor.
fn pad_to_multiple(image: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h.div_ceil(DOWNSAMPLE) * DOWNSAMPLE, w.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
    if (ph, pw) == (h, w) {
        return Ok((image.clone(), h, w));
    }
    let src = image.data();
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = reflect(y, h);
            out.extend((0..pw).map(|x| src[(c * h + sy) * w + reflect(x, w)]));
        }
    }
    Ok((Tensor::new(out, &[3, ph, pw])?, h, w))
}

fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (ph, pw) = (t.shape()[1], t.shape()[2]);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            out.extend_from_slice(&src[(c * ph + y) * pw..][..w]);
        }
    }
    Tensor::new(out, &[3, h, w])
}

/// `F(image, task)` for one `[3,h,w]` image of any size.
pub fn predict(model: &PromptedModel, image: &Tensor, task: TaskId) -> Result<Tensor> {
    let _guard = no_grad();
    let (padded, h, w) = pad_to_multiple(image)?;
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let out = model.forward(&padded.reshape(&[1, 3, ph, pw])?, task)?;
    crop(&out.reshape(&[3, ph, pw])?, h, w)
}

pub fn load_model(checkpoint: &Path) -> Result<PromptedModel> {
    load_checkpoint(checkpoint)?.model()
}

/// Writes `F_TE(image)` to `out` as an 8-bit PNG or PPM.
pub fn infer(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let input = load_image(image)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_image(out, &predict(&model, &input, TaskId::Te)?)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub model: EvalReport,
    /// The input image scored as if it were the output.
    pub identity: EvalReport,
    pub report_csv: PathBuf,
}

/// Scores every image or only the text regions of every image.
pub fn evaluate_samples(
    model: &PromptedModel,
    samples: &[AnnotatedImage],
    task: TaskId,
    region: Option<usize>,
) -> Result<(EvalReport, EvalReport)> {
    let mut scored = Vec::with_capacity(samples.len());
    let mut identity = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let clean = s.clean.as_ref().ok_or(Error::MissingClean(i))?;
        let out = predict(model, &s.image, task)?;
        match region {
            None => {
                scored.push(EvalReport::of_pair(&out, clean)?);
                identity.push(EvalReport::of_pair(&s.image, clean)?);
            }
            Some(pad) => {
                let mask = rasterize(&s.polygons, s.height(), s.width())?;
                scored.push(region_restricted_eval(&out, clean, &mask, pad)?);
                identity.push(region_restricted_eval(&s.image, clean, &mask, pad)?);
            }
        }
    }
    let mean = |r: &[EvalReport]| EvalReport::mean(r).ok_or_else(|| Error::Config("evaluation set is empty".into()));
    Ok((mean(&scored)?, mean(&identity)?))
}

/// Evaluates a checkpoint on `manifest` (the configured test set when `None`)
/// and writes `eval_<task>[_region].csv` under `out`.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    task: TaskId,
    region_only: bool,
    out: &Path,
) -> Result<EvalOutcome> {
    let model = load_model(checkpoint)?;
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.test_manifest());
    let samples = DatasetReader::new().load_supervised(&manifest, cfg.image_size)?;
    let region = region_only.then_some(cfg.region_pad);
    let (scored, identity) = evaluate_samples(&model, &samples, task, region)?;
    let tag = match task {
        TaskId::Te => "te",
        TaskId::Bm => "bm",
    };
    let name = if region_only { format!("eval_{tag}_region.csv") } else { format!("eval_{tag}.csv") };
    fs::create_dir_all(out)?;
    let report_csv = out.join(name);
    let rows = [format!("model,{}", scored.csv_row()), format!("identity,{}", identity.csv_row())];
    fs::write(&report_csv, csv_lines(&rows, &format!("method,{REPORT_CSV_HEADER}")))?;
    write_snapshot(out, cfg)?;
    Ok(EvalOutcome {
        model: scored,
        identity,
        report_csv,
    })
}

//! Run configuration and the operator commands built on it: dataset
//! generation, training, evaluation, the ablation matrix and gradient checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apk::TEETH;
use crate::autodiff::Tape;
use crate::data::{read_dataset_split, write_dataset, LabelMap, LabeledScene, SceneConfig, SplitSizes, SPLITS};
use crate::error::{Error, Result};
use crate::gating::MixerKind;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::io::peek_dtype;
use crate::metrics::{Aggregation, IoUReport};
use crate::model::{loss, ModelConfig, TeethSeg};
use crate::msa::UpscaleMode;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{
    evaluate, fit, load_model, read_toml, write_toml, FitSummary, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    MODEL_TOML,
};

/// Environment variable overriding `train.precision`.
pub const PRECISION_ENV: &str = "TEETHSEG_PRECISION";
/// Every command writes its effective configuration here.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const ABLATION_SUMMARY: &str = "ablation_summary.csv";
pub const ABLATION_TABLE: &str = "ablation_table.csv";
pub const TEST_REPORT: &str = "test_report.csv";

/// One of the six architecture variants compared by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Bilinear interpolation in place of every linear and naive upscaler.
    A,
    /// Attention in place of gating.
    B,
    /// Plain linear upscalers instead of MSA blocks.
    C,
    /// No APK layer.
    D,
    /// Neither MSA blocks nor APK; bilinear stages.
    E,
    /// Full model.
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn letter(self) -> char {
        match self {
            Variant::A => 'a',
            Variant::B => 'b',
            Variant::C => 'c',
            Variant::D => 'd',
            Variant::E => 'e',
            Variant::F => 'f',
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "bilinear-up",
            Variant::B => "cross-attention",
            Variant::C => "no-msa",
            Variant::D => "no-apk",
            Variant::E => "no-msa-no-apk",
            Variant::F => "full",
        }
    }

    /// `base` with this variant's toggles applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::A => c.upscale = UpscaleMode::Bilinear,
            Variant::B => c.mixer = MixerKind::Attention,
            Variant::C => {
                c.use_msa = false;
                c.bare_stage = UpscaleMode::Permute;
            }
            Variant::D => c.use_apk = false,
            Variant::E => {
                c.use_msa = false;
                c.bare_stage = UpscaleMode::Bilinear;
                c.use_apk = false;
            }
            Variant::F => {}
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| s.eq_ignore_ascii_case(&v.letter().to_string()) || s == v.description())
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// Everything a command needs. Missing keys take defaults; unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub splits: SplitSizes,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the precision override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(p) = std::env::var(PRECISION_ENV) {
            parse_precision(&p)?;
            self.train.precision = p;
        }
        Ok(())
    }

    /// Sets the model, scene and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.scene.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        parse_precision(&self.train.precision)?;
        if (self.scene.height, self.scene.width, self.scene.channels)
            != (self.model.image_h, self.model.image_w, self.model.channels)
        {
            return Err(Error::Config(format!(
                "scene is {}x{}x{} but the model expects {}x{}x{}",
                self.scene.height,
                self.scene.width,
                self.scene.channels,
                self.model.image_h,
                self.model.image_w,
                self.model.channels
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_toml(&dir.join(RESOLVED_CONFIG), self)
    }

    pub fn precision(&self) -> Result<DType> {
        parse_precision(&self.train.precision)
    }
}

pub fn parse_precision(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
    }
}

fn ensure_empty(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some());
    if occupied && !force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    if occupied {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Scenes containing each tooth, one row per split, plus the share of
/// tooth instances missing.
pub fn presence_table(splits: &[(&str, &[LabeledScene])]) -> String {
    let mut s = String::from("Split,Scenes");
    for k in 1..=TEETH {
        let _ = write!(s, ",T{k}");
    }
    s.push_str(",Absent%\n");
    for (name, scenes) in splits {
        let mut counts = [0usize; TEETH];
        for scene in scenes.iter() {
            for (c, &p) in counts.iter_mut().zip(&scene.present) {
                *c += p as usize;
            }
        }
        let _ = write!(s, "{name},{}", scenes.len());
        for c in counts {
            let _ = write!(s, ",{c}");
        }
        let slots = (scenes.len() * TEETH).max(1);
        let absent = slots - counts.iter().sum::<usize>().min(slots);
        let _ = writeln!(s, ",{:.2}", 100.0 * absent as f64 / slots as f64);
    }
    s
}

/// Writes the three splits under `out` and returns the presence table.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    cfg.scene.validate()?;
    ensure_empty(out, force)?;
    write_dataset(out, &cfg.scene, cfg.splits)?;
    cfg.write_resolved(out)?;
    let loaded: Vec<(&str, Vec<LabeledScene>)> = SPLITS
        .iter()
        .map(|&s| Ok((s, read_dataset_split(out, s)?)))
        .collect::<Result<_>>()?;
    let view: Vec<(&str, &[LabeledScene])> = loaded.iter().map(|(n, s)| (*n, s.as_slice())).collect();
    let table = presence_table(&view);
    let path = out.join("presence.csv");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

fn load_splits(data: &Path, model: &ModelConfig) -> Result<(Vec<LabeledScene>, Vec<LabeledScene>)> {
    let train = read_dataset_split(data, "train")?;
    let val = read_dataset_split(data, "val")?;
    if let Some(s) = train.first() {
        let want = [model.image_h, model.image_w, model.channels];
        if s.image.shape() != want {
            return Err(Error::Config(format!(
                "dataset images are {:?} but the model expects {want:?}",
                s.image.shape()
            )));
        }
    }
    Ok((train, val))
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub fit: FitSummary,
    /// Test-split report of the best-validation checkpoint, when the dataset has a test split.
    pub test: Option<IoUReport>,
}

fn train_with<S: Scalar>(
    cfg: &RunConfig,
    train: &[LabeledScene],
    val: &[LabeledScene],
    test: &[LabeledScene],
    out: &Path,
    method: &str,
    resume: bool,
) -> Result<TrainOutcome> {
    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.join(MODEL_TOML).exists() {
        let t = Trainer::<S>::load(&last, Some(cfg.train.clone()))?;
        if t.model.cfg != cfg.model {
            return Err(Error::Config("checkpoint model settings differ from the configuration".into()));
        }
        t
    } else {
        Trainer::<S>::new(cfg.model.clone(), cfg.train.clone())?
    };
    let summary = fit(&mut trainer, train, val, out, method)?;
    let test_report = if test.is_empty() {
        None
    } else {
        let best = out.join(BEST_CHECKPOINT);
        let model = if best.join(MODEL_TOML).exists() {
            load_model::<S>(&best)?
        } else {
            trainer.model.clone()
        };
        let report = evaluate(&model, test, cfg.train.aggregation)?;
        let csv = format!("{}\n{}\n", IoUReport::CSV_HEADER, report.csv_row(method, "best"));
        let path = out.join(TEST_REPORT);
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        Some(report)
    };
    Ok(TrainOutcome {
        fit: summary,
        test: test_report,
    })
}

/// Trains on in-memory splits at the configured precision.
pub fn train_scenes(
    cfg: &RunConfig,
    train: &[LabeledScene],
    val: &[LabeledScene],
    test: &[LabeledScene],
    out: &Path,
    method: &str,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.write_resolved(out)?;
    match cfg.precision()? {
        DType::F32 => train_with::<f32>(cfg, train, val, test, out, method, resume),
        DType::F64 => train_with::<f64>(cfg, train, val, test, out, method, resume),
    }
}

/// Trains on the dataset under `data`, writing logs and checkpoints to `out`.
/// With `resume`, continues from `out/checkpoint_last` when present.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, val) = load_splits(data, &cfg.model)?;
    let test = read_dataset_split(data, "test")?;
    train_scenes(cfg, &train, &val, &test, out, "full", resume)
}

/// Evaluation result with the per-class IoU CSV text.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: IoUReport,
    pub csv: String,
}

fn eval_with<S: Scalar>(checkpoint: &Path, scenes: &[LabeledScene], mode: Aggregation, method: &str) -> Result<EvalOutcome> {
    let model = load_model::<S>(checkpoint)?;
    let report = evaluate(&model, scenes, mode)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"));
    let csv = format!(
        "{}\n{}\nfb_iou,foreground,{},background,{}\n",
        IoUReport::CSV_HEADER,
        report.csv_row(method, "eval"),
        fmt(report.fb_iou[0]),
        fmt(report.fb_iou[1])
    );
    Ok(EvalOutcome { report, csv })
}

/// Evaluates the checkpoint in `checkpoint` on in-memory scenes. When
/// `expected` is given it must equal the checkpoint's model settings.
pub fn eval_scenes(
    checkpoint: &Path,
    scenes: &[LabeledScene],
    expected: Option<&ModelConfig>,
    mode: Aggregation,
    method: &str,
) -> Result<EvalOutcome> {
    let stored: ModelConfig = read_toml(&checkpoint.join(MODEL_TOML))
        .map_err(|e| Error::Config(format!("{} is not a checkpoint: {e}", checkpoint.display())))?;
    if let Some(want) = expected {
        if *want != stored {
            return Err(Error::Config(
                "checkpoint model settings differ from the supplied configuration".into(),
            ));
        }
    }
    let first = checkpoint.join("cls_fb.tsr");
    match peek_dtype(&first)? {
        DType::F32 => eval_with::<f32>(checkpoint, scenes, mode, method),
        DType::F64 => eval_with::<f64>(checkpoint, scenes, mode, method),
    }
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    expected: Option<&ModelConfig>,
    mode: Aggregation,
) -> Result<EvalOutcome> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}")));
    }
    let scenes = read_dataset_split(data, split)?;
    eval_scenes(checkpoint, &scenes, expected, mode, "full")
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: u64,
    pub val_miou: Option<f64>,
    pub test: Option<IoUReport>,
    pub wall_ms: u128,
}

impl AblationRow {
    pub fn test_miou(&self) -> Option<f64> {
        self.test.as_ref().and_then(|r| r.miou)
    }
}

pub const ABLATION_HEADER: &str = "variant,description,steps,val_mIoU,test_mIoU,wall_ms";

/// Trains every configured variant with the same seed and budget and writes
/// the summary tables under `out`.
pub fn ablate_scenes(
    cfg: &RunConfig,
    train: &[LabeledScene],
    val: &[LabeledScene],
    test: &[LabeledScene],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.write_resolved(out)?;
    let mut rows = Vec::new();
    let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"));
    let mut summary = format!("{ABLATION_HEADER}\n");
    let mut table = format!("{}\n", IoUReport::CSV_HEADER);
    for &variant in &cfg.ablation.variants {
        let mut vcfg = cfg.clone();
        vcfg.model = variant.apply(&cfg.model);
        let name = format!("({}) {}", variant.letter(), variant.description());
        let dir = out.join(format!("variant_{}", variant.letter()));
        let outcome = train_scenes(&vcfg, train, val, test, &dir, variant.description(), false)?;
        let row = AblationRow {
            variant,
            steps: outcome.fit.steps,
            val_miou: outcome.fit.best_val_miou,
            test: outcome.test,
            wall_ms: outcome.fit.wall_ms,
        };
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            variant.letter(),
            variant.description(),
            row.steps,
            fmt(row.val_miou),
            fmt(row.test_miou()),
            row.wall_ms
        );
        if let Some(r) = &row.test {
            let _ = writeln!(table, "{}", r.csv_row(&name, "best"));
        }
        rows.push(row);
        for (file, text) in [(ABLATION_SUMMARY, &summary), (ABLATION_TABLE, &table)] {
            let path = out.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (train, val) = load_splits(data, &cfg.model)?;
    let test = read_dataset_split(data, "test")?;
    ablate_scenes(cfg, &train, &val, &test, out)
}

/// Random image and label map for gradient checks.
pub fn probe_sample(cfg: &ModelConfig, seed: u64) -> Result<(Tensor<f64>, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_h * cfg.image_w;
    let image: Vec<f64> = (0..n * cfg.channels).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=TEETH as u8)).collect();
    Ok((
        Tensor::new([cfg.image_h, cfg.image_w, cfg.channels], image)?,
        LabelMap::new(cfg.image_h, cfg.image_w, labels)?,
    ))
}

/// Central-difference check of every parameter tensor of the model built
/// from `cfg`, on the total loss of one random sample.
pub fn gradcheck_model(cfg: &ModelConfig, th_over_all_pixels: bool, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = TeethSeg::<f64>::new(cfg.clone())?;
    let (image, labels) = probe_sample(cfg, cfg.seed ^ 0x9e37_79b9)?;
    let analytic = {
        let mut tape = Tape::new();
        if let Some(op) = opts.fault {
            tape.inject_sign_flip(op);
        }
        let p = model.store.bind(&tape);
        let l = loss(&model.forward(&p, &tape, &image)?, &labels, th_over_all_pixels)?;
        let grads = tape.backward(l.total)?;
        p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect::<Vec<_>>()
    };
    let params = model.store.tensors().to_vec();
    let mut probe = model.clone();
    finite_diff_check(
        model.store.names(),
        &params,
        &analytic,
        |ps| {
            for (dst, src) in probe.store.tensors_mut().iter_mut().zip(ps) {
                dst.data_mut().copy_from_slice(src.data());
            }
            let tape = Tape::inference();
            let p = probe.store.bind(&tape);
            let l = loss(&probe.forward(&p, &tape, &image)?, &labels, th_over_all_pixels)?;
            Ok(l.total.value().item()?)
        },
        opts,
    )
}

/// Gradient checks for every variant on `base`, parameter names prefixed
/// with the variant letter.
pub fn cmd_gradcheck(base: &ModelConfig, variants: &[Variant], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut all = GradCheckReport {
        tol: opts.tol,
        params: Vec::new(),
    };
    for &v in variants {
        let mut r = gradcheck_model(&v.apply(base), false, opts)?;
        for p in &mut r.params {
            p.name = format!("({}) {}", v.letter(), p.name);
        }
        all.merge(r);
    }
    Ok(all)
}

pub fn gradcheck_text(report: &GradCheckReport) -> String {
    let mut s = String::from("group,numel,max_rel_err,status\n");
    for p in &report.params {
        let _ = writeln!(
            s,
            "{},{},{:.3e},{}",
            p.name,
            p.numel,
            p.max_rel_err,
            if p.passed { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(
        s,
        "overall,{},{:.3e},{}",
        report.params.iter().map(|p| p.numel).sum::<usize>(),
        report.max_rel_err(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    s
}

/// Default output directory name for a command when none is given.
pub fn default_out(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 32\n").is_ok());
        assert!(matches!(RunConfig::from_toml("[model]\nwdth = 32\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 1e-3;
        cfg.ablation.variants = vec![Variant::A, Variant::F];
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn variants_toggle_the_documented_switches() {
        let base = ModelConfig::default();
        assert_eq!(Variant::F.apply(&base), base);
        assert_eq!(Variant::A.apply(&base).upscale, UpscaleMode::Bilinear);
        let e = Variant::E.apply(&base);
        assert!(!e.use_msa && !e.use_apk && e.bare_stage == UpscaleMode::Bilinear);
        for v in Variant::ALL {
            v.apply(&base).validate().unwrap();
            v.apply(&ModelConfig::tiny()).validate().unwrap();
            assert_eq!(v.letter().to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn scene_and_model_must_agree() {
        let mut cfg = RunConfig::default();
        cfg.scene.width = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

//! Run configuration: `[section]` / `key = value` text, optionally layered
//! over a bundled preset, validated in full before any work starts.
//!
//! ```text
//! [model.teacher]
//! channels = [12, 24, 48]
//! blocks = 1
//!
//! [model.student]
//! channels = [4, 8, 16]
//!
//! [data]
//! source = synthetic        # synthetic | cifar10 | cifar100
//! batch_size = 32
//!
//! [optim]
//! lr = 0.05
//!
//! [schedule]
//! milestones = [10]
//!
//! [distill]
//! T = 4
//! alpha = 1
//!
//! [run]
//! epochs = 15
//! seed = 1
//! out_dir = runs/demo
//! ```
//!
//! The root `seed` expands into independent model, shuffle, augmentation and
//! adapter seeds as `splitmix64(seed + (stream + 1) · 0x9E3779B97F4A7C15)`
//! with streams 1, 2, 3 and 4 respectively.

use std::path::{Path, PathBuf};

use cdkd::data::{make_synthetic_split, load_cifar_binary, CifarVariant, Dataset, Split, SyntheticSpec};
use cdkd::kv::{KvDoc, Section};
use cdkd::losses::DistillConfig;
use cdkd::model::NetworkSpec;
use cdkd::optim::{LrSchedule, SgdConfig};
use cdkd::train::{AugmentSpec, Normalization, TrainConfig};
use cdkd::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    ImagenetRecipe,
    CifarRecipe,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ImagenetRecipe => "imagenet-recipe",
            Preset::CifarRecipe => "cifar-recipe",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "imagenet-recipe" => Ok(Preset::ImagenetRecipe),
            "cifar-recipe" => Ok(Preset::CifarRecipe),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected imagenet-recipe or cifar-recipe)"
            ))),
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Preset::ImagenetRecipe => {
                "[data]\nbatch_size = 256\n\n[optim]\nlr = 0.1\nmomentum = 0.9\nweight_decay = 0.0001\n\n\
                 [schedule]\nmilestones = [30, 60, 90]\nfactor = 0.1\n\n[run]\nepochs = 100\n"
            }
            Preset::CifarRecipe => {
                "[data]\nbatch_size = 128\n\n[optim]\nlr = 0.1\nmomentum = 0.9\nweight_decay = 0.0005\n\n\
                 [schedule]\nmilestones = [60, 120, 160]\nfactor = 0.2\n\n[run]\nepochs = 200\n"
            }
        }
    }

    pub fn doc(self) -> KvDoc {
        KvDoc::parse(self.text()).expect("bundled presets parse")
    }
}

const MODEL_KEYS: &[&str] = &["channels", "blocks", "downsample", "residual", "num_classes", "input_channels"];
const DATA_KEYS: &[&str] = &[
    "source",
    "classes",
    "per_class",
    "val_per_class",
    "image_size",
    "data_seed",
    "train_path",
    "val_path",
    "batch_size",
    "drop_last",
    "pad",
    "random_crop",
    "hflip_prob",
    "means",
    "stds",
];
const OPTIM_KEYS: &[&str] = &["lr", "momentum", "weight_decay"];
const SCHEDULE_KEYS: &[&str] = &["milestones", "factor"];
const DISTILL_KEYS: &[&str] = &[
    "T",
    "alpha",
    "lambda",
    "n_decay",
    "gkd_enabled",
    "plain_kd_fallback",
    "kd_t_squared",
    "edt_stepwise",
];
const RUN_KEYS: &[&str] = &["epochs", "seed", "out_dir", "wall_clock"];

const SECTIONS: &[(&str, &[&str])] = &[
    ("model.teacher", MODEL_KEYS),
    ("model.student", MODEL_KEYS),
    ("data", DATA_KEYS),
    ("optim", OPTIM_KEYS),
    ("schedule", SCHEDULE_KEYS),
    ("distill", DISTILL_KEYS),
    ("run", RUN_KEYS),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, val_per_class: usize },
    Cifar { variant: CifarVariant, train_path: PathBuf, val_path: PathBuf },
}

impl DataSource {
    pub fn classes(&self) -> usize {
        match self {
            DataSource::Synthetic { spec, .. } => spec.classes,
            DataSource::Cifar { variant, .. } => variant.classes(),
        }
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { spec, val_per_class } => make_synthetic_split(spec, *val_per_class),
            DataSource::Cifar {
                variant,
                train_path,
                val_path,
            } => Ok((
                load_cifar_binary(train_path, *variant)?,
                load_cifar_binary(val_path, *variant)?.with_split(Split::Val),
            )),
        }
    }
}

/// Which networks the command needs from the config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Teacher,
    Student,
    Nothing,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Merged, overridden document; written to the run directory verbatim.
    pub doc: KvDoc,
    pub teacher: Option<NetworkSpec>,
    pub student: Option<NetworkSpec>,
    pub data: DataSource,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub out_dir: PathBuf,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides, need: Need) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, ov, need)
    }

    pub fn from_text(text: &str, ov: &Overrides, need: Need) -> Result<Self> {
        let user = KvDoc::parse(text)?;
        for s in &user.sections {
            let allowed = SECTIONS
                .iter()
                .find(|(n, _)| *n == s.name)
                .ok_or_else(|| Error::Config(format!("line {}: unknown section [{}]", s.line, s.name)))?
                .1;
            s.check_keys(allowed)?;
        }
        let mut doc = ov.preset.map(Preset::doc).unwrap_or_default();
        doc.merge(&user);
        if let Some(seed) = ov.seed {
            doc.section_mut("run").set("seed", seed);
        }
        if let Some(dir) = &ov.out_dir {
            doc.section_mut("run").set("out_dir", dir.display());
        }
        Self::from_doc(doc, need)
    }

    pub fn from_doc(doc: KvDoc, need: Need) -> Result<Self> {
        let data_s = section_or_empty(&doc, "data");
        let data = parse_data(&data_s)?;
        let (classes, channels) = (data.classes(), data.channels());
        let spec_of = |name: &str, required: bool| -> Result<Option<NetworkSpec>> {
            match doc.section(name) {
                Some(s) => Ok(Some(parse_spec(s, classes, channels)?)),
                None if required => Err(Error::Config(format!("missing required section [{name}]"))),
                None => Ok(None),
            }
        };
        let teacher = spec_of("model.teacher", need == Need::Teacher)?;
        let student = spec_of("model.student", need == Need::Student)?;

        let optim = doc.require("optim")?;
        let sgd = SgdConfig {
            lr0: req(optim.get_f64("lr")?, optim, "lr")?,
            momentum: optim.get_f64("momentum")?.unwrap_or(0.9),
            weight_decay: optim.get_f64("weight_decay")?.unwrap_or(1e-4),
        };
        let sched = doc.require("schedule")?;
        let schedule = LrSchedule {
            milestones: sched.get_list("milestones", "integers")?.unwrap_or_default(),
            factor: sched.get_f64("factor")?.unwrap_or(0.1),
        };
        let run = doc.require("run")?;
        let epochs = req(run.get_usize("epochs")?, run, "epochs")?;
        let seed = run.get_u64("seed")?.unwrap_or(0);
        let out_dir = PathBuf::from(run.get_str("out_dir").unwrap_or_else(|| "runs/default".into()));

        let augment = AugmentSpec {
            pad: data_s.get_usize("pad")?.unwrap_or(0),
            random_crop: data_s.get_bool("random_crop")?.unwrap_or(true),
            hflip_prob: data_s.get_f64("hflip_prob")?.unwrap_or(0.0),
        };
        if !(0.0..=1.0).contains(&augment.hflip_prob) {
            return Err(Error::Config(format!(
                "[data] hflip_prob must be in [0, 1], got {}",
                augment.hflip_prob
            )));
        }
        let normalization = match (
            data_s.get_list::<f32>("means", "numbers")?,
            data_s.get_list::<f32>("stds", "numbers")?,
        ) {
            (None, None) => None,
            (Some(means), Some(stds)) => {
                if means.len() != channels || stds.len() != channels || stds.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::Config(format!(
                        "[data] means/stds need {channels} entries each and stds must be positive"
                    )));
                }
                Some(Normalization { means, stds })
            }
            _ => return Err(Error::Config("[data] means and stds must be given together".into())),
        };
        let train = TrainConfig {
            epochs,
            batch_size: data_s.get_usize("batch_size")?.unwrap_or(128),
            drop_last: data_s.get_bool("drop_last")?.unwrap_or(false),
            sgd,
            schedule,
            augment,
            normalization,
            seed,
            wall_clock: run.get_bool("wall_clock")?.unwrap_or(false),
        };
        train.validate()?;

        let d = section_or_empty(&doc, "distill");
        let default_decay = train.schedule.milestones.first().copied().unwrap_or(30).max(1);
        let distill = DistillConfig {
            temperature: d.get_f64("T")?.unwrap_or(4.0) as f32,
            alpha: d.get_f64("alpha")?.unwrap_or(1.0),
            lambda: d.get_f64("lambda")?.unwrap_or(0.5),
            n_decay: d.get_usize("n_decay")?.unwrap_or(default_decay),
            gkd_enabled: d.get_bool("gkd_enabled")?.unwrap_or(true),
            plain_kd_fallback: d.get_bool("plain_kd_fallback")?.unwrap_or(false),
            kd_t_squared: d.get_bool("kd_t_squared")?.unwrap_or(false),
            edt_stepwise: d.get_bool("edt_stepwise")?.unwrap_or(false),
        };
        distill.validate()?;

        Ok(Self {
            doc,
            teacher,
            student,
            data,
            train,
            distill,
            out_dir,
        })
    }

    /// Canonical text of the parsed configuration.
    pub fn snapshot(&self) -> String {
        self.doc.render()
    }
}

fn section_or_empty(doc: &KvDoc, name: &str) -> Section {
    doc.section(name).cloned().unwrap_or(Section {
        name: name.to_string(),
        line: 0,
        entries: Vec::new(),
    })
}

fn req<T>(v: Option<T>, s: &Section, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("[{}] missing required key `{key}`", s.name)))
}

fn parse_spec(s: &Section, classes: usize, channels: usize) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec::from_kv(s)?;
    if spec.num_classes == 0 {
        spec.num_classes = classes;
    }
    if spec.input_channels == 0 {
        spec.input_channels = channels;
    }
    if spec.num_classes != classes {
        return Err(Error::Config(format!(
            "[{}] num_classes = {} but the data has {classes} classes",
            s.name, spec.num_classes
        )));
    }
    spec.validate()
        .map_err(|e| Error::Config(format!("[{}] {e}", s.name)))?;
    Ok(spec)
}

fn parse_data(s: &Section) -> Result<DataSource> {
    let source = s.get_str("source").unwrap_or_else(|| "synthetic".into());
    match source.as_str() {
        "synthetic" => {
            let spec = SyntheticSpec {
                classes: s.get_usize("classes")?.unwrap_or(8),
                per_class: s.get_usize("per_class")?.unwrap_or(200),
                image_size: s.get_usize("image_size")?.unwrap_or(16),
                seed: s.get_u64("data_seed")?.unwrap_or(7),
            };
            if spec.classes < 2 || spec.per_class == 0 || spec.image_size < 4 {
                return Err(Error::Config(
                    "[data] synthetic data needs classes >= 2, per_class >= 1 and image_size >= 4".into(),
                ));
            }
            let val_per_class = s.get_usize("val_per_class")?.unwrap_or(100);
            if val_per_class == 0 {
                return Err(Error::Config("[data] val_per_class must be positive".into()));
            }
            Ok(DataSource::Synthetic { spec, val_per_class })
        }
        "cifar10" | "cifar100" => {
            let variant = if source == "cifar10" {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100Fine
            };
            let path = |k: &str| {
                s.get_str(k)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::Config(format!("[data] source = {source} needs `{k}`")))
            };
            Ok(DataSource::Cifar {
                variant,
                train_path: path("train_path")?,
                val_path: path("val_path")?,
            })
        }
        other => Err(Error::Config(format!(
            "[data] unknown source `{other}` (expected synthetic, cifar10 or cifar100)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[model.student]\nchannels = [4, 8]\n[optim]\nlr = 0.1\n[schedule]\nmilestones = [5]\n[run]\nepochs = 2\n";

    #[test]
    fn presets_carry_the_recipes() {
        let ov = |p| Overrides {
            preset: Some(p),
            ..Default::default()
        };
        let c = RunConfig::from_text("[model.student]\nchannels = [4, 8]\n", &ov(Preset::CifarRecipe), Need::Student).unwrap();
        assert_eq!(c.train.schedule.milestones, vec![60, 120, 160]);
        assert_eq!(c.train.schedule.factor, 0.2);
        assert_eq!(c.train.sgd.weight_decay, 5e-4);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.epochs, 200);
        let i = RunConfig::from_text("", &ov(Preset::ImagenetRecipe), Need::Nothing).unwrap();
        assert_eq!(i.train.sgd.weight_decay, 1e-4);
        assert_eq!(i.train.sgd.momentum, 0.9);
        assert_eq!(i.train.schedule.milestones, vec![30, 60, 90]);
        assert_eq!(i.train.batch_size, 256);
        assert_eq!(i.distill.n_decay, 30);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MIN}\n[optim]\n");
        assert!(RunConfig::from_text(&text, &Overrides::default(), Need::Student).is_err());
        let text = MIN.replace("lr = 0.1", "learning_rat = 0.1");
        let err = RunConfig::from_text(&text, &Overrides::default(), Need::Student)
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rat") && err.contains("line 4"), "{err}");
    }

    #[test]
    fn diagnostics() {
        let ov = Overrides::default();
        let err = RunConfig::from_text(&MIN.replace("[run]\nepochs = 2\n", ""), &ov, Need::Student)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing required section [run]"), "{err}");
        let err = RunConfig::from_text(&MIN.replace("lr = 0.1", "lr = quick"), &ov, Need::Student)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 4") && err.contains("lr"), "{err}");
        let err = RunConfig::from_text(MIN, &ov, Need::Teacher).unwrap_err().to_string();
        assert!(err.contains("[model.teacher]"), "{err}");
        assert!(RunConfig::from_text(&format!("{MIN}[distill]\nlambda = 1.5\n"), &ov, Need::Student).is_err());
        assert!(RunConfig::from_text(&format!("{MIN}[bogus]\nx = 1\n"), &ov, Need::Student).is_err());
    }

    #[test]
    fn overrides_and_snapshot() {
        let ov = Overrides {
            seed: Some(7),
            out_dir: Some("elsewhere".into()),
            ..Default::default()
        };
        let c = RunConfig::from_text(MIN, &ov, Need::Student).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        let again = RunConfig::from_text(&c.snapshot(), &Overrides::default(), Need::Student).unwrap();
        assert_eq!(again.snapshot(), c.snapshot());
        assert_eq!(again.train, c.train);
        assert_eq!(again.distill.n_decay, 5);
    }
}

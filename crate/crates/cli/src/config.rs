//! Sectioned `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use arfsfr::encoder::{parse_placement, Backbone, BranchMode, EncoderConfig};
use arfsfr::episodes::SyntheticSpec;
use arfsfr::model::ModelConfig;
use arfsfr::trainer::{EvalConfig, Schedule, TrainConfig};

#[derive(Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSpec::default(),
            data_seed: 7,
            model: ModelConfig::new(EncoderConfig::default()),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["data", "encoder", "metric", "train", "eval"];

fn value<T: FromStr>(raw: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("invalid value `{raw}`: {e}"))
}

fn list<T: FromStr>(raw: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    raw.split(',').map(|v| value(v.trim())).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section: Option<&str> = None;
        let (mut placement, mut placement_line) = ("all".to_string(), None);
        let (mut encoder_size, mut schedule_kind) = (None, None);
        let (mut period, mut lr_min, mut snapshots) = (None, None, None);
        let mut pool_set = false;

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let err = |message: String| ConfigError { line: Some(n), message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    SECTIONS.iter().find(|s| **s == name).ok_or_else(|| err(format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, val) = (key.trim(), val.trim());
            let sec = section.ok_or_else(|| err(format!("`{key}` appears before any section header")))?;
            let d = &mut cfg.data;
            let e = &mut cfg.model.encoder;
            let t = &mut cfg.train;
            let v = &mut cfg.eval;
            let r: Result<(), String> = match (sec, key) {
                ("data", "seed") => value(val).map(|x| cfg.data_seed = x),
                ("data", "train_classes") => value(val).map(|x| d.train_classes = x),
                ("data", "val_classes") => value(val).map(|x| d.val_classes = x),
                ("data", "test_classes") => value(val).map(|x| d.test_classes = x),
                ("data", "samples_per_class") => value(val).map(|x| d.samples_per_class = x),
                ("data", "image_size") => value(val).map(|x| d.image_size = x),
                ("data", "channels") => value(val).map(|x| d.channels = x),
                ("data", "difficulty") => value(val).map(|x| d.difficulty = x),
                ("encoder", "backbone") => value::<Backbone>(val).map(|x| e.backbone = x),
                ("encoder", "widths") => list(val).map(|x| e.widths = x),
                ("encoder", "pool") => list::<u8>(val).map(|x| {
                    e.pool = x.into_iter().map(|p| p != 0).collect();
                    pool_set = true;
                }),
                ("encoder", "arf_placement") => {
                    placement = val.to_string();
                    placement_line = Some(n);
                    Ok(())
                }
                ("encoder", "branch_mode") => value::<BranchMode>(val).map(|x| e.branch_mode = x),
                ("encoder", "rho_max") => value(val).map(|x| e.rho_max = x),
                ("encoder", "sigma_step") => value(val).map(|x| e.sigma_step = x),
                ("encoder", "kappa") => value(val).map(|x| e.kappa = x),
                ("encoder", "image_size") => value::<usize>(val).map(|x| encoder_size = Some((x, n))),
                ("encoder", "eca_window") => value(val).map(|x| e.eca_window = x),
                ("encoder", "frozen_bank") => value(val).map(|x| e.frozen_bank = x),
                ("encoder", "leaky_slope") => value(val).map(|x| e.leaky_slope = x),
                ("encoder", "bn_momentum") => value(val).map(|x| e.bn_momentum = x),
                ("metric", "d_g") => value(val).map(|x| cfg.model.metric_dim = Some(x)),
                ("train", "lr") => value(val).map(|x| t.sgd.lr = x),
                ("train", "momentum") => value(val).map(|x| t.sgd.momentum = x),
                ("train", "weight_decay") => value(val).map(|x| t.sgd.weight_decay = x),
                ("train", "clip_norm") => value(val).map(|x| t.sgd.clip_norm = Some(x)),
                ("train", "nesterov") => value(val).map(|x| t.sgd.nesterov = x),
                ("train", "schedule") => match val {
                    "step" | "cosine" => {
                        schedule_kind = Some(val.to_string());
                        Ok(())
                    }
                    _ => Err(format!("schedule must be `step` or `cosine`, got `{val}`")),
                },
                ("train", "period") => value(val).map(|x| period = Some(x)),
                ("train", "lr_min") => value(val).map(|x| lr_min = Some(x)),
                ("train", "snapshots") => value(val).map(|x| snapshots = Some(x)),
                ("train", "epochs") => value(val).map(|x| t.epochs = x),
                ("train", "episodes_per_epoch") => value(val).map(|x| t.episodes_per_epoch = x),
                ("train", "way") => value(val).map(|x| t.way = x),
                ("train", "shot") => value(val).map(|x| t.shot = x),
                ("train", "query_per_class") => value(val).map(|x| t.query_per_class = x),
                ("train", "val_every") => value(val).map(|x| t.val_every = x),
                ("train", "val_episodes") => value(val).map(|x| t.val_episodes = x),
                ("train", "seed") => value(val).map(|x| t.seed = x),
                ("eval", "way") => value(val).map(|x| v.way = x),
                ("eval", "shot") => value(val).map(|x| v.shot = x),
                ("eval", "query_per_class") => value(val).map(|x| v.query_per_class = x),
                ("eval", "episodes") => value(val).map(|x| v.episodes = x),
                ("eval", "seed") => value(val).map(|x| v.seed = x),
                _ => Err(format!("unknown key `{key}` in [{sec}]")),
            };
            r.map_err(err)?;
        }

        let e = &mut cfg.model.encoder;
        e.image_size = cfg.data.image_size;
        e.in_channels = cfg.data.channels;
        if let Some((size, n)) = encoder_size {
            if size != cfg.data.image_size {
                return Err(ConfigError {
                    line: Some(n),
                    message: format!("encoder image_size {size} differs from data image_size {}", cfg.data.image_size),
                });
            }
        }
        if !pool_set {
            e.pool = vec![true; e.widths.len()];
        }
        e.arf_placement = parse_placement(&placement, e.backbone, e.widths.len())
            .map_err(|err| ConfigError { line: placement_line, message: err.to_string() })?;
        if let Err(err) = e.validate() {
            let message = err.to_string();
            let line = if message.contains("ARF placement") { placement_line } else { None };
            return Err(ConfigError { line, message });
        }

        let t = &mut cfg.train;
        t.schedule = match (schedule_kind.as_deref(), &t.schedule) {
            (Some("cosine"), _) => Schedule::Cosine { lr_min: lr_min.unwrap_or(0.0), cycles: snapshots.unwrap_or(1) },
            (Some(_), _) | (None, Schedule::Step { .. }) => match period {
                Some(p) => Schedule::Step { period: p },
                None => t.schedule.clone(),
            },
            (None, s) => s.clone(),
        };

        let whole = |r: arfsfr::Result<()>| r.map_err(|e| ConfigError { line: None, message: e.to_string() });
        whole(cfg.data.validate())?;
        whole(cfg.model.encoder.validate())?;
        whole(cfg.train.validate())?;
        if cfg.eval.way < 2 || cfg.eval.shot == 0 || cfg.eval.query_per_class == 0 || cfg.eval.episodes == 0 {
            return Err(ConfigError { line: None, message: "eval needs way >= 2 and positive shot, query_per_class, episodes".into() });
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn full_example() {
        let text = "\
[data]
seed = 3
difficulty = 0.5   # easier
[encoder]
widths = 8, 16
arf_placement = spatial:2
kappa = 0.2
[metric]
d_g = 8
[train]
lr = 0.01
schedule = cosine
snapshots = 2
lr_min = 0.001
epochs = 4
[eval]
episodes = 20
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.data_seed, 3);
        assert_eq!(cfg.data.difficulty, 0.5);
        assert_eq!(cfg.model.encoder.widths, [8, 16]);
        assert_eq!(cfg.model.encoder.pool, [true, true]);
        assert_eq!(cfg.model.encoder.arf_placement.len(), 1);
        assert_eq!(cfg.model.d_g(), 8);
        assert_eq!(cfg.train.schedule, Schedule::Cosine { lr_min: 0.001, cycles: 2 });
        assert_eq!(cfg.eval.episodes, 20);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = RunConfig::parse("[train]\nlr = 0.1\nwarmup = 3\n").unwrap_err();
        assert_eq!(e.to_string(), "line 3: unknown key `warmup` in [train]");
        let e = RunConfig::parse("[model]\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = RunConfig::parse("[train]\nepochs = many\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = RunConfig::parse("lr = 0.1\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = RunConfig::parse("[encoder]\n\narf_placement = spatial:9\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = RunConfig::parse("[data]\nimage_size = 16\n[encoder]\nimage_size = 32\n").unwrap_err();
        assert_eq!(e.line, Some(4));
    }

    #[test]
    fn cross_field_validation() {
        let e = RunConfig::parse("[train]\nschedule = cosine\nsnapshots = 3\nepochs = 10\n").unwrap_err();
        assert_eq!(e.line, None);
        assert!(e.message.contains("multiple"));
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use masksurf::dataio::DataConfig;
use masksurf::network::ModelConfig;
use masksurf::training::{FewshotConfig, Protocol, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub protocol: Protocol,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewshotSection {
    pub episode: FewshotConfig,
    pub epochs: usize,
}

/// Which evaluation each ablation configuration gets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateMetric {
    Probe,
    Finetune,
    Both,
}

impl AblateMetric {
    pub fn probe(self) -> bool {
        matches!(self, AblateMetric::Probe | AblateMetric::Both)
    }

    pub fn finetune(self) -> bool {
        matches!(self, AblateMetric::Finetune | AblateMetric::Both)
    }
}

pub const SWEEPS: [&str; 6] = ["mask_ratio", "mask_strategy", "alpha", "normal_mode", "target_scope", "normal_source"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblateSection {
    pub sweeps: Vec<String>,
    pub mask_ratios: Vec<f64>,
    pub alphas: Vec<f64>,
    pub metric: AblateMetric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisSection {
    pub samples: usize,
    pub threshold_deg: f64,
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Whether `model.num_classes` was given; otherwise it follows the dataset.
    pub num_classes_set: bool,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub probe: ProbeSection,
    pub fewshot: FewshotSection,
    pub ablate: AblateSection,
    pub vis: VisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            num_classes_set: false,
            train: TrainConfig::desk(),
            finetune: FinetuneSection {
                epochs: 30,
                protocol: Protocol::LinearFrozen,
            },
            probe: ProbeSection { epochs: 20 },
            fewshot: FewshotSection {
                episode: FewshotConfig::default(),
                epochs: 20,
            },
            ablate: AblateSection {
                sweeps: SWEEPS.iter().map(|s| s.to_string()).collect(),
                mask_ratios: (2..=9).map(|i| i as f64 / 10.0).collect(),
                alphas: vec![0.0, 0.001, 0.01, 0.1],
                metric: AblateMetric::Both,
            },
            vis: VisSection {
                samples: 4,
                threshold_deg: 30.0,
            },
        }
    }
}

/// Training keys that live in their own sections: `(section, key, train key)`.
const MOVED: [(&str, &str, &str); 5] = [
    ("mask", "ratio", "mask_ratio"),
    ("mask", "strategy", "mask_strategy"),
    ("loss", "alpha", "alpha_final"),
    ("loss", "normal_mode", "normal_mode"),
    ("loss", "target_scope", "target_scope"),
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| anyhow!("cannot parse `{value}` for `{key}`"))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn core<T>(r: masksurf::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

fn protocol(value: &str) -> Result<Protocol> {
    core(value.trim().parse())
}

/// TOML scalar or array rendered as the text the `apply` methods expect.
fn value_text(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => format!("{f:?}"),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| value_text(key, x))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!("`{key}` must be a scalar or a list"),
    })
}

impl RunConfig {
    /// Read an optional config file, then apply `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_toml(&text).with_context(|| format!("in config file {}", path.display()))?;
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{o}` is not of the form section.key=value"))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| anyhow!("override key `{key}` needs a section, as in train.epochs"))?;
            cfg.apply(section, field, value.trim())
                .with_context(|| format!("in override `{o}`"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse()?;
        for (section, body) in &table {
            let toml::Value::Table(body) = body else {
                bail!("key `{section}` is outside a [section]");
            };
            // Presets replace a whole section, so they go first.
            if let Some(p) = body.get("preset") {
                self.apply(section, "preset", &value_text(&format!("{section}.preset"), p)?)?;
            }
            for (key, v) in body.iter().filter(|(k, _)| *k != "preset") {
                let text = value_text(&format!("{section}.{key}"), v)?;
                self.apply(section, key, &text)?;
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        match (section, key) {
            ("data", _) => core(self.data.apply(key, value))?,
            ("model", "preset") => {
                self.model = match value.trim() {
                    "desk" => ModelConfig::desk(),
                    "paper" => ModelConfig::paper(),
                    other => bail!("unknown model.preset `{other}` (desk|paper)"),
                }
            }
            ("model", _) => {
                core(self.model.apply(key, value))?;
                if key == "num_classes" {
                    self.num_classes_set = true;
                }
            }
            ("train", "preset") => {
                self.train = match value.trim() {
                    "desk" => TrainConfig::desk(),
                    "paper" => TrainConfig::paper(),
                    other => bail!("unknown train.preset `{other}` (desk|paper)"),
                }
            }
            ("train", _) => {
                if let Some((sec, k, _)) = MOVED.iter().find(|m| m.2 == key) {
                    bail!("unknown key `{full}` (use `{sec}.{k}`)");
                }
                core(self.train.apply(key, value))?
            }
            ("mask" | "loss", _) => match MOVED.iter().find(|m| m.0 == section && m.1 == key) {
                Some((_, _, train_key)) => core(self.train.apply(train_key, value))?,
                None => bail!("unknown key `{full}`"),
            },
            ("finetune", "epochs") => self.finetune.epochs = num(&full, value)?,
            ("finetune", "protocol") => self.finetune.protocol = protocol(value)?,
            ("probe", "epochs") => self.probe.epochs = num(&full, value)?,
            ("fewshot", "n_way") => self.fewshot.episode.n_way = num(&full, value)?,
            ("fewshot", "m_shot") => self.fewshot.episode.m_shot = num(&full, value)?,
            ("fewshot", "query_per_class") => self.fewshot.episode.query_per_class = num(&full, value)?,
            ("fewshot", "trials") => self.fewshot.episode.trials = num(&full, value)?,
            ("fewshot", "protocol") => self.fewshot.episode.protocol = protocol(value)?,
            ("fewshot", "epochs") => self.fewshot.epochs = num(&full, value)?,
            ("ablate", "sweeps") => {
                let sweeps: Vec<String> = list(&full, value)?;
                if let Some(bad) = sweeps.iter().find(|s| !SWEEPS.contains(&s.as_str())) {
                    bail!("unknown sweep `{bad}` in `{full}` (expected some of {})", SWEEPS.join(", "));
                }
                self.ablate.sweeps = sweeps;
            }
            ("ablate", "mask_ratios") => self.ablate.mask_ratios = list(&full, value)?,
            ("ablate", "alphas") => self.ablate.alphas = list(&full, value)?,
            ("ablate", "metric") => {
                self.ablate.metric = match value.trim() {
                    "probe" => AblateMetric::Probe,
                    "finetune" => AblateMetric::Finetune,
                    "both" => AblateMetric::Both,
                    other => bail!("unknown `{full}` value `{other}` (probe|finetune|both)"),
                }
            }
            ("vis", "samples") => self.vis.samples = num(&full, value)?,
            ("vis", "threshold_deg") => self.vis.threshold_deg = num(&full, value)?,
            _ => bail!("unknown key `{full}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        core(self.data.validate())?;
        core(self.model.validate())?;
        core(self.train.validate())?;
        for (k, v) in [
            ("finetune.epochs", self.finetune.epochs),
            ("probe.epochs", self.probe.epochs),
            ("fewshot.epochs", self.fewshot.epochs),
        ] {
            if v == 0 {
                bail!("`{k}` must be positive");
            }
        }
        if let Some(r) = self.ablate.mask_ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            bail!("`ablate.mask_ratios` entry {r} outside (0, 1)");
        }
        if let Some(a) = self.ablate.alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            bail!("`ablate.alphas` entry {a} is not a non-negative number");
        }
        if !(self.vis.threshold_deg > 0.0 && self.vis.threshold_deg <= 90.0) {
            bail!("`vis.threshold_deg` must lie in (0, 90]");
        }
        Ok(())
    }

    /// Model config with the class count following the dataset unless set.
    pub fn model_for(&self, num_classes: usize) -> ModelConfig {
        let mut m = self.model.clone();
        if !self.num_classes_set {
            m.num_classes = num_classes;
        }
        m
    }

    pub fn train_with_epochs(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..self.train.clone()
        }
    }

    /// Every resolved key, grouped by section.
    pub fn resolved(&self) -> BTreeMap<&'static str, BTreeMap<String, String>> {
        let section = |pairs: Vec<(&'static str, String)>| pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let fs = &self.fewshot.episode;
        let mut out: BTreeMap<&'static str, BTreeMap<String, String>> = BTreeMap::new();
        out.insert("data", section(self.data.pairs()));
        out.insert("model", section(self.model.pairs()));
        let (moved, train): (Vec<_>, Vec<_>) =
            self.train.pairs().into_iter().partition(|(k, _)| MOVED.iter().any(|m| m.2 == *k));
        out.insert("train", section(train));
        for (sec, k, train_key) in MOVED {
            let v = moved.iter().find(|(tk, _)| *tk == train_key).expect("moved key").1.clone();
            out.entry(sec).or_default().insert(k.to_string(), v);
        }
        out.insert(
            "finetune",
            section(vec![
                ("epochs", self.finetune.epochs.to_string()),
                ("protocol", self.finetune.protocol.to_string()),
            ]),
        );
        out.insert("probe", section(vec![("epochs", self.probe.epochs.to_string())]));
        out.insert(
            "fewshot",
            section(vec![
                ("n_way", fs.n_way.to_string()),
                ("m_shot", fs.m_shot.to_string()),
                ("query_per_class", fs.query_per_class.to_string()),
                ("trials", fs.trials.to_string()),
                ("protocol", fs.protocol.to_string()),
                ("epochs", self.fewshot.epochs.to_string()),
            ]),
        );
        let metric = match self.ablate.metric {
            AblateMetric::Probe => "probe",
            AblateMetric::Finetune => "finetune",
            AblateMetric::Both => "both",
        };
        out.insert(
            "ablate",
            section(vec![
                ("sweeps", self.ablate.sweeps.join(",")),
                ("mask_ratios", join(&self.ablate.mask_ratios)),
                ("alphas", join(&self.ablate.alphas)),
                ("metric", metric.to_string()),
            ]),
        );
        out.insert(
            "vis",
            section(vec![
                ("samples", self.vis.samples.to_string()),
                ("threshold_deg", format!("{:?}", self.vis.threshold_deg)),
            ]),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use masksurf::masking::MaskStrategy;

    #[test]
    fn file_then_overrides() {
        let text = "[train]\nepochs = 3\n[mask]\nstrategy = \"block\"\n[model]\npreset = \"paper\"\nheads = 8\nembed_dim = 384\n";
        let mut cfg = RunConfig::default();
        cfg.apply_toml(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.mask_strategy, MaskStrategy::Block);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.encoder_depth, 12);
        cfg.apply("train", "epochs", "7").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        cfg.apply("loss", "alpha", "0.5").unwrap();
        assert_eq!(cfg.train.alpha_final, 0.5);
        let err = cfg.apply("train", "alpha_final", "0.5").unwrap_err();
        assert!(err.to_string().contains("loss.alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_name_themselves() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("train.epoch"), "{err:#}");
        let err = cfg.apply("probe", "alpha", "1").unwrap_err();
        assert!(err.to_string().contains("probe.alpha"));
        let err = cfg.apply_toml("epochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }

    #[test]
    fn syntax_errors_give_a_line() {
        let err = RunConfig::default().apply_toml("[train]\nepochs = 3\nbatch_size = = 2\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
    }

    #[test]
    fn lists_and_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_toml("[ablate]\nalphas = [0, 0.5]\nsweeps = [\"alpha\"]\n[model]\nembed_hidden = [64, 128]\n")
            .unwrap();
        assert_eq!(cfg.ablate.alphas, vec![0.0, 0.5]);
        assert_eq!(cfg.model.embed_hidden, [64, 128]);
        let mut again = RunConfig::default();
        for (section, pairs) in cfg.resolved() {
            for (k, v) in pairs {
                again.apply(section, &k, &v).unwrap();
            }
        }
        again.num_classes_set = cfg.num_classes_set;
        assert_eq!(again, cfg);
    }
}

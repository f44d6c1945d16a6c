//! Experiment plans and the shared `key = value` settings for extractors,
//! embedding and attacks.

use std::fmt;
use std::path::PathBuf;

use super::kv::{self, KeyValues};
use crate::attacks::{AttackConfig, Decorrelation, TargetStrategy, DEFAULT_WIENER_WINDOW};
use crate::augment::TransformSpec;
use crate::embed::{EmbedConfig, MarginRule};
use crate::error::{Error, Result};
use crate::features::ExtractorSpec;
use crate::percept::{Attenuation, ConstraintSpec};

/// Extractor settings; the linear extractor takes its input size from the
/// images it is used on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorSettings {
    pub kind: String,
    pub seed: u64,
    pub dim: usize,
    pub endpoint: String,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        Self {
            kind: "convnet".into(),
            seed: 0,
            dim: 128,
            endpoint: "127.0.0.1:7878".into(),
        }
    }
}

impl ExtractorSettings {
    pub fn spec(&self, height: usize, width: usize) -> Result<ExtractorSpec> {
        Ok(match self.kind.as_str() {
            "linear" => ExtractorSpec::Linear {
                seed: self.seed,
                dim: self.dim,
                height,
                width,
            },
            "convnet" => ExtractorSpec::Convnet {
                seed: self.seed,
                dim: self.dim,
            },
            "remote" => ExtractorSpec::Remote {
                endpoint: self.endpoint.clone(),
                dim: self.dim,
            },
            k => {
                return Err(Error::Config(format!(
                    "unknown extractor {k:?} (expected linear, convnet or remote)"
                )))
            }
        })
    }

    /// Applies one key; returns false when the key is not an extractor key.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "extractor" => {
                self.kind = raw.to_string();
                self.spec(1, 1)?;
            }
            "extractor_seed" => self.seed = kv::value(key, raw)?,
            "extractor_dim" => self.dim = kv::value(key, raw)?,
            "endpoint" => self.endpoint = raw.to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn render(&self, out: &mut KeyValues) {
        out.set("extractor", &self.kind);
        out.set("extractor_seed", self.seed);
        out.set("extractor_dim", self.dim);
        out.set("endpoint", &self.endpoint);
    }
}

fn attenuation(key: &str, raw: &str) -> Result<Attenuation> {
    match raw {
        "texture" => Ok(Attenuation::TextureMasking),
        "off" => Ok(Attenuation::Off),
        _ => Err(Error::Config(format!(
            "bad value {raw:?} for key {key:?} (expected texture or off)"
        ))),
    }
}

fn attenuation_name(a: Attenuation) -> &'static str {
    match a {
        Attenuation::TextureMasking => "texture",
        Attenuation::Off => "off",
    }
}

fn range(key: &str, raw: &str) -> Result<(f64, f64)> {
    let (a, b) = raw
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("key {key:?} expects `min:max`, got {raw:?}")))?;
    Ok((kv::value(key, a.trim())?, kv::value(key, b.trim())?))
}

fn set_transform(cfg: &mut EmbedConfig, spec: TransformSpec) {
    let same = |t: &TransformSpec| std::mem::discriminant(t) == std::mem::discriminant(&spec);
    match cfg.transforms.iter_mut().find(|t| same(t)) {
        Some(t) => *t = spec,
        None => cfg.transforms.push(spec),
    }
}

/// Applies one embedding key; returns false when the key is not one.
pub fn apply_embed_key(cfg: &mut EmbedConfig, key: &str, raw: &str) -> Result<bool> {
    let c = cfg.plan.constraint;
    match key {
        "embed_iterations" => cfg.plan.iterations = kv::value(key, raw)?,
        "embed_learning_rate" => cfg.plan.learning_rate = kv::value(key, raw)?,
        "embed_lambda" => cfg.plan.lambda = kv::value(key, raw)?,
        "psnr_w" => {
            cfg.plan.constraint = ConstraintSpec::new(kv::value(key, raw)?, c.mode, c.attenuation)?
        }
        "embed_attenuation" => cfg.plan.constraint.attenuation = attenuation(key, raw)?,
        "margin" => {
            cfg.margin = match raw.strip_prefix("adaptive:") {
                Some(f) => MarginRule::Adaptive {
                    factor: kv::value(key, f)?,
                },
                None => MarginRule::Fixed(kv::value(key, raw)?),
            }
        }
        "eot" => {
            cfg.transforms = if kv::flag(key, raw)? {
                TransformSpec::default_set()
            } else {
                Vec::new()
            }
        }
        "eot_rotation" => {
            let (min_deg, max_deg) = range(key, raw)?;
            set_transform(cfg, TransformSpec::Rotation { min_deg, max_deg });
        }
        "eot_crop" => {
            let (min_scale, max_scale) = range(key, raw)?;
            set_transform(
                cfg,
                TransformSpec::Crop {
                    min_scale,
                    max_scale,
                },
            );
        }
        "eot_blur" => {
            let (min_sigma, max_sigma) = range(key, raw)?;
            set_transform(
                cfg,
                TransformSpec::Blur {
                    min_sigma,
                    max_sigma,
                },
            );
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn render_embed(cfg: &EmbedConfig, out: &mut KeyValues) {
    out.set("embed_iterations", cfg.plan.iterations);
    out.set("embed_learning_rate", cfg.plan.learning_rate);
    out.set("embed_lambda", cfg.plan.lambda);
    out.set("psnr_w", cfg.plan.constraint.target_psnr);
    out.set(
        "embed_attenuation",
        attenuation_name(cfg.plan.constraint.attenuation),
    );
    out.set(
        "margin",
        match cfg.margin {
            MarginRule::Adaptive { factor } => format!("adaptive:{factor}"),
            MarginRule::Fixed(m) => m.to_string(),
        },
    );
    out.set("eot", !cfg.transforms.is_empty());
    for t in &cfg.transforms {
        match *t {
            TransformSpec::Identity => {}
            TransformSpec::Rotation { min_deg, max_deg } => {
                out.set("eot_rotation", format!("{min_deg}:{max_deg}"))
            }
            TransformSpec::Crop {
                min_scale,
                max_scale,
            } => out.set("eot_crop", format!("{min_scale}:{max_scale}")),
            TransformSpec::Blur {
                min_sigma,
                max_sigma,
            } => out.set("eot_blur", format!("{min_sigma}:{max_sigma}")),
        }
    }
}

/// Applies one attack key; returns false when the key is not one.
pub fn apply_attack_key(cfg: &mut AttackConfig, key: &str, raw: &str) -> Result<bool> {
    match key {
        "attack_iterations" => cfg.plan.iterations = kv::value(key, raw)?,
        "attack_learning_rate" => cfg.plan.learning_rate = kv::value(key, raw)?,
        "attack_lambda" => cfg.plan.lambda = kv::value(key, raw)?,
        "attack_attenuation" => cfg.plan.constraint.attenuation = attenuation(key, raw)?,
        "decorrelation" => {
            cfg.decorrelation = match raw {
                "norm_scaled" => Decorrelation::NormScaled,
                "cosine_squared" => Decorrelation::CosineSquared,
                _ => {
                    return Err(Error::Config(format!(
                        "bad value {raw:?} for key {key:?} (expected norm_scaled or cosine_squared)"
                    )))
                }
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn render_attack(cfg: &AttackConfig, out: &mut KeyValues) {
    out.set("attack_iterations", cfg.plan.iterations);
    out.set("attack_learning_rate", cfg.plan.learning_rate);
    out.set("attack_lambda", cfg.plan.lambda);
    out.set(
        "attack_attenuation",
        attenuation_name(cfg.plan.constraint.attenuation),
    );
    out.set(
        "decorrelation",
        match cfg.decorrelation {
            Decorrelation::NormScaled => "norm_scaled",
            Decorrelation::CosineSquared => "cosine_squared",
        },
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    ZeroBit,
    MultiBit,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroBit => "zero-bit",
            Self::MultiBit => "multi-bit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero-bit" | "zero_bit" => Ok(Self::ZeroBit),
            "multi-bit" | "multi_bit" => Ok(Self::MultiBit),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Copy,
    RemovalUntargeted,
    RemovalTargeted(TargetStrategy),
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::RemovalUntargeted => "removal_untargeted",
            Self::RemovalTargeted(_) => "removal_targeted",
        }
    }

    /// Empty unless targeted.
    pub fn strategy_name(&self) -> &'static str {
        match self {
            Self::RemovalTargeted(s) => s.name(),
            _ => "",
        }
    }

    /// `copy`, `removal_untargeted` or `removal_targeted:<strategy>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "copy" => Ok(Self::Copy),
            None if s == "removal_untargeted" => Ok(Self::RemovalUntargeted),
            Some(("removal_targeted", strategy)) => TargetStrategy::parse(strategy)
                .map(Self::RemovalTargeted)
                .map_err(|_| Error::Config(format!("unknown target strategy {strategy:?}"))),
            _ => Err(Error::Config(format!("unknown attack {s:?}"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RemovalTargeted(s) => write!(f, "removal_targeted:{}", s.name()),
            _ => f.write_str(self.name()),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Synthetic { seed: u64 },
    Directory(PathBuf),
}

/// The full protocol: which images, keys, schemes, attacks and budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub experiment_id: String,
    pub corpus: CorpusSource,
    pub image_count: usize,
    pub image_size: usize,
    pub extractor: ExtractorSettings,
    pub key_seeds: Vec<u64>,
    pub schemes: Vec<Scheme>,
    pub pfa_targets: Vec<f64>,
    pub payloads: Vec<usize>,
    pub psnr_a_targets: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub embed: EmbedConfig,
    pub attack: AttackConfig,
    pub master_seed: u64,
    /// Wall times are written as 0 unless enabled, keeping reports
    /// byte-identical across runs.
    pub record_wall_time: bool,
}

impl Default for ExperimentPlan {
    /// The desk plan: 16 synthetic 128x128 images, 3 keys, the convnet with
    /// d = 128, P_fa = 1e-4, payloads 10 and 30, budgets 30-45 dB.
    fn default() -> Self {
        Self {
            experiment_id: "desk".into(),
            corpus: CorpusSource::Synthetic { seed: 0 },
            image_count: 16,
            image_size: 128,
            extractor: ExtractorSettings::default(),
            key_seeds: vec![1, 2, 3],
            schemes: vec![Scheme::ZeroBit, Scheme::MultiBit],
            pfa_targets: vec![1e-4],
            payloads: vec![10, 30],
            psnr_a_targets: vec![30.0, 35.0, 40.0, 45.0],
            attacks: vec![
                AttackKind::Copy,
                AttackKind::RemovalUntargeted,
                AttackKind::RemovalTargeted(TargetStrategy::WienerDenoised {
                    window: DEFAULT_WIENER_WINDOW,
                }),
            ],
            embed: EmbedConfig::default(),
            attack: AttackConfig::default(),
            master_seed: 0,
            record_wall_time: false,
        }
    }
}

impl ExperimentPlan {
    /// Parses plan text over the desk defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut plan = Self::default();
        for (k, v) in KeyValues::parse(text)?.iter() {
            plan.apply(k, v)?;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn apply(&mut self, key: &str, raw: &str) -> Result<()> {
        if self.extractor.apply(key, raw)?
            || apply_embed_key(&mut self.embed, key, raw)?
            || apply_attack_key(&mut self.attack, key, raw)?
        {
            return Ok(());
        }
        match key {
            "experiment_id" => self.experiment_id = raw.to_string(),
            "corpus" => {
                self.corpus = match raw {
                    "synthetic" => CorpusSource::Synthetic {
                        seed: match self.corpus {
                            CorpusSource::Synthetic { seed } => seed,
                            _ => 0,
                        },
                    },
                    path => CorpusSource::Directory(PathBuf::from(path)),
                }
            }
            "corpus_seed" => {
                let seed = kv::value(key, raw)?;
                match &mut self.corpus {
                    CorpusSource::Synthetic { seed: s } => *s = seed,
                    CorpusSource::Directory(_) => {
                        return Err(Error::Config(
                            "corpus_seed applies only to the synthetic corpus".into(),
                        ))
                    }
                }
            }
            "image_count" => self.image_count = kv::value(key, raw)?,
            "image_size" => self.image_size = kv::value(key, raw)?,
            "key_seeds" => self.key_seeds = kv::list(key, raw)?,
            "schemes" => {
                self.schemes = raw
                    .split(',')
                    .map(|s| Scheme::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "pfa_targets" => self.pfa_targets = kv::list(key, raw)?,
            "payloads" => self.payloads = kv::list(key, raw)?,
            "psnr_a_targets" => self.psnr_a_targets = kv::list(key, raw)?,
            "attacks" => {
                self.attacks = raw
                    .split(',')
                    .map(|s| AttackKind::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "wiener_window" => {
                let window = kv::value(key, raw)?;
                for a in &mut self.attacks {
                    if let AttackKind::RemovalTargeted(TargetStrategy::WienerDenoised {
                        window: w,
                    }) = a
                    {
                        *w = window;
                    }
                }
            }
            "master_seed" => self.master_seed = kv::value(key, raw)?,
            "record_wall_time" => self.record_wall_time = kv::flag(key, raw)?,
            _ => return kv::unknown_key(key),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.image_count == 0 {
            return cfg("image_count must be >= 1".into());
        }
        if self.key_seeds.is_empty() || self.schemes.is_empty() {
            return cfg("key_seeds and schemes must be nonempty".into());
        }
        let mut seeds = self.key_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.key_seeds.len() {
            return cfg("key seeds must be distinct".into());
        }
        if self.schemes.contains(&Scheme::ZeroBit) && self.pfa_targets.is_empty() {
            return cfg("zero-bit scheme needs pfa_targets".into());
        }
        if self.schemes.contains(&Scheme::MultiBit) && self.payloads.is_empty() {
            return cfg("multi-bit scheme needs payloads".into());
        }
        if self.psnr_a_targets.is_empty() || self.attacks.is_empty() {
            return cfg("psnr_a_targets and attacks must be nonempty".into());
        }
        if let Some(p) = self.pfa_targets.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return cfg(format!("pfa target {p} outside (0, 1)"));
        }
        if self.payloads.contains(&0) {
            return cfg("payloads must be >= 1".into());
        }
        for &t in &self.psnr_a_targets {
            self.attack.clone().at_budget(t)?;
        }
        self.extractor.spec(self.image_size, self.image_size)?;
        self.embed.validate()?;
        self.attack.validate()
    }

    /// The plan as `key = value` text that [`ExperimentPlan::parse`] reads back.
    pub fn render(&self) -> String {
        let mut out = KeyValues::default();
        out.set("experiment_id", &self.experiment_id);
        match &self.corpus {
            CorpusSource::Synthetic { seed } => {
                out.set("corpus", "synthetic");
                out.set("corpus_seed", seed);
            }
            CorpusSource::Directory(p) => out.set("corpus", p.display()),
        }
        out.set("image_count", self.image_count);
        out.set("image_size", self.image_size);
        self.extractor.render(&mut out);
        out.set("key_seeds", kv::join(&self.key_seeds));
        out.set("schemes", kv::join(&self.schemes));
        out.set("pfa_targets", kv::join(&self.pfa_targets));
        out.set("payloads", kv::join(&self.payloads));
        out.set("psnr_a_targets", kv::join(&self.psnr_a_targets));
        out.set("attacks", kv::join(&self.attacks));
        let window = self.attacks.iter().find_map(|a| match a {
            AttackKind::RemovalTargeted(TargetStrategy::WienerDenoised { window }) => Some(*window),
            _ => None,
        });
        out.set("wiener_window", window.unwrap_or(DEFAULT_WIENER_WINDOW));
        render_embed(&self.embed, &mut out);
        render_attack(&self.attack, &mut out);
        out.set("master_seed", self.master_seed);
        out.set("record_wall_time", self.record_wall_time);
        out.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_round_trips() {
        let p = ExperimentPlan::default();
        p.validate().unwrap();
        assert_eq!(ExperimentPlan::parse(&p.render()).unwrap(), p);
    }

    #[test]
    fn overrides_apply() {
        let p = ExperimentPlan::parse(
            "image_count = 4\nkey_seeds = 7, 9\nattacks = copy, removal_targeted:other_image\n\
             margin = 0.25\neot = false\nattack_lambda = 3\n",
        )
        .unwrap();
        assert_eq!(p.image_count, 4);
        assert_eq!(p.key_seeds, vec![7, 9]);
        assert_eq!(
            p.attacks,
            vec![
                AttackKind::Copy,
                AttackKind::RemovalTargeted(TargetStrategy::OtherImage)
            ]
        );
        assert_eq!(p.embed.margin, MarginRule::Fixed(0.25));
        assert!(p.embed.transforms.is_empty());
        assert_eq!(p.attack.plan.lambda, 3.0);
        assert_eq!(ExperimentPlan::parse(&p.render()).unwrap(), p);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentPlan::parse("imagecount = 4").unwrap_err();
        assert!(
            matches!(e, Error::Config(ref m) if m.contains("imagecount")),
            "{e}"
        );
    }

    #[test]
    fn invariants_enforced() {
        for bad in [
            "key_seeds = 1,1",
            "payloads = 0",
            "psnr_a_targets = 10",
            "attacks = teleport",
            "pfa_targets = 2",
            "extractor = magic",
        ] {
            assert!(ExperimentPlan::parse(bad).is_err(), "{bad}");
        }
    }
}

//! Flat `key = value` configuration shared by every subcommand.

use std::path::Path;

use latentwm::attacks::{AttackConfig, DEFAULT_WIENER_WINDOW};
use latentwm::embed::EmbedConfig;
use latentwm::harness::kv::{self, KeyValues};
use latentwm::harness::plan::{apply_attack_key, apply_embed_key, render_attack, render_embed};
use latentwm::harness::ExtractorSettings;
use latentwm::{Error, Result};

pub const DEFAULT_PFA: f64 = 1e-4;
pub const DEFAULT_PAYLOAD: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub extractor: ExtractorSettings,
    pub embed: EmbedConfig,
    pub attack: AttackConfig,
    /// Zero-bit false-alarm target for embed and detect.
    pub pfa: f64,
    /// Multi-bit payload length when no message is given.
    pub payload: usize,
    /// Attack PSNR budget in dB.
    pub psnr_a: f64,
    pub wiener_window: usize,
    /// Seeds transform draws, random messages and random targets.
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        let attack = AttackConfig::default();
        Self {
            extractor: ExtractorSettings::default(),
            embed: EmbedConfig::default(),
            psnr_a: attack.plan.constraint.target_psnr,
            attack,
            pfa: DEFAULT_PFA,
            payload: DEFAULT_PAYLOAD,
            wiener_window: DEFAULT_WIENER_WINDOW,
            seed: 0,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (k, v) in KeyValues::parse(&text)?.iter() {
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, raw: &str) -> Result<()> {
        if self.extractor.apply(key, raw)?
            || apply_embed_key(&mut self.embed, key, raw)?
            || apply_attack_key(&mut self.attack, key, raw)?
        {
            return Ok(());
        }
        match key {
            "pfa" => self.pfa = kv::value(key, raw)?,
            "payload" => self.payload = kv::value(key, raw)?,
            "psnr_a" => self.psnr_a = kv::value(key, raw)?,
            "wiener_window" => self.wiener_window = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            _ => return kv::unknown_key(key),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pfa > 0.0 && self.pfa < 1.0) {
            return Err(Error::Config(format!("pfa {} outside (0, 1)", self.pfa)));
        }
        if self.payload == 0 {
            return Err(Error::Config("payload must be >= 1".into()));
        }
        self.extractor.spec(1, 1)?;
        self.embed.validate()?;
        self.attack.clone().at_budget(self.psnr_a)?.validate()
    }

    /// Attack settings at the configured budget.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        self.attack.clone().at_budget(self.psnr_a)
    }

    pub fn render(&self) -> String {
        let mut out = KeyValues::default();
        self.extractor.render(&mut out);
        render_embed(&self.embed, &mut out);
        render_attack(&self.attack, &mut out);
        out.set("pfa", self.pfa);
        out.set("payload", self.payload);
        out.set("psnr_a", self.psnr_a);
        out.set("wiener_window", self.wiener_window);
        out.set("seed", self.seed);
        out.render()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = CliConfig::default();
        cfg.apply("extractor", "linear").unwrap();
        cfg.apply("psnr_a", "40").unwrap();
        cfg.apply("margin", "2.5").unwrap();
        cfg.apply("eot", "false").unwrap();
        let mut back = CliConfig::default();
        for (k, v) in KeyValues::parse(&cfg.render()).unwrap().iter() {
            back.apply(k, v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = CliConfig::default().apply("lamda", "3").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        CliConfig::default().validate().unwrap();
        let text = CliConfig::default().render();
        for line in [
            "extractor = convnet",
            "extractor_dim = 128",
            "embed_iterations = 100",
            "embed_learning_rate = 0.5",
            "embed_lambda = 100",
            "psnr_w = 42",
            "margin = adaptive:1",
            "attack_learning_rate = 3",
            "attack_lambda = 100",
            "pfa = 0.0001",
            "psnr_a = 35",
            "wiener_window = 25",
        ] {
            assert!(text.lines().any(|l| l == line), "{line} missing in\n{text}");
        }
    }
}

//! Run configuration: flat TOML sections with documented defaults, strict
//! unknown-key rejection, and builders for the systems, networks, and loop.

use crate::control::{LoopConfig, Targets};
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::models::{
    Actor, ActorHead, BetaSchedule, DecoderHead, OpticalActor, OpticalActorSpec, OpticalVae,
    OpticalVaeSpec, RetinaActor, RetinaActorSpec, RetinaVae, RetinaVaeSpec, TaskKind, Vae,
};
use crate::optim::AdamHyper;
use crate::rng::{self, Role};
use crate::systems::{MeasurementMode, OpticalSystem, RetinaSampling, RetinaSystem, System};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::Path;

/// KL weight, written either as a number or as `"first/rest"`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BetaValue(pub BetaSchedule);

impl Serialize for BetaValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.first == self.0.rest {
            s.serialize_f64(self.0.first)
        } else {
            s.serialize_str(&format!("{}/{}", self.0.first, self.0.rest))
        }
    }
}

impl<'de> Deserialize<'de> for BetaValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(BetaValue(BetaSchedule::constant(v))),
            Raw::Text(s) => {
                let parts: Vec<&str> = s.split('/').collect();
                let parse = |p: &str| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| serde::de::Error::custom(format!("bad beta value {p:?}")))
                };
                match parts.as_slice() {
                    [one] => Ok(BetaValue(BetaSchedule::constant(parse(one)?))),
                    [first, rest] => {
                        Ok(BetaValue(BetaSchedule::two_phase(parse(first)?, parse(rest)?)))
                    }
                    _ => Err(serde::de::Error::custom(format!(
                        "beta must be a number or \"first/rest\", got {s:?}"
                    ))),
                }
            }
        }
    }
}

fn d_seed() -> u64 {
    0
}
fn d_n_targets() -> usize {
    10
}
fn d_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    // optical
    #[serde(default = "d_sys_n")]
    pub n: usize,
    #[serde(default = "d_sys_m")]
    pub m: usize,
    #[serde(default = "d_mode")]
    pub mode: MeasurementMode,
    #[serde(default)]
    pub drift_rate: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "d_intensity_scale")]
    pub intensity_scale: f64,
    // retina
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_hw")]
    pub height: usize,
    #[serde(default = "d_hw")]
    pub width: usize,
    #[serde(default = "d_cells")]
    pub n_cells: usize,
    #[serde(default = "d_rate_base")]
    pub rate_base: f64,
    #[serde(default = "d_log_rate_std")]
    pub log_rate_std: f64,
    #[serde(default = "d_sampling")]
    pub sampling: RetinaSampling,
}

fn d_sys_n() -> usize {
    64
}
fn d_sys_m() -> usize {
    256
}
fn d_mode() -> MeasurementMode {
    MeasurementMode::Intensity
}
fn d_intensity_scale() -> f64 {
    0.25
}
fn d_frames() -> usize {
    20
}
fn d_hw() -> usize {
    16
}
fn d_cells() -> usize {
    4
}
fn d_rate_base() -> f64 {
    10.0
}
fn d_log_rate_std() -> f64 {
    0.4
}
fn d_sampling() -> RetinaSampling {
    RetinaSampling::Rate
}

impl Default for SystemConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_beta")]
    pub beta: BetaValue,
    #[serde(default = "d_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "d_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "d_true")]
    pub encode_concat_x: bool,
    /// Optical decoder output head: "intensity" (squared complex field),
    /// "sigmoid", or "identity".
    #[serde(default = "d_head")]
    pub head: String,
}

fn d_latent() -> usize {
    16
}
fn d_beta() -> BetaValue {
    BetaValue(BetaSchedule::constant(0.001))
}
fn d_hidden() -> usize {
    64
}
fn d_true() -> bool {
    true
}
fn d_head() -> String {
    "intensity".into()
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    /// Optical hidden width (0 = single layer).
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    /// Retina bottleneck width.
    #[serde(default = "d_bottleneck")]
    pub bottleneck: usize,
    /// Optical output head: "wrapped" (linear, reduced mod 1) or "sigmoid".
    #[serde(default = "d_actor_head")]
    pub head: String,
}

fn d_actor_head() -> String {
    "wrapped".into()
}

fn d_bottleneck() -> usize {
    4
}

impl Default for ActorConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename = "loop")]
pub struct LoopSection {
    #[serde(default = "d_k")]
    pub k1: usize,
    #[serde(default = "d_k")]
    pub k2: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub actor_alpha: Option<f64>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_initial")]
    pub initial_dataset: usize,
    #[serde(default = "d_resample")]
    pub resample_count: usize,
    #[serde(default = "d_replay")]
    pub replay_ratio: f64,
    #[serde(default = "d_outer")]
    pub max_outer_iters: usize,
    #[serde(default)]
    pub target_metric: Option<f64>,
    /// Posterior latent samples dumped per outer iteration (0 disables).
    #[serde(default = "d_latent_dump")]
    pub latent_dump: usize,
    /// Per-outer-iteration learning-rate decay factor (1.0 = constant).
    #[serde(default = "d_alpha_decay")]
    pub alpha_decay: f64,
}

fn d_alpha_decay() -> f64 {
    1.0
}

fn d_k() -> usize {
    200
}
fn d_alpha() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    16
}
fn d_initial() -> usize {
    128
}
fn d_resample() -> usize {
    64
}
fn d_replay() -> f64 {
    0.5
}
fn d_outer() -> usize {
    10
}
fn d_latent_dump() -> usize {
    0
}

impl Default for LoopSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_task")]
    pub task: TaskKind,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Optional IDX file supplying target images.
    #[serde(default)]
    pub targets: Option<String>,
    #[serde(default = "d_n_targets")]
    pub n_targets: usize,
    /// Multiplier applied to file-loaded target images.
    #[serde(default = "d_one")]
    pub target_scale: f64,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub actor: ActorConfig,
    #[serde(rename = "loop", default)]
    pub run_loop: LoopSection,
}

fn d_task() -> TaskKind {
    TaskKind::Optical
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config write: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.n == 0 || s.m == 0 || s.frames == 0 || s.height == 0 || s.width == 0 || s.n_cells == 0
        {
            return Err(Error::Config("system dims must be >= 1".into()));
        }
        if self.model.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.n_targets == 0 {
            return Err(Error::Config("n_targets must be >= 1".into()));
        }
        match self.model.head.as_str() {
            "intensity" | "sigmoid" | "identity" => {}
            other => {
                return Err(Error::Config(format!(
                    "model.head must be \"intensity\", \"sigmoid\", or \"identity\", got {other:?}"
                )))
            }
        }
        match self.actor.head.as_str() {
            "wrapped" | "sigmoid" => {}
            other => {
                return Err(Error::Config(format!(
                    "actor.head must be \"wrapped\" or \"sigmoid\", got {other:?}"
                )))
            }
        }
        if self.task == TaskKind::Retina && (s.height % 4 != 0 || s.width % 4 != 0) {
            return Err(Error::Config(
                "retina frame dims must be divisible by 4".into(),
            ));
        }
        self.loop_config().validate()
    }

    fn default_target_metric(&self) -> f64 {
        match self.task {
            TaskKind::Optical => 0.9,
            TaskKind::Retina => 0.3,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        let l = &self.run_loop;
        LoopConfig {
            k1: l.k1,
            k2: l.k2,
            batch_size: l.batch_size,
            initial_dataset: l.initial_dataset,
            resample_count: l.resample_count,
            replay_ratio: l.replay_ratio,
            max_outer_iters: l.max_outer_iters,
            target_metric: l.target_metric.unwrap_or_else(|| self.default_target_metric()),
            beta: self.model.beta.0,
            model_hyper: AdamHyper {
                alpha: l.alpha,
                ..Default::default()
            },
            actor_hyper: AdamHyper {
                alpha: l.actor_alpha.unwrap_or(l.alpha),
                ..Default::default()
            },
            alpha_decay: l.alpha_decay,
        }
    }

    /// Flat output length the model must predict.
    pub fn output_len(&self) -> usize {
        match self.task {
            TaskKind::Optical => match self.system.mode {
                MeasurementMode::Intensity => self.system.m,
                MeasurementMode::FullComplex => 2 * self.system.m,
            },
            TaskKind::Retina => self.system.frames * self.system.n_cells,
        }
    }

    pub fn build_system(&self) -> Result<Box<dyn System>> {
        let s = &self.system;
        match self.task {
            TaskKind::Optical => Ok(Box::new(OpticalSystem::new(
                s.n,
                s.m,
                s.mode,
                s.drift_rate,
                s.noise_sigma,
                s.intensity_scale,
                self.seed,
            ))),
            TaskKind::Retina => Ok(Box::new(RetinaSystem::new(
                s.frames,
                s.height,
                s.width,
                s.n_cells,
                s.rate_base,
                s.log_rate_std,
                s.sampling,
                self.seed,
            )?)),
        }
    }

    pub fn build_model(&self) -> Result<Vae> {
        let mut r = rng::stream(self.seed, Role::ParamInit);
        match self.task {
            TaskKind::Optical => Ok(Vae::Optical(OpticalVae::init(
                OpticalVaeSpec {
                    n: self.system.n,
                    m: self.output_len(),
                    latent_dim: self.model.latent_dim,
                    decoder_hidden: self.model.decoder_hidden,
                    hidden_act: Activation::Sigmoid,
                    head: match self.model.head.as_str() {
                        "identity" => DecoderHead::Identity,
                        "sigmoid" => DecoderHead::Sigmoid,
                        _ => DecoderHead::Intensity,
                    },
                    encode_concat_x: self.model.encode_concat_x,
                },
                &mut r,
            ))),
            TaskKind::Retina => Ok(Vae::Retina(RetinaVae::init(
                RetinaVaeSpec {
                    frames: self.system.frames,
                    height: self.system.height,
                    width: self.system.width,
                    n_cells: self.system.n_cells,
                    latent_dim: self.model.latent_dim,
                    encoder_hidden: self.model.encoder_hidden,
                    decoder_hidden: self.model.decoder_hidden,
                    encode_concat_x: self.model.encode_concat_x,
                },
                &mut r,
            ))),
        }
    }

    pub fn build_actor(&self) -> Result<Actor> {
        // separate stream offset so actor init does not depend on model size
        let mut r = rng::stream(self.seed ^ 0x5eed_ac70, Role::ParamInit);
        match self.task {
            TaskKind::Optical => Ok(Actor::Optical(OpticalActor::init(
                OpticalActorSpec {
                    target_dim: self.output_len(),
                    n: self.system.n,
                    hidden: self.actor.hidden,
                    head: match self.actor.head.as_str() {
                        "sigmoid" => ActorHead::Sigmoid,
                        _ => ActorHead::Wrapped,
                    },
                },
                &mut r,
            ))),
            TaskKind::Retina => Ok(Actor::Retina(RetinaActor::init(
                RetinaActorSpec {
                    frames: self.system.frames,
                    height: self.system.height,
                    width: self.system.width,
                    n_cells: self.system.n_cells,
                    bottleneck: self.actor.bottleneck,
                },
                &mut r,
            )?)),
        }
    }

    /// Build the target set. Without a targets file, reachable targets are
    /// generated by querying a pristine (zero drift/noise) copy of the system
    /// on random inputs, so a perfect controller could score sigma = 0.
    pub fn build_targets(&self, base_dir: &Path) -> Result<Targets> {
        match self.task {
            TaskKind::Optical => {
                let vectors = match &self.targets {
                    Some(rel) => {
                        let path = base_dir.join(rel);
                        let bytes = std::fs::read(&path).map_err(|e| {
                            Error::Config(format!("targets {}: {e}", path.display()))
                        })?;
                        let images = super::idx::parse_idx(&bytes)?;
                        let side = (self.system.m as f64).sqrt() as usize;
                        if side * side != self.system.m {
                            return Err(Error::Config(format!(
                                "image targets need square m, got {}",
                                self.system.m
                            )));
                        }
                        let images = if images.rank() == 3 {
                            images
                        } else {
                            return Err(Error::Config(
                                "targets file must hold [N, H, W] images".into(),
                            ));
                        };
                        if images.shape()[0] < self.n_targets {
                            return Err(Error::Config(format!(
                                "targets file holds {} images, {} requested",
                                images.shape()[0],
                                self.n_targets
                            )));
                        }
                        let small =
                            super::idx::downsample_area(&images, side, side)?;
                        (0..self.n_targets)
                            .map(|i| {
                                let start = i * self.system.m;
                                crate::tensor::Tensor::new(
                                    vec![self.system.m],
                                    small.data()[start..start + self.system.m]
                                        .iter()
                                        .map(|&v| v * self.target_scale)
                                        .collect(),
                                )
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                    None => {
                        let s = &self.system;
                        let mut pristine = OpticalSystem::new(
                            s.n,
                            s.m,
                            s.mode,
                            0.0,
                            0.0,
                            s.intensity_scale,
                            self.seed,
                        );
                        let mut r = rng::stream(self.seed, Role::Eval);
                        (0..self.n_targets)
                            .map(|_| {
                                let x = rng::uniform01(&[s.n], &mut r);
                                pristine.query(&x)
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                };
                Ok(Targets::Optical(vectors))
            }
            TaskKind::Retina => {
                let s = &self.system;
                // exemplars are random stimuli; desired rates come from a
                // pristine rate-mode copy of the encoder
                let pristine = RetinaSystem::new(
                    s.frames,
                    s.height,
                    s.width,
                    s.n_cells,
                    s.rate_base,
                    s.log_rate_std,
                    RetinaSampling::Rate,
                    self.seed,
                )?;
                let mut r = rng::stream(self.seed, Role::Eval);
                let mut pairs = Vec::with_capacity(self.n_targets);
                for _ in 0..self.n_targets {
                    let x = rng::uniform01(&[s.frames, s.height, s.width], &mut r);
                    let y = pristine.forward_rates(&x)?;
                    pairs.push((x, y));
                }
                Ok(Targets::Retina(pairs))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_full_defaults() {
        let cfg = RunConfig::from_str("").unwrap();
        assert_eq!(cfg.task, TaskKind::Optical);
        assert_eq!(cfg.system.n, 64);
        assert_eq!(cfg.system.m, 256);
        assert_eq!(cfg.run_loop.k1, 200);
        assert_eq!(cfg.loop_config().target_metric, 0.9);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn beta_pair_parses_to_two_phase() {
        let cfg = RunConfig::from_str("[model]\nbeta = \"500/450\"\n").unwrap();
        assert_eq!(cfg.model.beta.0, BetaSchedule::two_phase(500.0, 450.0));
        let single = RunConfig::from_str("[model]\nbeta = 2.5\n").unwrap();
        assert_eq!(single.model.beta.0, BetaSchedule::constant(2.5));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_str("frobnicate = 1\n").is_err());
        assert!(RunConfig::from_str("[system]\nwarp = 9\n").is_err());
    }

    #[test]
    fn constraint_violations_named() {
        let err = RunConfig::from_str("[loop]\nk1 = 0\n").unwrap_err();
        assert!(err.to_string().contains("K1"), "{err}");
        assert!(RunConfig::from_str("[loop]\nreplay_ratio = 1.5\n").is_err());
    }

    #[test]
    fn load_is_idempotent() {
        let text = "task = \"retina\"\nseed = 9\n[model]\nbeta = \"500/450\"\n[loop]\nk1 = 7\n";
        let once = RunConfig::from_str(text).unwrap();
        let rewritten = once.to_toml_string().unwrap();
        let twice = RunConfig::from_str(&rewritten).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn retina_target_metric_default_differs() {
        let cfg = RunConfig::from_str("task = \"retina\"\n[system]\nheight = 16\nwidth = 16\n")
            .unwrap();
        assert_eq!(cfg.loop_config().target_metric, 0.3);
    }
}

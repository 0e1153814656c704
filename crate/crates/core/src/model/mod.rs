//! The full residual attention network: stem, three residual/attention
//! stages, three residual blocks at the lowest resolution, global average
//! pooling and a two-layer classification head.

mod io;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_model, save_model, FILE_MAGIC, FILE_VERSION};

use crate::blocks::{
    AttentionBlock, AttentionBlockSpec, Conv, Dense, LayerBuilder, ResidualBlock,
    ResidualBlockSpec, Session,
};
use crate::engine::{Mode, Padding, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `(mid, out)` widths of the residual stages before scaling. The last pair is
/// used by two consecutive blocks at the lowest resolution.
pub const STAGE_WIDTHS: [(usize, usize); 5] =
    [(32, 128), (128, 256), (256, 512), (512, 1024), (1024, 1024)];

/// Number of 2x spatial reductions between the input and the final pool.
const REDUCTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Output channels of the 5x5 stem convolution (not scaled).
    pub stem_channels: usize,
    pub num_classes: usize,
    /// Divisor applied to every residual-stage width.
    pub channel_scale: f64,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            stem_channels: 32,
            num_classes: 2,
            channel_scale: 1.0,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for desk-scale experiments.
    pub fn scaled(channel_scale: f64, input_size: usize) -> Self {
        ModelConfig {
            input_size,
            channel_scale,
            ..Default::default()
        }
    }

    fn scale(&self, width: usize) -> usize {
        (width as f64 / self.channel_scale).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let divisor = 1 << REDUCTIONS;
        if self.input_size == 0 || !self.input_size.is_multiple_of(divisor) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {divisor}",
                self.input_size
            )));
        }
        if self.input_size < 2 * divisor {
            return Err(Error::Config(format!(
                "input_size {} is too small: the deepest attention block needs at least {}",
                self.input_size,
                2 * divisor
            )));
        }
        if !(self.channel_scale.is_finite() && self.channel_scale > 0.0) {
            return Err(Error::Config(format!(
                "channel_scale {} must be a positive number",
                self.channel_scale
            )));
        }
        if let Some(&(mid, _)) = STAGE_WIDTHS.iter().find(|&&(mid, _)| self.scale(mid) == 0) {
            return Err(Error::Config(format!(
                "channel_scale {} reduces width {mid} to zero channels",
                self.channel_scale
            )));
        }
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("num_classes", self.num_classes),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Residual block specs in network order.
    pub fn residual_specs(&self) -> Vec<ResidualBlockSpec> {
        let w: Vec<(usize, usize)> = STAGE_WIDTHS
            .iter()
            .map(|&(mid, out)| (self.scale(mid), self.scale(out)))
            .collect();
        let mut specs = Vec::with_capacity(6);
        let mut cin = self.stem_channels;
        for (i, &(mid, out)) in w.iter().enumerate() {
            let repeats = if i == w.len() - 1 { 2 } else { 1 };
            for _ in 0..repeats {
                let stride = if i == 0 || (i == w.len() - 1) { 1 } else { 2 };
                specs.push(ResidualBlockSpec::new(cin, mid, out, stride));
                cin = out;
            }
        }
        specs
    }

    pub fn pool_window(&self) -> usize {
        self.input_size >> REDUCTIONS
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Stage {
    Residual(ResidualBlock),
    Attention(AttentionBlock),
}

impl Stage {
    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Stage::Residual(b) => b.forward(s, x),
            Stage::Attention(b) => b.forward(s, x),
        }
    }
}

/// Activations that can be exported as feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    StemConv,
    StemPool,
}

impl Tap {
    pub fn label(self) -> &'static str {
        match self {
            Tap::StemConv => "stem.conv",
            Tap::StemPool => "stem.pool",
        }
    }
}

/// One channel of an activation, min-max normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    fn normalized(height: usize, width: usize, raw: &[f32]) -> Self {
        let (lo, hi) = raw
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        let data = if range > 0.0 && range.is_finite() {
            raw.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; raw.len()]
        };
        FeatureMap {
            height,
            width,
            data,
        }
    }
}

/// Stage outputs recorded during a traced forward pass.
pub type Trace = Vec<(String, Var)>;

#[derive(Clone, Debug)]
pub struct ModelGraph {
    config: ModelConfig,
    params: ParamStore,
    stem: Conv,
    stages: Vec<(String, Stage)>,
    hidden: Dense,
    classifier: Dense,
}

/// Builds the network with Xavier-uniform weights drawn from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelGraph::construct(config, Some(&mut rng))
}

impl ModelGraph {
    /// With `rng = None` every weight is zero (used when loading from disk).
    pub(crate) fn construct(
        config: &ModelConfig,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = LayerBuilder::new(
            &mut params,
            rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
        );

        let stem = b.conv("stem.conv", 3, config.stem_channels, 5, 2, Padding::Same)?;
        let mut stages = Vec::new();
        let mut spatial = config.input_size / 4;
        let specs = config.residual_specs();
        for (i, spec) in specs.iter().enumerate() {
            spatial /= spec.stride;
            if i < 3 {
                let stage = i + 1;
                stages.push((
                    format!("stage{stage}.residual"),
                    Stage::Residual(ResidualBlock::new(
                        &mut b,
                        &format!("stage{stage}.res"),
                        *spec,
                    )?),
                ));
                let att = AttentionBlockSpec::new(spec.out_channels, spatial);
                stages.push((
                    format!("stage{stage}.attention"),
                    Stage::Attention(AttentionBlock::new(
                        &mut b,
                        &format!("stage{stage}.att"),
                        att,
                    )?),
                ));
            } else {
                let k = i - 2;
                stages.push((
                    format!("stage4.residual{k}"),
                    Stage::Residual(ResidualBlock::new(
                        &mut b,
                        &format!("stage4.res{k}"),
                        *spec,
                    )?),
                ));
            }
        }
        let features = specs.last().expect("stage list is fixed").out_channels;
        let hidden = b.dense("head.hidden", features, config.head_hidden)?;
        let classifier = b.dense("head.out", config.head_hidden, config.num_classes)?;
        Ok(ModelGraph {
            config: config.clone(),
            params,
            stem,
            stages,
            hidden,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stages(&self) -> impl Iterator<Item = (&str, &Stage)> {
        self.stages.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match batch.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::shape(
                "forward",
                format!("expected N x 3 x {s} x {s}, got {other:?}"),
            )),
        }
    }

    /// Records the full network on `s`, returning class probabilities. When
    /// `trace` is given, every stage output is appended to it.
    pub fn forward_in(
        &self,
        s: &mut Session<'_>,
        x: Var,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let mut record = |name: &str, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), v));
            }
        };
        let h = self.stem.forward(s, x)?;
        record("stem.conv", h);
        let mut h = s.tape_mut().maxpool2d(h, 2, 2, Padding::Valid)?;
        record("stem.pool", h);
        for (name, stage) in &self.stages {
            h = stage.forward(s, h)?;
            record(name, h);
        }
        let h = s.tape_mut().avgpool2d(h, self.config.pool_window())?;
        record("pool", h);
        let h = s.tape_mut().flatten(h);
        let h = self.hidden.forward(s, h)?;
        let h = s.tape_mut().relu(h);
        record("head.hidden", h);
        let logits = self.classifier.forward(s, h)?;
        record("head.logits", logits);
        let probs = s.tape_mut().softmax(logits)?;
        record("softmax", probs);
        Ok(probs)
    }

    /// Forward pass returning `N x num_classes` probabilities. Training mode
    /// folds batch statistics into the running averages.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut s = Session::new(&self.params, mode);
        let x = s.input(batch.clone());
        let probs = self.forward_in(&mut s, x, None)?;
        let value = s.value(probs).clone();
        let out = s.finish();
        self.params.apply_stat_updates(out.stat_updates);
        Ok(value)
    }

    /// Evaluation-mode forward pass; does not mutate the model.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(batch.clone());
        let probs = self.forward_in(&mut s, x, None)?;
        Ok(s.value(probs).clone())
    }

    /// Output shape of every stage for an evaluation-mode pass over `batch`.
    pub fn shape_trace(&self, batch: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        self.check_input(batch)?;
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(batch.clone());
        let mut trace = Trace::new();
        self.forward_in(&mut s, x, Some(&mut trace))?;
        Ok(trace
            .into_iter()
            .map(|(name, v)| (name, s.value(v).shape().to_vec()))
            .collect())
    }

    /// Number of channels produced at a tap.
    pub fn tap_channels(&self, _tap: Tap) -> usize {
        self.config.stem_channels
    }

    /// First `count` channels of the activation at `tap` for a single image,
    /// each min-max normalized (constant maps become all zero).
    pub fn extract_feature_maps(
        &self,
        image: &Tensor,
        tap: Tap,
        count: usize,
    ) -> Result<Vec<FeatureMap>> {
        let batch = match image.shape() {
            [3, _, _] => image
                .clone()
                .reshape(&[1, 3, image.shape()[1], image.shape()[2]])?,
            [1, 3, _, _] => image.clone(),
            other => {
                return Err(Error::shape(
                    "extract_feature_maps",
                    format!("expected a single 3-channel image, got {other:?}"),
                ))
            }
        };
        self.check_input(&batch)?;
        let available = self.tap_channels(tap);
        if count > available {
            return Err(Error::invalid(
                "extract_feature_maps",
                format!(
                    "requested {count} maps but {} has only {available} channels",
                    tap.label()
                ),
            ));
        }
        let mut s = Session::new(&self.params, Mode::Eval);
        let x = s.input(batch);
        let h = self.stem.forward(&mut s, x)?;
        let act = match tap {
            Tap::StemConv => h,
            Tap::StemPool => s.tape_mut().maxpool2d(h, 2, 2, Padding::Valid)?,
        };
        let value = s.value(act);
        let (_, _, height, width) = value.dims4()?;
        Ok(value
            .data()
            .chunks(height * width)
            .take(count)
            .map(|plane| FeatureMap::normalized(height, width, plane))
            .collect())
    }
}

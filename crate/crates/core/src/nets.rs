//! Detector `H = G∘F` (feature extractor `F`, two-layer classifier `G`) and
//! the domain discriminator `Q`.
//!
//! Parameters live in name-keyed [`ParamSet`]s so that the teacher and
//! student extractors, the classifier and the discriminator can be frozen,
//! copied and checkpointed independently. A forward pass binds a set into
//! a [`Graph`] (trainable or constant) and builds the computation on top.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ConvSpec, Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::freqmap::BLOCK;
use crate::tensor::Tensor;

pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Visual transformer plus DCT frequency branch, features concatenated.
    DualVit,
    /// Visual transformer branch only.
    TinyVit,
    /// Four strided convolution blocks with global average pooling.
    TinyCnn,
    /// Two-layer perceptron over flat vectors (toy and feature-level inputs).
    Mlp,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::DualVit => "dual_vit",
            BackboneKind::TinyVit => "tiny_vit",
            BackboneKind::TinyCnn => "tiny_cnn",
            BackboneKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            BackboneKind::DualVit,
            BackboneKind::TinyVit,
            BackboneKind::TinyCnn,
            BackboneKind::Mlp,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Input image side (image kinds).
    pub image_side: usize,
    /// Input vector width (`mlp` only).
    pub input_dim: usize,
    /// Transformer blocks in the visual branch (l).
    pub visual_layers: usize,
    /// Transformer blocks in the frequency branch (m).
    pub freq_layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Channels of the frequency convolution block (C).
    pub freq_channels: usize,
    /// Convolution layers in the frequency block (D).
    pub freq_depth: usize,
    /// Hidden width of both discriminator layers.
    pub disc_hidden: usize,
    /// Dropout on token embeddings and features; training mode only.
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            kind: BackboneKind::DualVit,
            image_side: 32,
            input_dim: 0,
            visual_layers: 2,
            freq_layers: 1,
            embed_dim: 48,
            heads: 4,
            mlp_ratio: 2,
            patch: 8,
            freq_channels: 48,
            freq_depth: 2,
            disc_hidden: 64,
            dropout: 0.0,
        }
    }

    pub fn paper_parity() -> Self {
        Self {
            kind: BackboneKind::DualVit,
            image_side: 224,
            input_dim: 0,
            visual_layers: 12,
            freq_layers: 4,
            embed_dim: 768,
            heads: 12,
            mlp_ratio: 4,
            patch: 16,
            freq_channels: 768,
            freq_depth: 4,
            disc_hidden: 256,
            dropout: 0.0,
        }
    }

    /// Small perceptron backbone over `input_dim`-wide vectors.
    pub fn mlp(input_dim: usize, width: usize) -> Self {
        Self {
            kind: BackboneKind::Mlp,
            image_side: 0,
            input_dim,
            visual_layers: 1,
            freq_layers: 1,
            embed_dim: width,
            heads: 1,
            mlp_ratio: 1,
            patch: 1,
            freq_channels: 1,
            freq_depth: 1,
            disc_hidden: width,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.disc_hidden == 0 {
            return fail("embed_dim and disc_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        match self.kind {
            BackboneKind::Mlp => {
                if self.input_dim == 0 {
                    return fail("mlp backbone needs input_dim > 0".into());
                }
                return Ok(());
            }
            BackboneKind::TinyCnn => {
                if !self.image_side.is_multiple_of(16) || !self.embed_dim.is_multiple_of(4) {
                    return fail("tiny_cnn needs side divisible by 16 and embed_dim by 4".into());
                }
                return Ok(());
            }
            BackboneKind::DualVit | BackboneKind::TinyVit => {}
        }
        if self.visual_layers == 0 {
            return fail("visual_layers (l) must be at least 1".into());
        }
        if self.patch == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch) {
            return fail(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.kind == BackboneKind::DualVit {
            if self.freq_layers == 0 {
                return fail("freq_layers (m) must be at least 1".into());
            }
            if self.freq_depth == 0 || self.freq_channels == 0 {
                return fail("freq_depth (D) and freq_channels (C) must be positive".into());
            }
            if !self.image_side.is_multiple_of(BLOCK) {
                return fail(format!("image side {} not divisible by 8", self.image_side));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            BackboneKind::DualVit => 2 * self.embed_dim,
            _ => self.embed_dim,
        }
    }

    /// Shape of a single input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            BackboneKind::Mlp => vec![self.input_dim],
            _ => vec![self.image_side, self.image_side, 3],
        }
    }

    fn cnn_widths(&self) -> [usize; 4] {
        let e = self.embed_dim;
        [e / 4, e / 2, e, e]
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("init std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

struct Init<'a> {
    set: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.weight(name, fan_in, fan_out, std);
    }

    /// He initialisation for layers followed by ReLU.
    fn linear_relu(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        self.weight(name, fan_in, fan_out, std);
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) {
        let w = normal_tensor(self.rng, &[fan_in, fan_out], std);
        self.set.insert(format!("{name}.w"), w);
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn layer_norm(&mut self, name: &str, d: usize) {
        self.set.insert(format!("{name}.g"), Tensor::filled(&[d], 1.0));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    }

    fn pos(&mut self, name: &str, n: usize, d: usize) {
        let p = normal_tensor(self.rng, &[n, d], 0.02);
        self.set.insert(name.to_string(), p);
    }

    fn block(&mut self, prefix: &str, d: usize, ratio: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.linear(&format!("{prefix}.qkv"), d, 3 * d);
        self.linear(&format!("{prefix}.proj"), d, d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.fc1"), d, ratio * d);
        self.linear(&format!("{prefix}.fc2"), ratio * d, d);
    }
}

fn sub_rng(seed: u64, role: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn init_extractor(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = sub_rng(seed, "F");
    let mut init = Init {
        set: ParamSet::new(),
        rng: &mut rng,
    };
    let e = cfg.embed_dim;
    match cfg.kind {
        BackboneKind::Mlp => {
            init.linear_relu("mlp.fc1", cfg.input_dim, e);
            init.linear_relu("mlp.fc2", e, e);
        }
        BackboneKind::TinyCnn => {
            let mut cin = 3;
            for (i, w) in cfg.cnn_widths().into_iter().enumerate() {
                init.linear_relu(&format!("cnn.conv{i}"), 9 * cin, w);
                cin = w;
            }
        }
        BackboneKind::DualVit | BackboneKind::TinyVit => {
            let p = cfg.patch;
            let tokens = (cfg.image_side / p).pow(2);
            init.linear("visual.patch", p * p * 3, e);
            init.pos("visual.pos", tokens, e);
            for i in 0..cfg.visual_layers {
                init.block(&format!("visual.blocks.{i}"), e, cfg.mlp_ratio);
            }
            init.layer_norm("visual.norm", e);
            if cfg.kind == BackboneKind::DualVit {
                let c = cfg.freq_channels;
                init.linear_relu("freq.conv0", BLOCK * BLOCK * 3, c);
                for d in 1..cfg.freq_depth {
                    init.linear_relu(&format!("freq.conv{d}"), 9 * c, c);
                }
                if c != e {
                    init.linear("freq.embed", c, e);
                }
                let ftokens = (cfg.image_side / BLOCK).pow(2);
                init.pos("freq.pos", ftokens, e);
                for i in 0..cfg.freq_layers {
                    init.block(&format!("freq.blocks.{i}"), e, cfg.mlp_ratio);
                }
                init.layer_norm("freq.norm", e);
            }
        }
    }
    Ok(init.set)
}

pub fn init_classifier(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut rng = sub_rng(seed, "G");
    let mut init = Init {
        set: ParamSet::new(),
        rng: &mut rng,
    };
    let f = cfg.feature_dim();
    let h = (f / 2).max(1);
    init.linear("classifier.fc1", f, h);
    init.linear("classifier.fc2", h, 2);
    init.set
}

pub fn init_discriminator(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut rng = sub_rng(seed, "Q");
    let mut init = Init {
        set: ParamSet::new(),
        rng: &mut rng,
    };
    let (f, h) = (cfg.feature_dim(), cfg.disc_hidden);
    init.linear_relu("disc.fc1", f, h);
    init.linear_relu("disc.fc2", h, h);
    init.linear("disc.out", h, 1);
    init.set
}

/// A parameter set bound into a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, set: &ParamSet, trainable: bool) -> Self {
        let vars = set
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from bound set"))
    }

    fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for every bound parameter (zeros where none flowed).
    pub fn grads(&self, g: &Graph, grads: &Grads) -> ParamSet {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
                (k.clone(), t)
            })
            .collect()
    }
}

/// Training-mode randomness; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut DropoutRng) -> Var {
    let Some(rng) = rng.as_deref_mut() else {
        return x;
    };
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask).unwrap());
    g.mul(x, m)
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, p.get(&format!("{name}.w")));
    g.add_bias(y, p.get(&format!("{name}.b")))
}

fn layer_norm(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")))
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Var {
    g.conv2d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), spec)
}

/// Pre-norm transformer block over `[B, N, D]` tokens.
fn transformer_block(g: &mut Graph, p: &Bound, prefix: &str, heads: usize, x: Var) -> Var {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x);
    let qkv = linear(g, p, &format!("{prefix}.qkv"), h);
    let a = g.attention(qkv, heads);
    let a = linear(g, p, &format!("{prefix}.proj"), a);
    let x = g.add(x, a);
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x);
    let h = linear(g, p, &format!("{prefix}.fc1"), h);
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.fc2"), h);
    g.add(x, h)
}

/// Scale below which DCT coefficients are compressed linearly rather than
/// logarithmically before the frequency convolution.
pub const FREQ_LOG_EPS: f64 = 0.01;

/// Names of activation maps exposed for Grad-CAM.
pub const LAYER_FREQ_CONV: &str = "freq.conv_last";
pub const LAYER_VISUAL_TOKENS: &str = "visual.tokens";
pub const LAYER_CNN_CONV: &str = "cnn.conv_last";

pub struct Extracted {
    /// `[B, feature_dim]`.
    pub features: Var,
    /// Spatial activation maps `[B, h, w, c]` keyed by layer name.
    pub activations: BTreeMap<&'static str, Var>,
}

fn token_branch(
    g: &mut Graph,
    p: &Bound,
    cfg: &BackboneConfig,
    prefix: &str,
    layers: usize,
    tokens: Var,
    rng: &mut DropoutRng,
) -> (Var, Var) {
    let s = g.shape(tokens).to_vec();
    let (b, side, d) = (s[0], s[1], s[3]);
    let x = g.reshape(tokens, &[b, side * side, d]);
    let x = g.add_bias(x, p.get(&format!("{prefix}.pos")));
    let mut x = dropout(g, x, cfg.dropout, rng);
    for i in 0..layers {
        x = transformer_block(g, p, &format!("{prefix}.blocks.{i}"), cfg.heads, x);
    }
    let grid = g.reshape(x, &[b, side, side, d]);
    let x = layer_norm(g, p, &format!("{prefix}.norm"), x);
    (g.mean_axis1(x), grid)
}

/// Runs the extractor on a `[B, ...input_shape]` batch.
pub fn extract(
    g: &mut Graph,
    cfg: &BackboneConfig,
    p: &Bound,
    x: Var,
    mut rng: DropoutRng,
) -> Extracted {
    let mut activations = BTreeMap::new();
    let features = match cfg.kind {
        BackboneKind::Mlp => {
            let h = linear(g, p, "mlp.fc1", x);
            let h = g.relu(h);
            let h = linear(g, p, "mlp.fc2", h);
            g.relu(h)
        }
        BackboneKind::TinyCnn => {
            let mut h = x;
            for i in 0..4 {
                let spec = ConvSpec {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                };
                h = conv(g, p, &format!("cnn.conv{i}"), h, spec);
                h = g.relu(h);
            }
            activations.insert(LAYER_CNN_CONV, h);
            let s = g.shape(h).to_vec();
            let t = g.reshape(h, &[s[0], s[1] * s[2], s[3]]);
            g.mean_axis1(t)
        }
        BackboneKind::DualVit | BackboneKind::TinyVit => {
            let spec = ConvSpec {
                kernel: cfg.patch,
                stride: cfg.patch,
                pad: 0,
            };
            let tokens = conv(g, p, "visual.patch", x, spec);
            let (visual, grid) =
                token_branch(g, p, cfg, "visual", cfg.visual_layers, tokens, &mut rng);
            activations.insert(LAYER_VISUAL_TOKENS, grid);
            if cfg.kind == BackboneKind::TinyVit {
                visual
            } else {
                let f = g.freq_map(x);
                let f = g.signed_log(f, FREQ_LOG_EPS);
                let block = ConvSpec {
                    kernel: BLOCK,
                    stride: BLOCK,
                    pad: 0,
                };
                let mut h = conv(g, p, "freq.conv0", f, block);
                h = g.relu(h);
                for d in 1..cfg.freq_depth {
                    let spec = ConvSpec {
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    };
                    h = conv(g, p, &format!("freq.conv{d}"), h, spec);
                    h = g.relu(h);
                }
                activations.insert(LAYER_FREQ_CONV, h);
                let h = match p.try_get("freq.embed.w") {
                    Some(_) => linear(g, p, "freq.embed", h),
                    None => h,
                };
                let (freq, _) = token_branch(g, p, cfg, "freq", cfg.freq_layers, h, &mut rng);
                g.concat_last(&[visual, freq])
            }
        }
    };
    let features = dropout(g, features, cfg.dropout, &mut rng);
    Extracted {
        features,
        activations,
    }
}

/// Class logits `[B, 2]` (index 0 real, 1 fake).
pub fn classify(g: &mut Graph, p: &Bound, f: Var) -> Var {
    let h = linear(g, p, "classifier.fc1", f);
    let h = g.gelu(h);
    linear(g, p, "classifier.fc2", h)
}

/// Discriminator logit `[B]`; `sigmoid` of it is the source probability.
pub fn discriminate_logit(g: &mut Graph, p: &Bound, f: Var) -> Var {
    let h = linear(g, p, "disc.fc1", f);
    let h = g.relu(h);
    let h = linear(g, p, "disc.fc2", h);
    let h = g.relu(h);
    let o = linear(g, p, "disc.out", h);
    let b = g.shape(o)[0];
    g.reshape(o, &[b])
}

pub fn discriminate(g: &mut Graph, p: &Bound, f: Var) -> Var {
    let z = discriminate_logit(g, p, f);
    g.sigmoid(z)
}

fn check_width(t: &Tensor, want: usize, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != want {
        return Err(Error::Shape(format!(
            "{what}: expected [B, {want}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Parameter sets of the teacher `F`, student `F′`, classifier `G` and
/// discriminator `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub backbone: BackboneConfig,
    pub f: ParamSet,
    pub f_prime: ParamSet,
    pub g: ParamSet,
    pub q: ParamSet,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"BIADAPT\0";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    backbone: BackboneConfig,
    sets: BTreeMap<String, Vec<(String, Vec<usize>)>>,
}

impl ModelState {
    pub fn init(backbone: BackboneConfig, seed: u64) -> Result<Self> {
        let f = init_extractor(&backbone, seed)?;
        Ok(Self {
            f_prime: f.clone(),
            f,
            g: init_classifier(&backbone, seed),
            q: init_discriminator(&backbone, seed),
            backbone,
        })
    }

    /// `θ_F′ ← θ_F` (deep copy).
    pub fn init_student_from_teacher(&mut self) {
        self.f_prime = self.f.clone();
    }

    pub fn param_count(&self) -> usize {
        self.f.values().map(Tensor::len).sum::<usize>()
            + self.g.values().map(Tensor::len).sum::<usize>()
            + self.q.values().map(Tensor::len).sum::<usize>()
    }

    /// Extracts features with an extractor set in evaluation mode.
    pub fn features(&self, extractor: &ParamSet, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, extractor, false);
        let x = g.constant(batch.clone());
        let out = extract(&mut g, &self.backbone, &p, x, None);
        Ok(g.value(out.features).clone())
    }

    /// Logits of the deployed detector `G∘F′` in evaluation mode.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let f = self.features(&self.f_prime, batch)?;
        self.classify_features(&f)
    }

    pub fn classify_features(&self, f: &Tensor) -> Result<Tensor> {
        check_width(f, self.backbone.feature_dim(), "classifier input")?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.g, false);
        let x = g.constant(f.clone());
        let y = classify(&mut g, &p, x);
        Ok(g.value(y).clone())
    }

    pub fn discriminate_features(&self, f: &Tensor) -> Result<Tensor> {
        check_width(f, self.backbone.feature_dim(), "discriminator input")?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.q, false);
        let x = g.constant(f.clone());
        let y = discriminate(&mut g, &p, x);
        Ok(g.value(y).clone())
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let want = self.backbone.input_shape();
        if batch.shape().len() != want.len() + 1 || batch.shape()[1..] != want[..] {
            return Err(Error::Shape(format!(
                "input batch {:?} does not match per-sample shape {want:?}",
                batch.shape()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named: [(&str, &ParamSet); 4] = [
            ("F", &self.f),
            ("F_prime", &self.f_prime),
            ("G", &self.g),
            ("Q", &self.q),
        ];
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            backbone: self.backbone.clone(),
            sets: named
                .iter()
                .map(|(k, set)| {
                    let entries = set.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
                    (k.to_string(), entries)
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, set) in named {
            for t in set.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(u64b) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..hlen]).map_err(|e| Error::Format(e.to_string()))?;
        r = &r[hlen..];
        let mut take_set = |key: &str| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for (name, shape) in header.sets.get(key).into_iter().flatten() {
                let n: usize = shape.iter().product();
                if r.len() < n * 8 {
                    return Err(bad("truncated parameter data"));
                }
                let data = r[..n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                r = &r[n * 8..];
                set.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            Ok(set)
        };
        let state = ModelState {
            f: take_set("F")?,
            f_prime: take_set("F_prime")?,
            g: take_set("G")?,
            q: take_set("Q")?,
            backbone: header.backbone,
        };
        if !r.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Largest elementwise difference between two same-keyed parameter sets.
pub fn max_param_diff(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::StateCorruption(format!(
            "parameter sets hold {} vs {} tensors",
            a.len(),
            b.len()
        )));
    }
    let mut m = 0.0f64;
    for (k, ta) in a {
        let tb = b
            .get(k)
            .ok_or_else(|| Error::StateCorruption(format!("parameter `{k}` missing")))?;
        if ta.shape() != tb.shape() {
            return Err(Error::StateCorruption(format!(
                "parameter `{k}`: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        m = m.max(ta.max_abs_diff(tb));
    }
    Ok(m)
}

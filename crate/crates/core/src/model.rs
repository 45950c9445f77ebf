//! Hierarchical classifier: convolutional backbone, transformer encoder over
//! the flattened feature grid, transformer decoder with one learned query per
//! taxonomy level, per-level linear heads and an optional level-3 prototype
//! bank that replaces the level-3 head.

use crate::autograd::{AttnShape, Graph, ImageGeom, Matrix, Var, Window};
use crate::imaging::Image;
use crate::kv::{KvDoc, KvError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),
    #[error("prototype bank required for the hierarchical_mpl variant")]
    MissingBank,
    #[error(transparent)]
    Kv(#[from] KvError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

macro_rules! config_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(ModelError::InvalidConfig(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

config_enum!(Backbone { TinyCnn => "tiny_cnn", Resnet34 => "resnet34" });
config_enum!(Variant {
    Singular => "singular",
    Hierarchical => "hierarchical",
    HierarchicalMpl => "hierarchical_mpl",
});
config_enum!(Modality {
    Clinical => "clinical",
    Dermoscopic => "dermoscopic",
    Multimodal => "multimodal",
});
config_enum!(Fusion { Sequence => "sequence", Channel => "channel" });

/// Which of the two images of a lesion a backbone consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Clinical,
    Dermoscopic,
}

impl View {
    pub fn key(&self) -> &'static str {
        match self {
            View::Clinical => "clinical",
            View::Dermoscopic => "dermoscopic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: Backbone,
    /// Model width `d`.
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub variant: Variant,
    pub modality: Modality,
    pub fusion: Fusion,
    /// `(2, |L2|, |ID L3|)`.
    pub level_sizes: (usize, usize, usize),
    /// Output channels of the four tiny-CNN stages.
    pub tiny_channels: [usize; 4],
    /// Temperature of the distance softmax.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone: Backbone::TinyCnn,
            d: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            variant: Variant::HierarchicalMpl,
            modality: Modality::Clinical,
            fusion: Fusion::Sequence,
            level_sizes: (2, 4, 12),
            tiny_channels: [16, 32, 48, 64],
            gamma: 1.0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "image_size",
    "backbone",
    "d",
    "encoder_layers",
    "decoder_layers",
    "heads",
    "ffn_dim",
    "variant",
    "modality",
    "fusion",
    "level_sizes",
    "tiny_channels",
    "gamma",
];

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ModelError::InvalidConfig(format!("{key}: bad list `{s}`")))
}

impl ModelConfig {
    /// Full-scale configuration (320 px, ResNet-34, d = 256, 6 + 6 layers, 8 heads).
    pub fn full_scale(level_sizes: (usize, usize, usize)) -> Self {
        Self {
            image_size: 320,
            backbone: Backbone::Resnet34,
            d: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            ffn_dim: 2048,
            level_sizes,
            ..Self::default()
        }
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        doc.check_keys(CONFIG_KEYS)?;
        let base = Self::default();
        let level_sizes = match doc.get("level_sizes") {
            None => base.level_sizes,
            Some(s) => match parse_list("level_sizes", s)?[..] {
                [a, b, c] => (a, b, c),
                _ => return Err(ModelError::InvalidConfig("level_sizes needs 3 entries".into())),
            },
        };
        let tiny_channels = match doc.get("tiny_channels") {
            None => base.tiny_channels,
            Some(s) => parse_list("tiny_channels", s)?
                .try_into()
                .map_err(|_| ModelError::InvalidConfig("tiny_channels needs 4 entries".into()))?,
        };
        let cfg = Self {
            image_size: doc.parse_or("image_size", base.image_size)?,
            backbone: doc.get("backbone").map(str::parse).transpose()?.unwrap_or(base.backbone),
            d: doc.parse_or("d", base.d)?,
            encoder_layers: doc.parse_or("encoder_layers", base.encoder_layers)?,
            decoder_layers: doc.parse_or("decoder_layers", base.decoder_layers)?,
            heads: doc.parse_or("heads", base.heads)?,
            ffn_dim: doc.parse_or("ffn_dim", base.ffn_dim)?,
            variant: doc.get("variant").map(str::parse).transpose()?.unwrap_or(base.variant),
            modality: doc.get("modality").map(str::parse).transpose()?.unwrap_or(base.modality),
            fusion: doc.get("fusion").map(str::parse).transpose()?.unwrap_or(base.fusion),
            level_sizes,
            tiny_channels,
            gamma: doc.parse_or("gamma", base.gamma)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("image_size", self.image_size);
        d.set("backbone", self.backbone);
        d.set("d", self.d);
        d.set("encoder_layers", self.encoder_layers);
        d.set("decoder_layers", self.decoder_layers);
        d.set("heads", self.heads);
        d.set("ffn_dim", self.ffn_dim);
        d.set("variant", self.variant);
        d.set("modality", self.modality);
        d.set("fusion", self.fusion);
        let (a, b, c) = self.level_sizes;
        d.set("level_sizes", format!("{a},{b},{c}"));
        let t = self.tiny_channels;
        d.set("tiny_channels", format!("{},{},{},{}", t[0], t[1], t[2], t[3]));
        d.set("gamma", self.gamma);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.decoder_layers == 0 {
            return bad("at least one decoder layer is required".into());
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if self.level_sizes.0 != 2 || self.level_sizes.1 == 0 || self.level_sizes.2 == 0 {
            return bad(format!("level_sizes {:?} must be (2, >0, >0)", self.level_sizes));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if self.tiny_channels.contains(&0) {
            return bad("tiny_channels must be positive".into());
        }
        if self.fusion == Fusion::Channel && self.modality != Modality::Multimodal {
            return bad("fusion = channel requires modality = multimodal".into());
        }
        if self.grid_size() == 0 {
            return bad(format!("image_size {} too small for the backbone", self.image_size));
        }
        Ok(())
    }

    /// Side of the square feature grid the backbone produces.
    pub fn grid_size(&self) -> usize {
        match self.backbone {
            Backbone::TinyCnn => {
                let mut s = self.image_size;
                for _ in 0..4 {
                    if s == 0 {
                        return 0;
                    }
                    s = STAGE.out_size(s);
                }
                s
            }
            Backbone::Resnet34 => {
                if self.image_size < 32 {
                    0
                } else {
                    RESNET_GRID
                }
            }
        }
    }

    /// Memory length per image.
    pub fn memory_len(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn query_count(&self) -> usize {
        match self.variant {
            Variant::Singular => 1,
            _ => 3,
        }
    }

    pub fn views(&self) -> Vec<View> {
        crate::dataset::views_of(self.modality).to_vec()
    }

    pub fn has_level12_heads(&self) -> bool {
        self.variant != Variant::Singular
    }

    pub fn has_bank(&self) -> bool {
        self.variant == Variant::HierarchicalMpl
    }
}

const STAGE: Window = Window {
    kernel: 3,
    stride: 2,
    padding: 1,
};
const RESNET_GRID: usize = 7;
const RESNET_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Named parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

/// Rounds every entry to the nearest `f32`, so checkpoints are lossless.
pub fn round_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|v| v as f32 as f64);
}

impl ModelState {
    pub fn from_parts(config: ModelConfig, params: Vec<(String, Matrix)>) -> Self {
        let mut names = Vec::with_capacity(params.len());
        let mut values = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (i, (n, v)) in params.into_iter().enumerate() {
            index.insert(n.clone(), i);
            names.push(n);
            values.push(v);
        }
        Self {
            config,
            names,
            values,
            index,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Prototype bank (`|ID L3| x d`) for the MPL variant.
    pub fn prototypes(&self) -> Option<&Matrix> {
        self.get("prototypes")
    }

    /// All parameters as little-endian `f32` bytes in registration order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * 4);
        for v in &self.values {
            for x in v.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<(String, Matrix)>,
}

impl Init {
    fn push(&mut self, name: String, mut m: Matrix) {
        round_to_f32(&mut m);
        self.params.push((name, m));
    }

    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Matrix::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-a..a));
        self.push(name, m);
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) {
        let n = Normal::new(0.0, std).expect("positive std");
        let m = Matrix::from_shape_fn((rows, cols), |_| n.sample(&mut self.rng));
        self.push(name, m);
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) {
        self.push(name, Matrix::zeros((rows, cols)));
    }

    fn ones(&mut self, name: String, cols: usize) {
        self.push(name, Matrix::ones((1, cols)));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.xavier(format!("{name}.w"), fan_in, fan_out);
        self.zeros(format!("{name}.b"), 1, fan_out);
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, gain: f64) {
        let std = gain * (2.0 / (k * k * cin) as f64).sqrt();
        self.normal(format!("{name}.w"), k * k * cin, cout, std);
        self.zeros(format!("{name}.b"), 1, cout);
    }

    fn layer_norm(&mut self, name: &str, d: usize) {
        self.ones(format!("{name}.g"), d);
        self.zeros(format!("{name}.b"), 1, d);
    }

    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), d, hidden);
        self.linear(&format!("{name}.fc2"), hidden, d);
    }
}

fn init_backbone(init: &mut Init, cfg: &ModelConfig, view: View) {
    let p = format!("backbone.{}", view.key());
    let out_channels = match cfg.backbone {
        Backbone::TinyCnn => {
            let mut cin = 3;
            for (s, &cout) in cfg.tiny_channels.iter().enumerate() {
                init.conv(&format!("{p}.stage{s}"), 3, cin, cout, 1.0);
                cin = cout;
            }
            cin
        }
        Backbone::Resnet34 => {
            init.conv(&format!("{p}.stem"), 7, 3, 64, 1.0);
            let mut cin = 64;
            for (l, (&blocks, &width)) in RESNET_BLOCKS.iter().zip(&RESNET_WIDTHS).enumerate() {
                for b in 0..blocks {
                    let name = format!("{p}.layer{l}.block{b}");
                    init.conv(&format!("{name}.conv1"), 3, cin, width, 1.0);
                    init.conv(&format!("{name}.conv2"), 3, width, width, 0.1);
                    if b == 0 && (l > 0 || cin != width) {
                        init.conv(&format!("{name}.down"), 1, cin, width, 1.0);
                    }
                    cin = width;
                }
            }
            cin
        }
    };
    init.linear(&format!("proj.{}", view.key()), out_channels, cfg.d);
}

/// Deterministic initialisation from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let cfg = config;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
    };
    for view in cfg.views() {
        init_backbone(&mut init, cfg, view);
    }
    if cfg.fusion == Fusion::Channel {
        init.linear("fusion.proj", 2 * cfg.d, cfg.d);
    }
    for l in 0..cfg.encoder_layers {
        init.attention(&format!("encoder.{l}.attn"), cfg.d);
        init.layer_norm(&format!("encoder.{l}.ln1"), cfg.d);
        init.ffn(&format!("encoder.{l}.ffn"), cfg.d, cfg.ffn_dim);
        init.layer_norm(&format!("encoder.{l}.ln2"), cfg.d);
    }
    init.normal("decoder.queries".into(), cfg.query_count(), cfg.d, 1.0);
    for l in 0..cfg.decoder_layers {
        init.attention(&format!("decoder.{l}.self"), cfg.d);
        init.layer_norm(&format!("decoder.{l}.ln1"), cfg.d);
        init.attention(&format!("decoder.{l}.cross"), cfg.d);
        init.layer_norm(&format!("decoder.{l}.ln2"), cfg.d);
        init.ffn(&format!("decoder.{l}.ffn"), cfg.d, cfg.ffn_dim);
        init.layer_norm(&format!("decoder.{l}.ln3"), cfg.d);
    }
    init.layer_norm("decoder.norm", cfg.d);
    let (n1, n2, n3) = cfg.level_sizes;
    if cfg.has_level12_heads() {
        init.linear("head.l1", cfg.d, n1);
        init.linear("head.l2", cfg.d, n2);
    }
    if cfg.has_bank() {
        init.normal("prototypes".into(), n3, cfg.d, 1.0);
    } else {
        init.linear("head.l3", cfg.d, n3);
    }
    Ok(ModelState::from_parts(config.clone(), init.params))
}

/// Parameters placed on a graph: leaves when training, constants otherwise.
pub struct Bound<'m> {
    model: &'m ModelState,
    vars: Vec<Var>,
}

impl<'m> Bound<'m> {
    pub fn new(g: &mut Graph, model: &'m ModelState, trainable: bool) -> Self {
        let vars = model
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Self { model, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, name: &str) -> Var {
        let i = self
            .model
            .position(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"));
        self.vars[i]
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        g.linear(x, self.v(&format!("{name}.w")), self.v(&format!("{name}.b")))
    }

    fn layer_norm(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        g.layer_norm(x, self.v(&format!("{name}.g")), self.v(&format!("{name}.b")), LN_EPS)
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, geom: ImageGeom, window: Window, cout: usize) -> (Var, ImageGeom) {
        let cols = g.im2col(x, geom, window);
        let y = self.linear(g, name, cols);
        let out = ImageGeom {
            batch: geom.batch,
            height: window.out_size(geom.height),
            width: window.out_size(geom.width),
            channels: cout,
        };
        (y, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(&self, g: &mut Graph, name: &str, q_in: Var, k_in: Var, v_in: Var, shape: AttnShape) -> Var {
        let q = self.linear(g, &format!("{name}.q"), q_in);
        let k = self.linear(g, &format!("{name}.k"), k_in);
        let v = self.linear(g, &format!("{name}.v"), v_in);
        let a = g.attention(q, k, v, shape);
        self.linear(g, &format!("{name}.o"), a)
    }

    fn ffn(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let h = self.linear(g, &format!("{name}.fc1"), x);
        let h = g.relu(h);
        self.linear(g, &format!("{name}.fc2"), h)
    }
}

/// Fixed 2-D sine positional encoding for an `s x s` grid, `[s*s, d]`.
/// The first `d/2` channels encode the row, the rest the column; each half
/// interleaves sine and cosine at geometrically spaced frequencies.
pub fn positional_encoding(s: usize, d: usize) -> Matrix {
    let half = d / 2;
    let mut pe = Matrix::zeros((s * s, d));
    let scale = 2.0 * std::f64::consts::PI;
    for y in 0..s {
        for x in 0..s {
            let row = y * s + x;
            for (offset, pos) in [(0, y), (half, x)] {
                let p = (pos as f64 + 1.0) / (s as f64 + 1e-6) * scale;
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                    pe[[row, offset + i]] = if i % 2 == 0 { (p / freq).sin() } else { (p / freq).cos() };
                }
            }
        }
    }
    pe
}

fn tile_rows(m: &Matrix, times: usize) -> Matrix {
    let (r, c) = m.dim();
    Matrix::from_shape_fn((r * times, c), |(i, j)| m[[i % r, j]])
}

/// Stacks images into a `[B*H*W, 3]` channels-last matrix.
pub fn images_to_matrix(images: &[&Image]) -> Matrix {
    let size = images[0].size;
    let mut m = Matrix::zeros((images.len() * size * size, 3));
    let dst = m.as_slice_mut().expect("standard layout");
    let mut i = 0;
    for img in images {
        for v in &img.data {
            dst[i] = *v as f64;
            i += 1;
        }
    }
    m
}

fn backbone(g: &mut Graph, b: &Bound, cfg: &ModelConfig, view: View, x: Var, batch: usize) -> Var {
    let p = format!("backbone.{}", view.key());
    let mut geom = ImageGeom {
        batch,
        height: cfg.image_size,
        width: cfg.image_size,
        channels: 3,
    };
    let mut h = x;
    match cfg.backbone {
        Backbone::TinyCnn => {
            for (s, &cout) in cfg.tiny_channels.iter().enumerate() {
                let (y, gm) = b.conv(g, &format!("{p}.stage{s}"), h, geom, STAGE, cout);
                h = g.relu(y);
                geom = gm;
            }
        }
        Backbone::Resnet34 => {
            let stem = Window { kernel: 7, stride: 2, padding: 3 };
            let (y, gm) = b.conv(g, &format!("{p}.stem"), h, geom, stem, 64);
            h = g.relu(y);
            geom = gm;
            let pool = Window { kernel: 3, stride: 2, padding: 1 };
            h = g.max_pool(h, geom, pool);
            geom = ImageGeom {
                height: pool.out_size(geom.height),
                width: pool.out_size(geom.width),
                ..geom
            };
            for (l, (&blocks, &width)) in RESNET_BLOCKS.iter().zip(&RESNET_WIDTHS).enumerate() {
                for blk in 0..blocks {
                    let name = format!("{p}.layer{l}.block{blk}");
                    let stride = if blk == 0 && l > 0 { 2 } else { 1 };
                    let w3 = Window { kernel: 3, stride, padding: 1 };
                    let (y, g1) = b.conv(g, &format!("{name}.conv1"), h, geom, w3, width);
                    let y = g.relu(y);
                    let (y, g2) = b.conv(g, &format!("{name}.conv2"), y, g1, Window { kernel: 3, stride: 1, padding: 1 }, width);
                    let skip = if b.model.position(&format!("{name}.down.w")).is_some() {
                        b.conv(g, &format!("{name}.down"), h, geom, Window { kernel: 1, stride, padding: 0 }, width).0
                    } else {
                        h
                    };
                    let sum = g.add(y, skip);
                    h = g.relu(sum);
                    geom = g2;
                }
            }
            h = g.avg_pool_to(h, geom, RESNET_GRID);
        }
    }
    b.linear(g, &format!("proj.{}", view.key()), h)
}

fn encoder(g: &mut Graph, b: &Bound, cfg: &ModelConfig, src: Var, pos: Var, batch: usize, len: usize) -> Var {
    let shape = AttnShape {
        batch,
        heads: cfg.heads,
        query_len: len,
        key_len: len,
    };
    let mut x = src;
    for l in 0..cfg.encoder_layers {
        let qk = g.add(x, pos);
        let a = b.attention(g, &format!("encoder.{l}.attn"), qk, qk, x, shape);
        let r = g.add(x, a);
        x = b.layer_norm(g, &format!("encoder.{l}.ln1"), r);
        let f = b.ffn(g, &format!("encoder.{l}.ffn"), x);
        let r = g.add(x, f);
        x = b.layer_norm(g, &format!("encoder.{l}.ln2"), r);
    }
    x
}

fn decoder(g: &mut Graph, b: &Bound, cfg: &ModelConfig, memory: Var, pos: Var, batch: usize, len: usize) -> Var {
    let nq = cfg.query_count();
    let qmap = Rc::new((0..batch * nq).map(|i| (0, i % nq)).collect::<Vec<_>>());
    let query_pos = g.gather_rows(&[b.v("decoder.queries")], qmap);
    let mut t = g.constant(Matrix::zeros((batch * nq, cfg.d)));
    let self_shape = AttnShape {
        batch,
        heads: cfg.heads,
        query_len: nq,
        key_len: nq,
    };
    let cross_shape = AttnShape {
        key_len: len,
        ..self_shape
    };
    let mem_k = g.add(memory, pos);
    for l in 0..cfg.decoder_layers {
        let qk = g.add(t, query_pos);
        let a = b.attention(g, &format!("decoder.{l}.self"), qk, qk, t, self_shape);
        let r = g.add(t, a);
        t = b.layer_norm(g, &format!("decoder.{l}.ln1"), r);
        let q = g.add(t, query_pos);
        let a = b.attention(g, &format!("decoder.{l}.cross"), q, mem_k, memory, cross_shape);
        let r = g.add(t, a);
        t = b.layer_norm(g, &format!("decoder.{l}.ln2"), r);
        let f = b.ffn(g, &format!("decoder.{l}.ffn"), t);
        let r = g.add(t, f);
        t = b.layer_norm(g, &format!("decoder.{l}.ln3"), r);
    }
    b.layer_norm(g, "decoder.norm", t)
}

/// Graph handles produced by a batched forward pass; every matrix has one
/// row per sample.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits_l1: Option<Var>,
    pub logits_l2: Option<Var>,
    /// Level-3 head logits (absent for the MPL variant).
    pub logits_l3: Option<Var>,
    /// Decoder outputs of the level-1 and level-2 queries (absent for singular).
    pub latent_l1: Option<Var>,
    pub latent_l2: Option<Var>,
    pub latent_l3: Var,
    /// Squared distances to every prototype (MPL only), `[B, |L3|]`.
    pub distances: Option<Var>,
    pub prototypes: Option<Var>,
}

/// Batched images for one forward pass, one matrix per consumed view.
pub struct BatchInput {
    pub batch: usize,
    /// `[B*H*W, 3]` per view, in [`ModelConfig::views`] order.
    pub views: Vec<Matrix>,
}

impl BatchInput {
    pub fn from_images(config: &ModelConfig, samples: &[Vec<&Image>]) -> Result<Self> {
        let views = config.views();
        for s in samples {
            if s.len() != views.len() {
                return Err(ModelError::ModalityMismatch(format!(
                    "{} modality expects {} image(s) per sample, got {}",
                    config.modality,
                    views.len(),
                    s.len()
                )));
            }
            for img in s {
                if img.size != config.image_size {
                    return Err(ModelError::ShapeMismatch(format!(
                        "image is {0}x{0}, model expects {1}x{1}",
                        img.size, config.image_size
                    )));
                }
            }
        }
        let mats = (0..views.len())
            .map(|v| images_to_matrix(&samples.iter().map(|s| s[v]).collect::<Vec<_>>()))
            .collect();
        Ok(Self {
            batch: samples.len(),
            views: mats,
        })
    }
}

/// Encodes one view of a batch into `[B*S, d]` memory plus positional encodings.
fn encode_view(g: &mut Graph, b: &Bound, cfg: &ModelConfig, view: View, x: &Matrix, batch: usize) -> (Var, Var) {
    let xin = g.constant(x.clone());
    let feat = backbone(g, b, cfg, view, xin, batch);
    let s = cfg.grid_size();
    let pos = g.constant(tile_rows(&positional_encoding(s, cfg.d), batch));
    let mem = encoder(g, b, cfg, feat, pos, batch, s * s);
    (mem, pos)
}

/// Interleaves two `[B*S, d]` memories into `[B*2S, d]` (clinical rows first per sample).
pub fn sequence_fuse(g: &mut Graph, a: Var, b: Var, batch: usize, len: usize) -> Var {
    let mut map = Vec::with_capacity(batch * 2 * len);
    for i in 0..batch {
        for src in 0..2 {
            for s in 0..len {
                map.push((src, i * len + s));
            }
        }
    }
    g.gather_rows(&[a, b], Rc::new(map))
}

pub fn forward_vars(g: &mut Graph, b: &Bound, input: &BatchInput) -> Result<ForwardVars> {
    let cfg = &b.model.config;
    let views = cfg.views();
    if input.views.len() != views.len() {
        return Err(ModelError::ModalityMismatch(format!(
            "{} modality expects {} view(s), got {}",
            cfg.modality,
            views.len(),
            input.views.len()
        )));
    }
    let batch = input.batch;
    let len = cfg.memory_len();
    let encoded: Vec<(Var, Var)> = views
        .iter()
        .zip(&input.views)
        .map(|(v, x)| encode_view(g, b, cfg, *v, x, batch))
        .collect();
    let (memory, pos, mem_len) = if encoded.len() == 1 {
        (encoded[0].0, encoded[0].1, len)
    } else {
        match cfg.fusion {
            Fusion::Sequence => {
                let m = sequence_fuse(g, encoded[0].0, encoded[1].0, batch, len);
                let p = sequence_fuse(g, encoded[0].1, encoded[1].1, batch, len);
                (m, p, 2 * len)
            }
            Fusion::Channel => {
                let cat = g.concat_cols(encoded[0].0, encoded[1].0);
                (b.linear(g, "fusion.proj", cat), encoded[0].1, len)
            }
        }
    };
    let out = decoder(g, b, cfg, memory, pos, batch, mem_len);
    let nq = cfg.query_count();
    let rows = |g: &mut Graph, q: usize| g.gather_rows(&[out], Rc::new((0..batch).map(|i| (0, i * nq + q)).collect()));
    let mut fv = if cfg.has_level12_heads() {
        let r1 = rows(g, 0);
        let r2 = rows(g, 1);
        let latent = rows(g, 2);
        ForwardVars {
            logits_l1: Some(b.linear(g, "head.l1", r1)),
            logits_l2: Some(b.linear(g, "head.l2", r2)),
            logits_l3: None,
            latent_l1: Some(r1),
            latent_l2: Some(r2),
            latent_l3: latent,
            distances: None,
            prototypes: None,
        }
    } else {
        let latent = rows(g, 0);
        ForwardVars {
            logits_l1: None,
            logits_l2: None,
            logits_l3: None,
            latent_l1: None,
            latent_l2: None,
            latent_l3: latent,
            distances: None,
            prototypes: None,
        }
    };
    if cfg.has_bank() {
        let protos = b.v("prototypes");
        fv.distances = Some(g.sq_dist(fv.latent_l3, protos));
        fv.prototypes = Some(protos);
    } else {
        fv.logits_l3 = Some(b.linear(g, "head.l3", fv.latent_l3));
    }
    Ok(fv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalOutput {
    /// Absent for the singular variant.
    pub logits_l1: Option<Vec<f64>>,
    pub logits_l2: Option<Vec<f64>>,
    /// Head logits, or `-gamma * distance` for the MPL variant.
    pub logits_l3: Vec<f64>,
    pub latent_l1: Option<Vec<f64>>,
    pub latent_l2: Option<Vec<f64>>,
    pub latent_l3: Vec<f64>,
    /// Squared prototype distances (MPL only).
    pub distances: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEmbeddings {
    /// `S x d`.
    pub sequence: Matrix,
}

/// Encodes one image with the backbone of `view` (or the model's first view).
pub fn encode(model: &ModelState, image: &Image, view: Option<View>) -> Result<MemoryEmbeddings> {
    let cfg = &model.config;
    let view = view.unwrap_or(cfg.views()[0]);
    if !cfg.views().contains(&view) {
        return Err(ModelError::ModalityMismatch(format!("model has no {} backbone", view.key())));
    }
    let input = BatchInput::from_images(cfg, &[vec![image; cfg.views().len()]])?;
    let mut g = Graph::new();
    let b = Bound::new(&mut g, model, false);
    let idx = cfg.views().iter().position(|v| *v == view).expect("checked");
    let (mem, _) = encode_view(&mut g, &b, cfg, view, &input.views[idx], 1);
    Ok(MemoryEmbeddings {
        sequence: g.value(mem).clone(),
    })
}

/// Sequence concatenation of two memories.
pub fn fuse_memories(clinical: &MemoryEmbeddings, dermoscopic: &MemoryEmbeddings) -> Result<MemoryEmbeddings> {
    let (a, b) = (&clinical.sequence, &dermoscopic.sequence);
    if a.ncols() != b.ncols() {
        return Err(ModelError::DimMismatch(format!("memory widths {} and {}", a.ncols(), b.ncols())));
    }
    let seq = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("equal widths");
    Ok(MemoryEmbeddings { sequence: seq })
}

/// Batched inference. Each sample holds one image, or two (clinical, dermoscopic)
/// for the multimodal modality.
pub fn forward_batch(model: &ModelState, samples: &[Vec<&Image>]) -> Result<Vec<HierarchicalOutput>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let input = BatchInput::from_images(&model.config, samples)?;
    let mut g = Graph::new();
    let b = Bound::new(&mut g, model, false);
    let fv = forward_vars(&mut g, &b, &input)?;
    Ok(collect_outputs(&g, &fv, model.config.gamma, input.batch))
}

pub fn collect_outputs(g: &Graph, fv: &ForwardVars, gamma: f64, batch: usize) -> Vec<HierarchicalOutput> {
    let row = |v: Var, i: usize| g.value(v).row(i).to_vec();
    (0..batch)
        .map(|i| {
            let distances = fv.distances.map(|d| row(d, i));
            let logits_l3 = match (&distances, fv.logits_l3) {
                (Some(d), _) => d.iter().map(|x| -gamma * x).collect(),
                (None, Some(l)) => row(l, i),
                (None, None) => unreachable!("level-3 output missing"),
            };
            HierarchicalOutput {
                logits_l1: fv.logits_l1.map(|v| row(v, i)),
                logits_l2: fv.logits_l2.map(|v| row(v, i)),
                logits_l3,
                latent_l1: fv.latent_l1.map(|v| row(v, i)),
                latent_l2: fv.latent_l2.map(|v| row(v, i)),
                latent_l3: row(fv.latent_l3, i),
                distances,
            }
        })
        .collect()
}

pub fn forward(model: &ModelState, images: &[&Image]) -> Result<HierarchicalOutput> {
    Ok(forward_batch(model, &[images.to_vec()])?.remove(0))
}

/// Squared Euclidean distance from `latent` to every prototype row.
pub fn prototype_distances(latent: &[f64], bank: &Matrix) -> Result<Vec<f64>> {
    if latent.len() != bank.ncols() {
        return Err(ModelError::DimMismatch(format!(
            "latent has {} dims, prototypes {}",
            latent.len(),
            bank.ncols()
        )));
    }
    Ok(bank
        .rows()
        .into_iter()
        .map(|p| p.iter().zip(latent).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level3Confidence {
    pub confidence: f64,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

/// Level-3 confidence: softmax of the head logits, or for the MPL variant
/// probabilities proportional to `exp(-gamma * distance)` with prediction at
/// the nearest prototype.
pub fn level3_confidence(
    output: &HierarchicalOutput,
    bank: Option<&Matrix>,
    variant: Variant,
    gamma: f64,
) -> Result<Level3Confidence> {
    let probabilities = match variant {
        Variant::HierarchicalMpl => {
            let bank = bank.ok_or(ModelError::MissingBank)?;
            let d = prototype_distances(&output.latent_l3, bank)?;
            let logits: Vec<f64> = d.iter().map(|x| -gamma * x).collect();
            softmax(&logits)
        }
        _ => softmax(&output.logits_l3),
    };
    let predicted = argmax(&probabilities);
    Ok(Level3Confidence {
        confidence: probabilities[predicted],
        predicted,
        probabilities,
    })
}

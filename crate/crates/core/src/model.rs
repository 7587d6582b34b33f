//! The three networks: N additive sub-generators, the style mapping network and
//! the class-conditional discriminator.
//!
//! Parameters live in a flat [`ParamStore`]; the network structs only hold
//! indices into it. To run a network, bind the store into a [`Graph`] with
//! [`Binding`] and call the `*_graph` methods, or use the tensor-level helpers
//! which build a throwaway graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{cast, Element, Tensor};

pub const NUM_CLASSES: usize = 2;
pub const LRELU_SLOPE: f64 = 0.2;
const MAPPING_SHARED_LAYERS: usize = 4;
const DISC_STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub num_branches: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub style_dim: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub depth: usize,
    pub res_blocks: usize,
    pub share_encoder: bool,
    pub mapping_width: usize,
    pub disc_width: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_branches: 5,
            image_size: 64,
            in_channels: 1,
            style_dim: 16,
            latent_dim: 8,
            base_width: 8,
            depth: 2,
            res_blocks: 2,
            share_encoder: false,
            mapping_width: 128,
            disc_width: 8,
            num_classes: NUM_CLASSES,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("net config: {m}")));
        if self.num_branches == 0 {
            return bad("num_branches must be at least 1".into());
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes is fixed at {NUM_CLASSES}"));
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("style_dim", self.style_dim),
            ("latent_dim", self.latent_dim),
            ("base_width", self.base_width),
            ("depth", self.depth),
            ("mapping_width", self.mapping_width),
            ("disc_width", self.disc_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "image_size {} is not divisible by 2^depth = {}",
                self.image_size,
                1 << self.depth
            ));
        }
        if !self.image_size.is_multiple_of(1 << DISC_STAGES) {
            return bad(format!(
                "image_size {} is not divisible by the discriminator stride {}",
                self.image_size,
                1 << DISC_STAGES
            ));
        }
        Ok(())
    }

    /// Smallest base width whose generator parameter count is within `tol` of `target`.
    pub fn width_matching(&self, target: usize, tol: f64) -> Option<usize> {
        (1..=256).find(|&w| {
            let cfg = NetConfig {
                base_width: w,
                ..self.clone()
            };
            let n = generator_param_count(&cfg) as f64;
            (n - target as f64).abs() / target as f64 <= tol
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Generator,
    Mapping,
    Discriminator,
}

impl Group {
    pub fn prefix(self) -> &'static str {
        match self {
            Group::Generator => "gen",
            Group::Mapping => "map",
            Group::Discriminator => "disc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "gen" => Some(Group::Generator),
            "map" => Some(Group::Mapping),
            "disc" => Some(Group::Discriminator),
            _ => None,
        }
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    groups: Vec<Group>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        let group = Group::from_name(&name).expect("parameter names start with a group prefix");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn group(&self, id: usize) -> Group {
        self.groups[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.groups[i] == group)
    }

    pub fn count_in(&self, group: Group) -> usize {
        self.ids_in(group).map(|i| self.tensors[i].numel()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and little-endian values of the selected groups.
    pub fn checksum(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for i in 0..self.len() {
            if !groups.contains(&self.groups[i]) {
                continue;
            }
            h.update(self.names[i].as_bytes());
            for d in self.tensors[i].shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in self.tensors[i].data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinearP {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AdaInP {
    fc: LinearP,
    channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResBlockP {
    norm1: AdaInP,
    conv1: ConvP,
    norm2: AdaInP,
    conv2: ConvP,
}

#[derive(Debug, Clone)]
struct EncoderP {
    stages: Vec<ConvP>,
}

#[derive(Debug, Clone)]
struct UpStageP {
    conv: ConvP,
    norm: AdaInP,
}

#[derive(Debug, Clone)]
struct DecoderP {
    res: Vec<ResBlockP>,
    /// Coarsest stage first.
    ups: Vec<UpStageP>,
    out: ConvP,
}

#[derive(Debug, Clone)]
struct MappingP {
    shared: Vec<LinearP>,
    heads: Vec<Vec<LinearP>>,
}

#[derive(Debug, Clone)]
struct DiscP {
    convs: Vec<ConvP>,
    fc: LinearP,
}

struct Builder<'a, T: Element> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.store.push(name, Tensor::from_vec(shape, data).unwrap())
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> ConvP {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = self.uniform(format!("{name}.weight"), &[cout, cin, k, k], bound);
        let b = bias.then(|| self.uniform(format!("{name}.bias"), &[cout], bound));
        let pad = match (k, stride) {
            (1, _) => 0,
            (3, 1) => 1,
            (4, 2) => 1,
            _ => unreachable!("unsupported conv geometry"),
        };
        ConvP { w, b, stride, pad }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, zero_bias: bool) -> LinearP {
        let bound = 1.0 / (din as f64).sqrt();
        let w = self.uniform(format!("{name}.weight"), &[dout, din], bound);
        let b = if zero_bias {
            self.zeros(format!("{name}.bias"), &[dout])
        } else {
            self.uniform(format!("{name}.bias"), &[dout], bound)
        };
        LinearP { w, b }
    }

    fn adain(&mut self, name: &str, style_dim: usize, channels: usize) -> AdaInP {
        AdaInP {
            fc: self.linear(&format!("{name}.fc"), style_dim, 2 * channels, true),
            channels,
        }
    }

    fn encoder(&mut self, prefix: &str, cfg: &NetConfig) -> EncoderP {
        let w = cfg.base_width;
        let mut stages = vec![self.conv(&format!("{prefix}.enc.0"), cfg.in_channels, w, 3, 1, true)];
        for k in 1..=cfg.depth {
            let cin = w << (k - 1);
            stages.push(self.conv(&format!("{prefix}.enc.{k}"), cin, 2 * cin, 3, 1, true));
        }
        EncoderP { stages }
    }

    fn decoder(&mut self, prefix: &str, cfg: &NetConfig) -> DecoderP {
        let w = cfg.base_width;
        let top = w << cfg.depth;
        let res = (0..cfg.res_blocks)
            .map(|r| {
                let p = format!("{prefix}.res.{r}");
                ResBlockP {
                    norm1: self.adain(&format!("{p}.norm1"), cfg.style_dim, top),
                    conv1: self.conv(&format!("{p}.conv1"), top, top, 3, 1, false),
                    norm2: self.adain(&format!("{p}.norm2"), cfg.style_dim, top),
                    conv2: self.conv(&format!("{p}.conv2"), top, top, 3, 1, true),
                }
            })
            .collect();
        let ups = (1..=cfg.depth)
            .rev()
            .map(|k| {
                let cin = (w << k) + (w << (k - 1));
                let cout = w << (k - 1);
                let p = format!("{prefix}.up.{k}");
                UpStageP {
                    conv: self.conv(&format!("{p}.conv"), cin, cout, 3, 1, false),
                    norm: self.adain(&format!("{p}.norm"), cfg.style_dim, cout),
                }
            })
            .collect();
        let out = self.conv(&format!("{prefix}.out"), w, cfg.in_channels, 1, 1, true);
        DecoderP { res, ups, out }
    }
}

/// All trainable state of the method: generators, mapping network, discriminator.
#[derive(Debug, Clone)]
pub struct ModelSet<T: Element> {
    cfg: NetConfig,
    params: ParamStore<T>,
    encoders: Vec<EncoderP>,
    decoders: Vec<DecoderP>,
    mapping: MappingP,
    disc: DiscP,
}

/// Deterministic initialisation from `seed`.
pub fn init_models<T: Element>(cfg: &NetConfig, seed: u64) -> Result<ModelSet<T>> {
    cfg.validate()?;
    let mut params = ParamStore::default();
    let mut b = Builder {
        store: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let n_enc = if cfg.share_encoder { 1 } else { cfg.num_branches };
    let encoders = (0..n_enc)
        .map(|i| {
            let prefix = if cfg.share_encoder {
                "gen.shared".to_string()
            } else {
                format!("gen.{i}")
            };
            b.encoder(&prefix, cfg)
        })
        .collect();
    let decoders = (0..cfg.num_branches)
        .map(|i| b.decoder(&format!("gen.{i}"), cfg))
        .collect();

    let hw = cfg.mapping_width;
    let shared = (0..MAPPING_SHARED_LAYERS)
        .map(|l| {
            let din = if l == 0 { cfg.latent_dim } else { hw };
            b.linear(&format!("map.shared.{l}"), din, hw, false)
        })
        .collect();
    let heads = (0..cfg.num_classes)
        .map(|c| {
            vec![
                b.linear(&format!("map.head.{c}.0"), hw, hw, false),
                b.linear(&format!("map.head.{c}.1"), hw, cfg.style_dim, false),
            ]
        })
        .collect();
    let mapping = MappingP { shared, heads };

    let dw = cfg.disc_width;
    let mut convs = vec![b.conv("disc.conv.0", cfg.in_channels, dw, 3, 1, true)];
    for k in 1..=DISC_STAGES {
        let cin = dw << (k - 1);
        convs.push(b.conv(&format!("disc.conv.{k}"), cin, 2 * cin, 4, 2, true));
    }
    let fc = b.linear("disc.fc", dw << DISC_STAGES, cfg.num_classes, false);
    let disc = DiscP { convs, fc };

    Ok(ModelSet {
        cfg: cfg.clone(),
        params,
        encoders,
        decoders,
        mapping,
        disc,
    })
}

/// Number of generator parameters a configuration would have.
pub fn generator_param_count(cfg: &NetConfig) -> usize {
    let w = cfg.base_width;
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cout * cin * k * k + usize::from(bias) * cout;
    let adain = |c: usize| cfg.style_dim * 2 * c + 2 * c;
    let mut enc = conv(cfg.in_channels, w, 3, true);
    for k in 1..=cfg.depth {
        enc += conv(w << (k - 1), w << k, 3, true);
    }
    let top = w << cfg.depth;
    let mut dec = cfg.res_blocks * (2 * adain(top) + conv(top, top, 3, false) + conv(top, top, 3, true));
    for k in 1..=cfg.depth {
        let cout = w << (k - 1);
        dec += conv((w << k) + cout, cout, 3, false) + adain(cout);
    }
    dec += conv(w, cfg.in_channels, 1, true);
    let n_enc = if cfg.share_encoder { 1 } else { cfg.num_branches };
    n_enc * enc + cfg.num_branches * dec
}

/// Graph variables for the parameters of a [`ModelSet`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new<T: Element>(models: &ModelSet<T>) -> Self {
        Self {
            vars: vec![None; models.params.len()],
        }
    }

    /// Binds every parameter of `group` into `g`.
    pub fn bind<T: Element>(&mut self, g: &mut Graph<T>, models: &ModelSet<T>, group: Group, trainable: bool) {
        for id in models.params.ids_in(group) {
            self.vars[id] = Some(g.leaf(models.params.tensor(id).clone(), trainable));
        }
    }

    pub fn all<T: Element>(g: &mut Graph<T>, models: &ModelSet<T>, trainable: bool) -> Self {
        let mut b = Self::new(models);
        for group in [Group::Generator, Group::Mapping, Group::Discriminator] {
            b.bind(g, models, group, trainable);
        }
        b
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id].expect("parameter used before being bound")
    }

    pub fn get(&self, id: usize) -> Option<Var> {
        self.vars[id]
    }
}

fn lrelu<T: Element>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, cast(LRELU_SLOPE))
}

fn conv<T: Element>(g: &mut Graph<T>, b: &Binding, p: &ConvP, x: Var) -> Var {
    g.conv2d(x, b.var(p.w), p.b.map(|i| b.var(i)), p.stride, p.pad)
}

fn linear<T: Element>(g: &mut Graph<T>, b: &Binding, p: &LinearP, x: Var) -> Var {
    g.linear(x, b.var(p.w), Some(b.var(p.b)))
}

fn adain<T: Element>(g: &mut Graph<T>, b: &Binding, p: &AdaInP, x: Var, s: Var) -> Var {
    let h = linear(g, b, &p.fc, s);
    let gamma = g.narrow(h, 0, p.channels);
    let beta = g.narrow(h, p.channels, p.channels);
    let n = g.instance_norm(x);
    g.modulate(n, gamma, beta)
}

/// Encoder features of one sub-generator, finest first.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    features: Vec<Vec<Var>>,
}

impl<T: Element> ModelSet<T> {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_branches(&self) -> usize {
        self.cfg.num_branches
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn generator_parameter_count(&self) -> usize {
        self.params.count_in(Group::Generator)
    }

    /// Number of independent sub-generator encoders (1 when shared).
    pub fn encoder_count(&self) -> usize {
        self.encoders.len()
    }

    /// Replaces all parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (id, (name, t)) in named.into_iter().enumerate() {
            if name != self.params.names[id] || t.shape() != self.params.tensors[id].shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {id}: checkpoint has {name} {:?}, model expects {} {:?}",
                    t.shape(),
                    self.params.names[id],
                    self.params.tensors[id].shape()
                )));
            }
            self.params.tensors[id] = t;
        }
        Ok(())
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.cfg;
        match *shape {
            [n, ch, h, w] if ch == c.in_channels && h == c.image_size && w == c.image_size && n > 0 => Ok(n),
            _ => Err(Error::shape(format!(
                "expected images of shape (B, {}, {}, {}), got {shape:?}",
                c.in_channels, c.image_size, c.image_size
            ))),
        }
    }

    fn check_labels(&self, n: usize, y: &[usize]) -> Result<()> {
        if y.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", y.len())));
        }
        if let Some(bad) = y.iter().find(|&&c| c >= self.cfg.num_classes) {
            return Err(Error::shape(format!("class label {bad} out of range")));
        }
        Ok(())
    }

    /// Style vectors (B, style_dim) from latents z (B, latent_dim) and classes y.
    pub fn style_graph(&self, g: &mut Graph<T>, b: &Binding, z: Var, y: &[usize]) -> Var {
        let mut h = z;
        for layer in &self.mapping.shared {
            h = linear(g, b, layer, h);
            h = g.relu(h);
        }
        let mut outs = Vec::with_capacity(self.mapping.heads.len());
        for head in &self.mapping.heads {
            let mut o = linear(g, b, &head[0], h);
            o = g.relu(o);
            outs.push(linear(g, b, &head[1], o));
        }
        g.select_rows(&outs, y)
    }

    /// Runs every encoder once; the features serve any number of style passes.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> EncodedInput {
        let features = self
            .encoders
            .iter()
            .map(|enc| {
                let mut feats = Vec::with_capacity(enc.stages.len());
                let mut h = x;
                for (k, stage) in enc.stages.iter().enumerate() {
                    if k > 0 {
                        h = g.avg_pool2(h);
                    }
                    h = conv(g, b, stage, h);
                    h = lrelu(g, h);
                    feats.push(h);
                }
                feats
            })
            .collect();
        EncodedInput { features }
    }

    /// ψ₁…ψ_N for one style (B, style_dim).
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Binding, enc: &EncodedInput, s: Var) -> Vec<Var> {
        self.decoders
            .iter()
            .enumerate()
            .map(|(i, dec)| {
                let feats = &enc.features[if self.cfg.share_encoder { 0 } else { i }];
                let mut h = *feats.last().unwrap();
                for blk in &dec.res {
                    let mut r = adain(g, b, &blk.norm1, h, s);
                    r = lrelu(g, r);
                    r = conv(g, b, &blk.conv1, r);
                    r = adain(g, b, &blk.norm2, r, s);
                    r = lrelu(g, r);
                    r = conv(g, b, &blk.conv2, r);
                    h = g.add(h, r);
                }
                for (j, up) in dec.ups.iter().enumerate() {
                    let skip = feats[feats.len() - 2 - j];
                    let u = g.upsample2(h);
                    let cat = g.concat_channels(&[u, skip]);
                    let c = conv(g, b, &up.conv, cat);
                    let n = adain(g, b, &up.norm, c, s);
                    h = lrelu(g, n);
                }
                let o = conv(g, b, &dec.out, h);
                g.tanh(o)
            })
            .collect()
    }

    pub fn branches_graph(&self, g: &mut Graph<T>, b: &Binding, x: Var, s: Var) -> Vec<Var> {
        let enc = self.encode_graph(g, b, x);
        self.decode_graph(g, b, &enc, s)
    }

    /// Logits (B) of the heads selected by y.
    pub fn discriminate_graph(&self, g: &mut Graph<T>, b: &Binding, x: Var, y: &[usize]) -> Var {
        let mut h = x;
        for c in &self.disc.convs {
            h = conv(g, b, c, h);
            h = lrelu(g, h);
        }
        let pooled = g.mean_spatial(h);
        let logits = linear(g, b, &self.disc.fc, pooled);
        g.gather(logits, y)
    }

    /// Logits plus their directional derivative along `v` with respect to the input.
    ///
    /// The tangent is built from ordinary differentiable ops, so it can itself be
    /// differentiated with respect to the parameters. Activation slopes are
    /// treated as constants (their derivative is zero almost everywhere).
    pub fn discriminate_with_tangent(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        v: Var,
        y: &[usize],
    ) -> (Var, Var) {
        let slope: T = cast(LRELU_SLOPE);
        let (mut h, mut t) = (x, v);
        for c in &self.disc.convs {
            let pre = conv(g, b, c, h);
            let tc = g.conv2d(t, b.var(c.w), None, c.stride, c.pad);
            let mask = g.value(pre).map(|p| if p > T::zero() { T::one() } else { slope });
            let mask = g.constant(mask);
            t = g.mul(tc, mask);
            h = lrelu(g, pre);
        }
        let pooled = g.mean_spatial(h);
        let logits = linear(g, b, &self.disc.fc, pooled);
        let tp = g.mean_spatial(t);
        let tl = g.linear(tp, b.var(self.disc.fc.w), None);
        (g.gather(logits, y), g.gather(tl, y))
    }

    /// Tensor-level style mapping: z (B, latent_dim) -> s (B, style_dim).
    pub fn map_style(&self, z: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent must be (B, {}), got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        self.check_labels(z.shape()[0], y)?;
        let mut g = Graph::new();
        let mut b = Binding::new(self);
        b.bind(&mut g, self, Group::Mapping, false);
        let zv = g.constant(z.clone());
        let s = self.style_graph(&mut g, &b, zv, y);
        Ok(g.value(s).clone())
    }

    /// Tensor-level branch outputs for images x (B, C, H, W) and styles s (B, style_dim).
    pub fn branch_forward(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let n = self.check_images(x.shape())?;
        if s.shape() != [n, self.cfg.style_dim] {
            return Err(Error::shape(format!(
                "style must be ({n}, {}), got {:?}",
                self.cfg.style_dim,
                s.shape()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binding::new(self);
        b.bind(&mut g, self, Group::Generator, false);
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let psis = self.branches_graph(&mut g, &b, xv, sv);
        Ok(psis.into_iter().map(|p| g.value(p).clone()).collect())
    }

    pub fn discriminate(&self, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
        let n = self.check_images(x.shape())?;
        self.check_labels(n, y)?;
        let mut g = Graph::new();
        let mut b = Binding::new(self);
        b.bind(&mut g, self, Group::Discriminator, false);
        let xv = g.constant(x.clone());
        let logits = self.discriminate_graph(&mut g, &b, xv, y);
        Ok(g.value(logits).clone())
    }

    /// ∂D_y(x_b)/∂x_b for every sample of the batch.
    pub fn input_gradient(&self, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
        let n = self.check_images(x.shape())?;
        self.check_labels(n, y)?;
        let mut g = Graph::new();
        let mut b = Binding::new(self);
        b.bind(&mut g, self, Group::Discriminator, false);
        let xv = g.leaf(x.clone(), true);
        let logits = self.discriminate_graph(&mut g, &b, xv, y);
        let total = g.sum(logits);
        let mut grads = g.backward(total);
        Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
    }
}

//! Noise-prediction U-Net: a down path, a middle block and an up path built
//! from ResNet blocks, spatial self-attention and strided (transposed)
//! convolutions, conditioned on the diffusion timestep.
//!
//! Layout for the default configuration on 28x28 patches:
//!
//! ```text
//! conv_in 3x3 (1 -> 32)
//! down.0  res(32 -> 32)            @28  -> skip0, conv 4x4/2 -> @14
//! down.1  res(32 -> 64) + attn     @14  -> skip1, conv 4x4/2 -> @7
//! mid     res(64) + attn + res(64) @7
//! up.1    convT 4x4/2 -> @14, cat skip1, res(128 -> 64) + attn
//! up.0    convT 4x4/2 -> @28, cat skip0, res(96 -> 32)
//! out     groupnorm, silu, conv 3x3 (32 -> 1)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_embedding, Tape, Tensor, Var};
use crate::rng::rng_from_seed;

const NORM_EPS: f32 = 1e-5;
const MAX_PERIOD: f32 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Self-attention after the ResNet block of each resolution level.
    pub attention_levels: Vec<bool>,
    pub mid_attention: bool,
    /// Spatial size of the square input patches.
    pub patch_size: usize,
    /// Number of diffusion steps `T`; valid timesteps are `1..=T`.
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 128,
            groups: 8,
            attention_levels: vec![false, true],
            mid_attention: true,
            patch_size: 28,
            timesteps: 1000,
        }
    }
}

impl UNetConfig {
    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial size of the deepest feature map.
    pub fn deepest_resolution(&self) -> usize {
        self.patch_size >> self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.groups == 0 || self.base_channels == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return fail(format!(
                "base_channels {} must be a positive multiple of groups {}",
                self.base_channels, self.groups
            ));
        }
        if !self.base_channels.is_multiple_of(2) {
            return fail(format!(
                "base_channels {} must be even (timestep embedding width)",
                self.base_channels
            ));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("channel_multipliers must be nonempty and positive".into());
        }
        if self.attention_levels.len() != self.channel_multipliers.len() {
            return fail(format!(
                "attention_levels has {} flags for {} levels",
                self.attention_levels.len(),
                self.channel_multipliers.len()
            ));
        }
        if self.time_embed_dim == 0 {
            return fail("time_embed_dim must be >= 1".into());
        }
        let scale = 1usize << self.levels();
        if !self.patch_size.is_multiple_of(scale) || self.patch_size / scale < 4 {
            return fail(format!(
                "patch_size {} must be divisible by {scale} with a deepest map of at least 4x4",
                self.patch_size
            ));
        }
        if self.timesteps == 0 {
            return fail("timesteps must be >= 1".into());
        }
        Ok(())
    }
}

/// Registered parameter tensors, addressed by position.
#[derive(Debug, Clone, Default)]
struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

struct Init<R> {
    rng: R,
    store: ParamStore,
}

impl<R: Rng> Init<R> {
    /// Uniform with variance `1 / fan_in`.
    fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = libm::sqrtf(3.0 / fan_in as f32);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.add(name, Tensor::ones(shape))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Conv {
        Conv {
            w: self.fan_in(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k),
            b: self.zeros(format!("{name}.bias"), &[cout]),
            stride,
            padding,
        }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> ConvT {
        ConvT {
            // 4x4 stride 2: each output pixel sees cin * 2 * 2 taps.
            w: self.fan_in(format!("{name}.weight"), &[cin, cout, 4, 4], cin * 4),
            b: self.zeros(format!("{name}.bias"), &[cout]),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.ones(format!("{name}.gamma"), &[c]),
            beta: self.zeros(format!("{name}.beta"), &[c]),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.fan_in(format!("{name}.weight"), &[fout, fin], fin),
            b: self.zeros(format!("{name}.bias"), &[fout]),
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> Attn {
        Attn {
            wq: self.fan_in(format!("{name}.wq"), &[c, c], c),
            wk: self.fan_in(format!("{name}.wk"), &[c, c], c),
            wv: self.fan_in(format!("{name}.wv"), &[c, c], c),
            wo: self.fan_in(format!("{name}.wo"), &[c, c], c),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, 1),
            time: self.dense(&format!("{name}.time"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, 0)),
        }
    }
}

struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
}

struct ConvT {
    w: usize,
    b: usize,
}

struct Norm {
    gamma: usize,
    beta: usize,
}

struct Dense {
    w: usize,
    b: usize,
}

struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct DownLevel {
    res: ResBlock,
    attn: Option<Attn>,
    down: Conv,
}

struct UpLevel {
    up: ConvT,
    res: ResBlock,
    attn: Option<Attn>,
}

struct Layers {
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<Attn>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

fn build<R: Rng>(config: &UNetConfig, rng: R) -> (Layers, ParamStore) {
    let mut init = Init {
        rng,
        store: ParamStore::default(),
    };
    let base = config.base_channels;
    let temb = config.time_embed_dim;
    let chans = config.level_channels();
    let time1 = init.dense("time.fc1", base, temb);
    let time2 = init.dense("time.fc2", temb, temb);
    let conv_in = init.conv("conv_in", config.in_channels, base, 3, 1, 1);
    let mut down = Vec::new();
    let mut prev = base;
    for (i, &ch) in chans.iter().enumerate() {
        let res = init.res(&format!("down.{i}.res"), prev, ch, temb);
        let attn = config.attention_levels[i].then(|| init.attn(&format!("down.{i}.attn"), ch));
        let dn = init.conv(&format!("down.{i}.downsample"), ch, ch, 4, 2, 1);
        down.push(DownLevel { res, attn, down: dn });
        prev = ch;
    }
    let mid1 = init.res("mid.res1", prev, prev, temb);
    let mid_attn = config.mid_attention.then(|| init.attn("mid.attn", prev));
    let mid2 = init.res("mid.res2", prev, prev, temb);
    let mut up = Vec::new();
    for (i, &ch) in chans.iter().enumerate().rev() {
        let upc = init.conv_t(&format!("up.{i}.upsample"), prev, prev);
        let res = init.res(&format!("up.{i}.res"), prev + ch, ch, temb);
        let attn = config.attention_levels[i].then(|| init.attn(&format!("up.{i}.attn"), ch));
        up.push(UpLevel { up: upc, res, attn });
        prev = ch;
    }
    let norm_out = init.norm("norm_out", prev);
    let conv_out = init.conv("conv_out", prev, config.in_channels, 3, 1, 1);
    let layers = Layers {
        time1,
        time2,
        conv_in,
        down,
        mid1,
        mid_attn,
        mid2,
        up,
        norm_out,
        conv_out,
    };
    (layers, init.store)
}

/// The noise predictor `eps_theta(x_t, t)`.
pub struct UNetModel {
    config: UNetConfig,
    layers: Layers,
    params: ParamStore,
    forward_evals: AtomicU64,
}

impl Clone for UNetModel {
    fn clone(&self) -> Self {
        // Layer indices are a pure function of the config.
        let (layers, _) = build(&self.config, rng_from_seed(0));
        UNetModel {
            config: self.config.clone(),
            layers,
            params: self.params.clone(),
            forward_evals: AtomicU64::new(0),
        }
    }
}

impl core::fmt::Debug for UNetModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("UNetModel")
            .field("config", &self.config)
            .field("parameter_count", &self.parameter_count())
            .finish()
    }
}

impl UNetModel {
    /// Deterministically initialized model.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layers, params) = build(&config, rng_from_seed(seed));
        Ok(UNetModel {
            config,
            layers,
            params,
            forward_evals: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: UNetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.names.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.names.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let idx = model
                .params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            let slot = &mut model.params.tensors[idx];
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.tensors.iter().map(Tensor::len).sum()
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.params.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params.tensors
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params.tensors
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.names.iter().map(String::as_str).zip(&self.params.tensors)
    }

    /// FNV-1a over parameter names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in self.named_parameters() {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Number of single-sample forward evaluations performed so far.
    pub fn forward_evaluations(&self) -> u64 {
        self.forward_evals.load(Ordering::Relaxed)
    }

    pub fn reset_forward_evaluations(&self) {
        self.forward_evals.store(0, Ordering::Relaxed);
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Timestep-conditioned forward pass; `x` is `[N, in_channels, P, P]`
    /// and `t` holds one timestep in `1..=T` per sample.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let [n, c, h, w] = tape.value(x).dims4("unet_forward")?;
        if c != cfg.in_channels || h != cfg.patch_size || w != cfg.patch_size {
            return Err(Error::Shape {
                op: "unet_forward",
                axes: vec![1, 2, 3],
                detail: format!(
                    "expected [N, {}, {}, {}], got {:?}",
                    cfg.in_channels,
                    cfg.patch_size,
                    cfg.patch_size,
                    tape.value(x).shape()
                ),
            });
        }
        if t.len() != n {
            return Err(Error::Contract(format!("{} timesteps for a batch of {n}", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&s| s < 1 || s > cfg.timesteps) {
            return Err(Error::Contract(format!("timestep {bad} outside 1..={}", cfg.timesteps)));
        }
        if params.len() != self.params.tensors.len() {
            return Err(Error::Contract("parameter binding does not match model".into()));
        }
        let p = |i: usize| params[i];
        let l = &self.layers;
        let g = cfg.groups;

        let emb: Vec<Tensor> = t
            .iter()
            .map(|&s| sinusoidal_embedding(s, cfg.base_channels, MAX_PERIOD))
            .collect::<Result<_>>()?;
        let emb = tape.constant(Tensor::stack(&emb)?);
        let e = tape.linear(emb, p(l.time1.w), p(l.time1.b))?;
        let e = tape.silu(e);
        let e = tape.linear(e, p(l.time2.w), p(l.time2.b))?;
        let temb = tape.silu(e);

        let conv = |tape: &mut Tape, c: &Conv, x: Var| tape.conv2d(x, p(c.w), p(c.b), c.stride, c.padding);
        let norm = |tape: &mut Tape, nm: &Norm, x: Var| tape.group_norm(x, g, p(nm.gamma), p(nm.beta), NORM_EPS);
        let res = |tape: &mut Tape, r: &ResBlock, x: Var| -> Result<Var> {
            let h = norm(tape, &r.norm1, x)?;
            let h = tape.silu(h);
            let h = conv(tape, &r.conv1, h)?;
            let tb = tape.linear(temb, p(r.time.w), p(r.time.b))?;
            let h = tape.add_channel_bias(h, tb)?;
            let h = norm(tape, &r.norm2, h)?;
            let h = tape.silu(h);
            let h = conv(tape, &r.conv2, h)?;
            let s = match &r.skip {
                Some(sc) => conv(tape, sc, x)?,
                None => x,
            };
            tape.add(s, h)
        };
        let attn = |tape: &mut Tape, a: &Option<Attn>, x: Var| -> Result<Var> {
            match a {
                Some(a) => tape.self_attention(x, p(a.wq), p(a.wk), p(a.wv), p(a.wo)),
                None => Ok(x),
            }
        };

        let mut hcur = conv(tape, &l.conv_in, x)?;
        let mut skips = Vec::with_capacity(l.down.len());
        for lvl in &l.down {
            hcur = res(tape, &lvl.res, hcur)?;
            hcur = attn(tape, &lvl.attn, hcur)?;
            skips.push(hcur);
            hcur = conv(tape, &lvl.down, hcur)?;
        }
        hcur = res(tape, &l.mid1, hcur)?;
        hcur = attn(tape, &l.mid_attn, hcur)?;
        hcur = res(tape, &l.mid2, hcur)?;
        for lvl in &l.up {
            hcur = tape.conv_transpose2d(hcur, p(lvl.up.w), p(lvl.up.b), 2, 1)?;
            let skip = skips.pop().expect("one skip per level");
            let (hs, ss) = (tape.value(hcur).shape(), tape.value(skip).shape());
            if hs[2..] != ss[2..] {
                return Err(Error::Shape {
                    op: "unet_skip",
                    axes: vec![2, 3],
                    detail: format!("upsampled {:?} vs skip {:?}", hs, ss),
                });
            }
            hcur = tape.concat_channels(hcur, skip)?;
            hcur = res(tape, &lvl.res, hcur)?;
            hcur = attn(tape, &lvl.attn, hcur)?;
        }
        let hcur = norm(tape, &l.norm_out, hcur)?;
        let hcur = tape.silu(hcur);
        let out = conv(tape, &l.conv_out, hcur)?;
        self.forward_evals.fetch_add(n as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let params = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &params, xv, t)?;
        tape.into_value(y).check_finite("unet_forward")
    }
}

impl UNetConfig {
    /// A one-line human readable description.
    pub fn describe(&self) -> String {
        format!(
            "base {} x {:?}, temb {}, groups {}, attention {:?}/mid {}, patch {}, T {}",
            self.base_channels,
            self.channel_multipliers,
            self.time_embed_dim,
            self.groups,
            self.attention_levels,
            self.mid_attention,
            self.patch_size,
            self.timesteps
        )
    }
}

//! Small conditional UNet denoiser.
//!
//! The forward pass is split into [`BackboneView::encode`] (input conv,
//! downsampling path, middle block) and [`BackboneView::decode`] (upsampling
//! path). The split lets a dual-branch model run both encoders before either
//! decoder, so each decoder can receive the other branch's skip and middle
//! activations through zero-initialized 1×1 convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::kernels::sinusoidal_embedding;
use crate::engine::{fan_in_uniform, Element, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Channel multiplier per resolution level; every level but the last halves the resolution.
    pub channel_mults: Vec<usize>,
    /// Self- and cross-attention at the lowest resolution.
    pub attention: bool,
    pub groups: usize,
    pub embed_dim: usize,
    /// Real classes; id `num_classes` is the reserved null class.
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            attention: true,
            groups: 8,
            embed_dim: 128,
            num_classes: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.len() < 2 {
            return Err(invalid!(
                "backbone needs at least 2 levels, got {}",
                self.channel_mults.len()
            ));
        }
        if self.groups == 0 || !self.base_width.is_multiple_of(self.groups) {
            return Err(invalid!(
                "base width {} not divisible by {} groups",
                self.base_width,
                self.groups
            ));
        }
        if self.channel_mults.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.embed_dim == 0 || !self.base_width.is_multiple_of(2) {
            return Err(invalid!("embed dim must be positive and base width even"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    /// Input side length must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn with_channels(&self, in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ..self.clone()
        }
    }
}

/// Activations handed from the encoder to the decoder.
#[derive(Clone, Debug)]
pub struct BackboneActivations {
    /// One entry per down block, highest resolution first.
    pub skips: Vec<Var>,
    pub mid: Var,
}

/// Time and class conditioning shared by all blocks of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// `[n, embed_dim]`, fed to every residual block.
    pub time: Var,
    /// `[n, 2, embed_dim]` tokens (class, time) for cross-attention.
    pub context: Var,
}

/// Names of a set of zero-initialized exchange convolutions.
#[derive(Clone, Copy, Debug)]
pub struct ExchangeView<'a> {
    pub prefix: &'a str,
}

impl ExchangeView<'_> {
    pub fn input(&self) -> String {
        format!("{}input", self.prefix)
    }
    pub fn skip(&self, level: usize) -> String {
        format!("{}skip{level}", self.prefix)
    }
    pub fn mid(&self) -> String {
        format!("{}mid", self.prefix)
    }

    /// Inserts zeroed convs for the input (from `source_channels`), every skip and the middle block.
    pub fn init(&self, cfg: &BackboneConfig, source_channels: usize, store: &mut ParamStore) {
        let mut add = |name: String, cin: usize, cout: usize| {
            store.insert(format!("{name}.weight"), Tensor::zeros([cout, cin, 1, 1]));
            store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
        };
        add(self.input(), source_channels, cfg.base_width);
        for l in 0..cfg.levels() {
            add(self.skip(l), cfg.width(l), cfg.width(l));
        }
        let top = cfg.width(cfg.levels() - 1);
        add(self.mid(), top, top);
    }
}

/// Applies a named 1×1 (or k×k) conv with bias.
pub fn conv<T: Element>(tape: &mut Tape<'_, T>, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = tape.param(&format!("{name}.weight"))?;
    let b = tape.param(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, pad)
}

fn linear<T: Element>(tape: &mut Tape<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{name}.weight"))?;
    let b = tape.param(&format!("{name}.bias"))?;
    tape.linear(x, w, Some(b))
}

fn norm<T: Element>(tape: &mut Tape<'_, T>, name: &str, x: Var, groups: usize) -> Result<Var> {
    let g = tape.param(&format!("{name}.gamma"))?;
    let b = tape.param(&format!("{name}.beta"))?;
    tape.group_norm(x, g, b, groups, NORM_EPS)
}

fn conv_param(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.insert(
        format!("{name}.weight"),
        fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros([cout]));
}

/// A backbone's parameters addressed by name prefix inside some [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct BackboneView<'a> {
    pub cfg: &'a BackboneConfig,
    /// Prefix of this branch's own parameters.
    pub prefix: &'a str,
    /// Prefix under which the class embedding table lives (may be shared).
    pub class_prefix: &'a str,
}

impl<'a> BackboneView<'a> {
    pub fn new(cfg: &'a BackboneConfig, prefix: &'a str) -> Self {
        Self {
            cfg,
            prefix,
            class_prefix: prefix,
        }
    }

    fn p(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    /// Initializes every parameter of this backbone, including the class table.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.init_branch(store, rng)?;
        let cfg = self.cfg;
        store.insert(
            format!("{}class_table", self.class_prefix),
            Tensor::randn([cfg.num_classes + 1, cfg.embed_dim], rng),
        );
        Ok(())
    }

    /// Initializes the branch-local parameters (everything but the class table).
    pub fn init_branch(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let cfg = self.cfg;
        cfg.validate()?;
        let e = cfg.embed_dim;
        let bw = cfg.base_width;
        conv_param(store, rng, self.p("conv_in"), cfg.in_channels, bw, 3);

        let mut res_specs = Vec::new();
        let mut attn_specs = Vec::new();
        let mut cin = bw;
        let top = cfg.levels() - 1;
        for l in 0..cfg.levels() {
            res_specs.push((self.p(&format!("down{l}.res")), cin, cfg.width(l)));
            cin = cfg.width(l);
            if l == top && cfg.attention {
                attn_specs.push((self.p(&format!("down{l}.attn")), cin));
            }
        }
        let wt = cfg.width(top);
        res_specs.push((self.p("mid.res0"), wt, wt));
        if cfg.attention {
            attn_specs.push((self.p("mid.attn"), wt));
        }
        res_specs.push((self.p("mid.res1"), wt, wt));
        let mut h = wt;
        for l in (0..cfg.levels()).rev() {
            res_specs.push((
                self.p(&format!("up{l}.res")),
                h + cfg.width(l),
                cfg.width(l),
            ));
            h = cfg.width(l);
            if l == top && cfg.attention {
                attn_specs.push((self.p(&format!("up{l}.attn")), h));
            }
        }

        for (name, cin, cout) in res_specs {
            store.insert(format!("{name}.norm1.gamma"), Tensor::ones([cin]));
            store.insert(format!("{name}.norm1.beta"), Tensor::zeros([cin]));
            conv_param(store, rng, format!("{name}.conv1"), cin, cout, 3);
            store.insert(
                format!("{name}.time.weight"),
                fan_in_uniform(&[cout, e], e, rng),
            );
            store.insert(format!("{name}.time.bias"), Tensor::zeros([cout]));
            store.insert(format!("{name}.norm2.gamma"), Tensor::ones([cout]));
            store.insert(format!("{name}.norm2.beta"), Tensor::zeros([cout]));
            conv_param(store, rng, format!("{name}.conv2"), cout, cout, 3);
            if cin != cout {
                conv_param(store, rng, format!("{name}.skip"), cin, cout, 1);
            }
        }
        for (name, c) in attn_specs {
            for nm in ["norm_self", "norm_cross"] {
                store.insert(format!("{name}.{nm}.gamma"), Tensor::ones([c]));
                store.insert(format!("{name}.{nm}.beta"), Tensor::zeros([c]));
            }
            for (lin, fan) in [
                ("self_q", c),
                ("self_k", c),
                ("self_v", c),
                ("self_out", c),
                ("cross_q", c),
                ("cross_k", e),
                ("cross_v", e),
                ("cross_out", c),
            ] {
                store.insert(
                    format!("{name}.{lin}.weight"),
                    fan_in_uniform(&[c, fan], fan, rng),
                );
                store.insert(format!("{name}.{lin}.bias"), Tensor::zeros([c]));
            }
        }
        store.insert(
            format!("{}.weight", self.p("time.0")),
            fan_in_uniform(&[e, bw], bw, rng),
        );
        store.insert(format!("{}.bias", self.p("time.0")), Tensor::zeros([e]));
        store.insert(
            format!("{}.weight", self.p("time.1")),
            fan_in_uniform(&[e, e], e, rng),
        );
        store.insert(format!("{}.bias", self.p("time.1")), Tensor::zeros([e]));
        store.insert(format!("{}.gamma", self.p("norm_out")), Tensor::ones([bw]));
        store.insert(format!("{}.beta", self.p("norm_out")), Tensor::zeros([bw]));
        conv_param(store, rng, self.p("conv_out"), bw, cfg.out_channels, 3);
        Ok(())
    }

    /// Sinusoidal time features through a 2-layer MLP, `[n, embed_dim]`.
    pub fn embed_time<T: Element>(&self, tape: &mut Tape<'_, T>, t: &[usize]) -> Result<Var> {
        let dim = self.cfg.base_width;
        let mut feats = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            feats.extend(
                sinusoidal_embedding(ti as f64, dim)
                    .into_iter()
                    .map(T::from_f64_lossy),
            );
        }
        let x = tape.constant(Tensor::new([t.len(), dim], feats)?);
        let h = linear(tape, &self.p("time.0"), x)?;
        let h = tape.silu(h);
        linear(tape, &self.p("time.1"), h)
    }

    /// Learned class embedding rows, `[n, embed_dim]`.
    pub fn embed_condition<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        class: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = class.iter().find(|&&c| c > self.cfg.null_class()) {
            return Err(invalid!(
                "class id {bad} invalid ({} classes + null id {})",
                self.cfg.num_classes,
                self.cfg.null_class()
            ));
        }
        let table = tape.param(&format!("{}class_table", self.class_prefix))?;
        tape.gather_rows(table, class)
    }

    pub fn conditioning<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        t: &[usize],
        class: &[usize],
    ) -> Result<Conditioning> {
        if t.len() != class.len() {
            return Err(shape_err!(
                "{} timesteps for {} class ids",
                t.len(),
                class.len()
            ));
        }
        let n = t.len();
        let e = self.cfg.embed_dim;
        let time = self.embed_time(tape, t)?;
        let cls = self.embed_condition(tape, class)?;
        let ct = tape.reshape(cls, &[n, 1, e])?;
        let tt = tape.reshape(time, &[n, 1, e])?;
        let context = tape.concat_channels(&[ct, tt])?;
        Ok(Conditioning { time, context })
    }

    fn res_block<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        name: &str,
        x: Var,
        cond: &Conditioning,
    ) -> Result<Var> {
        let g = self.cfg.groups;
        let h = norm(tape, &format!("{name}.norm1"), x, g)?;
        let h = tape.silu(h);
        let h = conv(tape, &format!("{name}.conv1"), h, 1)?;
        let te = tape.silu(cond.time);
        let te = linear(tape, &format!("{name}.time"), te)?;
        let h = tape.add_channel_bias(h, te)?;
        let h = norm(tape, &format!("{name}.norm2"), h, g)?;
        let h = tape.silu(h);
        let h = conv(tape, &format!("{name}.conv2"), h, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if tape.shape(x)[1] != tape.shape(h)[1] {
            conv(tape, &skip_name, x, 0)?
        } else {
            x
        };
        tape.add(skip, h)
    }

    fn attn_block<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        name: &str,
        x: Var,
        cond: &Conditioning,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let g = self.cfg.groups;
        let to_tokens = |tape: &mut Tape<'_, T>, v: Var| -> Result<Var> {
            let r = tape.reshape(v, &[n, c, hw])?;
            tape.transpose12(r)
        };
        let from_tokens = |tape: &mut Tape<'_, T>, v: Var| -> Result<Var> {
            let r = tape.transpose12(v)?;
            tape.reshape(r, &s)
        };

        let h = norm(tape, &format!("{name}.norm_self"), x, g)?;
        let tok = to_tokens(tape, h)?;
        let q = linear(tape, &format!("{name}.self_q"), tok)?;
        let k = linear(tape, &format!("{name}.self_k"), tok)?;
        let v = linear(tape, &format!("{name}.self_v"), tok)?;
        let a = tape.scaled_dot_product_attention(q, k, v)?;
        let a = linear(tape, &format!("{name}.self_out"), a)?;
        let a = from_tokens(tape, a)?;
        let x = tape.add(x, a)?;

        let h = norm(tape, &format!("{name}.norm_cross"), x, g)?;
        let tok = to_tokens(tape, h)?;
        let q = linear(tape, &format!("{name}.cross_q"), tok)?;
        let k = linear(tape, &format!("{name}.cross_k"), cond.context)?;
        let v = linear(tape, &format!("{name}.cross_v"), cond.context)?;
        let a = tape.scaled_dot_product_attention(q, k, v)?;
        let a = linear(tape, &format!("{name}.cross_out"), a)?;
        let a = from_tokens(tape, a)?;
        tape.add(x, a)
    }

    /// Input conv, down path and middle block. `input_extra`, when given, is
    /// added to the output of the input conv.
    pub fn encode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cond: &Conditioning,
        input_extra: &[Var],
    ) -> Result<BackboneActivations> {
        let cfg = self.cfg;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != cfg.in_channels {
            return Err(shape_err!(
                "backbone expects [n, {}, h, w], got {xs:?}",
                cfg.in_channels
            ));
        }
        let m = cfg.size_multiple();
        if !xs[2].is_multiple_of(m) || !xs[3].is_multiple_of(m) {
            return Err(shape_err!(
                "spatial size {}x{} not a multiple of {m}",
                xs[2],
                xs[3]
            ));
        }
        let mut h = conv(tape, &self.p("conv_in"), x, 1)?;
        for &extra in input_extra {
            h = tape.add(h, extra)?;
        }
        let top = cfg.levels() - 1;
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            h = self.res_block(tape, &self.p(&format!("down{l}.res")), h, cond)?;
            if l == top && cfg.attention {
                h = self.attn_block(tape, &self.p(&format!("down{l}.attn")), h, cond)?;
            }
            skips.push(h);
            if l < top {
                h = tape.avg_pool(h, 2)?;
            }
        }
        h = self.res_block(tape, &self.p("mid.res0"), h, cond)?;
        if cfg.attention {
            h = self.attn_block(tape, &self.p("mid.attn"), h, cond)?;
        }
        let mid = self.res_block(tape, &self.p("mid.res1"), h, cond)?;
        Ok(BackboneActivations { skips, mid })
    }

    /// Up path and output head. When `injected` is given, each of the other
    /// branch's skips and its middle activation pass through the matching
    /// exchange conv and are added to this branch's own before use.
    pub fn decode<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        own: &BackboneActivations,
        cond: &Conditioning,
        injected: Option<(&BackboneActivations, ExchangeView<'_>)>,
    ) -> Result<Var> {
        let h = self.decode_features(tape, own, cond, injected)?;
        self.head(tape, h)
    }

    /// Output conv applied to decoder features.
    pub fn head<T: Element>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<Var> {
        conv(tape, &self.p("conv_out"), features, 1)
    }

    /// Up path up to (and including) the final norm and activation.
    pub fn decode_features<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        own: &BackboneActivations,
        cond: &Conditioning,
        injected: Option<(&BackboneActivations, ExchangeView<'_>)>,
    ) -> Result<Var> {
        let cfg = self.cfg;
        let top = cfg.levels() - 1;
        let mut skips = own.skips.clone();
        let mut h = own.mid;
        if let Some((other, xchg)) = injected {
            if other.skips.len() != own.skips.len() {
                return Err(shape_err!(
                    "injected {} skips into a backbone with {}",
                    other.skips.len(),
                    own.skips.len()
                ));
            }
            for (l, (mine, theirs)) in skips.iter_mut().zip(&other.skips).enumerate() {
                if tape.shape(*mine) != tape.shape(*theirs) {
                    return Err(shape_err!(
                        "injected skip {l} has shape {:?}, expected {:?}",
                        tape.shape(*theirs),
                        tape.shape(*mine)
                    ));
                }
                let z = conv(tape, &xchg.skip(l), *theirs, 0)?;
                *mine = tape.add(*mine, z)?;
            }
            if tape.shape(h) != tape.shape(other.mid) {
                return Err(shape_err!(
                    "injected mid has shape {:?}, expected {:?}",
                    tape.shape(other.mid),
                    tape.shape(h)
                ));
            }
            let z = conv(tape, &xchg.mid(), other.mid, 0)?;
            h = tape.add(h, z)?;
        }
        for l in (0..cfg.levels()).rev() {
            h = tape.concat_channels(&[h, skips[l]])?;
            h = self.res_block(tape, &self.p(&format!("up{l}.res")), h, cond)?;
            if l == top && cfg.attention {
                h = self.attn_block(tape, &self.p(&format!("up{l}.attn")), h, cond)?;
            }
            if l > 0 {
                h = tape.upsample_nearest(h, 2)?;
            }
        }
        let h = norm(tape, &self.p("norm_out"), h, cfg.groups)?;
        Ok(tape.silu(h))
    }

    /// Full forward. `injected_input` is the other branch's raw input, passed
    /// through the exchange input conv and added after this branch's input conv.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        t: &[usize],
        class: &[usize],
        injected: Option<(&BackboneActivations, ExchangeView<'_>)>,
        injected_input: Option<(Var, ExchangeView<'_>)>,
    ) -> Result<(Var, BackboneActivations)> {
        let cond = self.conditioning(tape, t, class)?;
        let mut extra = Vec::new();
        if let Some((other, xchg)) = injected_input {
            extra.push(exchange_input(tape, other, x, xchg)?);
        }
        let acts = self.encode(tape, x, &cond, &extra)?;
        let out = self.decode(tape, &acts, &cond, injected)?;
        Ok((out, acts))
    }
}

/// Zero-conv of the other branch's raw input, checked against this branch's input extent.
pub fn exchange_input<T: Element>(
    tape: &mut Tape<'_, T>,
    other_input: Var,
    own_input: Var,
    xchg: ExchangeView<'_>,
) -> Result<Var> {
    let (o, m) = (tape.shape(other_input), tape.shape(own_input));
    if o.len() != 4 || o[0] != m[0] || o[2..] != m[2..] {
        return Err(shape_err!("injected input {:?} vs own input {:?}", o, m));
    }
    conv(tape, &xchg.input(), other_input, 0)
}

/// Standalone single-modality denoiser (the "base" model).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        BackboneView::new(&config, "").init(&mut params, rng)?;
        Ok(Self { config, params })
    }

    pub fn view(&self) -> BackboneView<'_> {
        BackboneView::new(&self.config, "")
    }

    /// Noise prediction on a gradient-free tape.
    pub fn predict(&self, x_t: &Tensor<f32>, t: &[usize], class: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::inference(&self.params);
        let x = tape.constant(x_t.clone());
        let (out, _) = self.view().forward(&mut tape, x, t, class, None, None)?;
        Ok(tape.value(out).clone())
    }
}

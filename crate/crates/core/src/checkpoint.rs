//! Binary checkpoints: model description, parameters, optimizer state, RNG
//! state and step counter.
//!
//! Layout (little-endian):
//!
//! ```text
//! "JNCKPT" | u32 version | u32 spec_len | spec json | [32] sha256(spec json)
//! u64 step | u8 has_rng [ [32] seed | u64 stream | u128 word_pos ]
//! u32 n_params { u16 name_len | name | u8 dtype | u8 ndim | u32 dims.. | f32 data.. }
//! u8 has_adam [ f64 lr | f64 beta1 | f64 beta2 | f64 eps | u64 warmup | u64 adam_step
//!               u32 n { u16 name_len | name | u32 len | f32 m.. | f32 v.. } ]
//! u32 crc32 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::JointModel;
use crate::engine::{ParamStore, Tensor};
use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::jointnet::{
    build_direct_extend, build_jointnet, extend_for_masked_conditioning, DirectExtendDenoiser,
    ExtendInit, FreezePolicy, JointDenoiser,
};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::unet::{Backbone, BackboneConfig};

pub const MAGIC: &[u8; 6] = b"JNCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    Joint {
        joint_channels: usize,
        freeze: FreezePolicy,
        mask_conditioned: bool,
    },
    DirectExtend {
        joint_channels: usize,
        init: ExtendInit,
    },
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    #[serde(flatten)]
    pub kind: ModelKind,
}

impl ModelSpec {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Hex sha256 of the canonical JSON.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Base(Backbone),
    Joint(JointDenoiser),
    DirectExtend(DirectExtendDenoiser),
}

impl AnyModel {
    pub fn spec(&self) -> ModelSpec {
        match self {
            AnyModel::Base(b) => ModelSpec {
                backbone: b.config.clone(),
                kind: ModelKind::Base,
            },
            AnyModel::Joint(j) => ModelSpec {
                backbone: j.base_config.clone(),
                kind: ModelKind::Joint {
                    joint_channels: j.joint_channels,
                    freeze: j.freeze,
                    mask_conditioned: j.mask_conditioned,
                },
            },
            AnyModel::DirectExtend(d) => ModelSpec {
                backbone: d.config.clone(),
                kind: ModelKind::DirectExtend {
                    joint_channels: d.joint_channels,
                    init: d.init,
                },
            },
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Base(b) => &b.params,
            AnyModel::Joint(j) => &j.params,
            AnyModel::DirectExtend(d) => &d.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Base(b) => &mut b.params,
            AnyModel::Joint(j) => &mut j.params,
            AnyModel::DirectExtend(d) => &mut d.params,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Base(_) => "base",
            AnyModel::Joint(_) => "joint",
            AnyModel::DirectExtend(_) => "direct_extend",
        }
    }

    /// Rebuilds a model from its spec and a parameter table. Names and shapes
    /// must match a fresh build of the spec exactly.
    pub fn from_spec(spec: &ModelSpec, params: ParamStore) -> Result<Self> {
        let layout = layout_of(spec)?;
        let names: Vec<&str> = params.names().collect();
        let want: Vec<&str> = layout.names().collect();
        if names != want {
            let missing: Vec<_> = want.iter().filter(|n| !params.contains(n)).collect();
            let extra: Vec<_> = names.iter().filter(|n| !layout.contains(n)).collect();
            return Err(Error::Corrupt(format!(
                "parameter table does not match the model: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, t) in params.iter() {
            let expect = layout.get(name)?.shape();
            if t.shape() != expect {
                return Err(Error::Corrupt(format!(
                    "{name}: shape {:?}, model expects {expect:?}",
                    t.shape()
                )));
            }
        }
        let cfg = spec.backbone.clone();
        Ok(match &spec.kind {
            ModelKind::Base => AnyModel::Base(Backbone {
                config: cfg,
                params,
            }),
            ModelKind::Joint {
                joint_channels,
                freeze,
                mask_conditioned,
            } => AnyModel::Joint(JointDenoiser::from_parts(
                cfg,
                *joint_channels,
                params,
                *freeze,
                *mask_conditioned,
            )?),
            ModelKind::DirectExtend {
                joint_channels,
                init,
            } => AnyModel::DirectExtend(DirectExtendDenoiser {
                config: cfg,
                joint_channels: *joint_channels,
                init: *init,
                params,
            }),
        })
    }

    pub fn into_joint(self) -> Result<JointDenoiser> {
        match self {
            AnyModel::Joint(j) => Ok(j),
            other => Err(invalid!(
                "expected a joint model, found {}",
                other.kind_name()
            )),
        }
    }

    pub fn into_base(self) -> Result<Backbone> {
        match self {
            AnyModel::Base(b) => Ok(b),
            other => Err(invalid!(
                "expected a base model, found {}",
                other.kind_name()
            )),
        }
    }
}

// parameter names and shapes of a fresh build; values are irrelevant
fn layout_of(spec: &ModelSpec) -> Result<ParamStore> {
    spec.backbone.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = Backbone::new(spec.backbone.clone(), &mut rng)?;
    Ok(match &spec.kind {
        ModelKind::Base => base.params,
        ModelKind::Joint {
            joint_channels,
            mask_conditioned,
            ..
        } => {
            let mut j = build_jointnet(&base, *joint_channels)?;
            if *mask_conditioned {
                j = extend_for_masked_conditioning(j)?;
            }
            j.params
        }
        ModelKind::DirectExtend {
            joint_channels,
            init,
        } => build_direct_extend(&base, *joint_channels, *init, &mut rng)?.params,
    })
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub optimizer: Option<Adam>,
    pub rng: Option<RngState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: AnyModel) -> Self {
        Self {
            model,
            optimizer: None,
            rng: None,
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let spec = self.model.spec().canonical_json();
        w.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        w.extend_from_slice(spec.as_bytes());
        w.extend_from_slice(&Sha256::digest(spec.as_bytes()));
        w.extend_from_slice(&self.step.to_le_bytes());
        match &self.rng {
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                w.extend_from_slice(&r.stream.to_le_bytes());
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.push(0),
        }
        let params = self.model.params();
        w.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            put_name(&mut w, name);
            w.push(DTYPE_F32);
            w.push(t.ndim() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut w, t.data());
        }
        match &self.optimizer {
            Some(adam) => {
                w.push(1);
                let c = &adam.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.extend_from_slice(&v.to_le_bytes());
                }
                w.extend_from_slice(&c.warmup_steps.to_le_bytes());
                w.extend_from_slice(&adam.step.to_le_bytes());
                w.extend_from_slice(&(adam.state.len() as u32).to_le_bytes());
                for (name, m) in &adam.state {
                    put_name(&mut w, name);
                    w.extend_from_slice(&(m.m.len() as u32).to_le_bytes());
                    put_f32s(&mut w, &m.m);
                    put_f32s(&mut w, &m.v);
                }
            }
            None => w.push(0),
        }
        let crc = crc32fast::hash(&w);
        w.extend_from_slice(&crc.to_le_bytes());
        w
    }

    /// Parses a checkpoint. With `expected`, the stored model spec must have
    /// the same digest or loading is refused.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a JNCKPT checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let found = u32::from_le_bytes(tail.try_into().unwrap());
        let want = crc32fast::hash(body);
        if found != want {
            return Err(Error::Checksum {
                record: 0,
                expected: want,
                found,
            });
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let spec_len = r.u32()? as usize;
        let spec_bytes = r.take(spec_len)?;
        let digest = r.take(32)?;
        if Sha256::digest(spec_bytes).as_slice() != digest {
            return Err(Error::Corrupt(
                "model spec digest does not match its text".into(),
            ));
        }
        let spec: ModelSpec = serde_json::from_slice(spec_bytes)
            .map_err(|e| Error::Corrupt(format!("model spec: {e}")))?;
        if let Some(exp) = expected {
            if exp.digest() != hex(digest) {
                return Err(Error::DigestMismatch {
                    expected: exp.digest(),
                    found: hex(digest),
                });
            }
        }
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32)?.try_into().unwrap(),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
            }),
            f => return Err(Error::Corrupt(format!("bad rng flag {f}"))),
        };
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Corrupt(format!("{name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            params.insert(name, Tensor::new(shape, r.f32s(n)?)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    warmup_steps: r.u64()?,
                };
                let mut adam = Adam::new(config)?;
                adam.step = r.u64()?;
                let mut state = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.name()?;
                    let len = r.u32()? as usize;
                    let m = r.f32s(len)?;
                    let v = r.f32s(len)?;
                    match params.get(&name) {
                        Ok(p) if p.numel() == len => {}
                        _ => {
                            return Err(Error::Corrupt(format!(
                                "optimizer moments for unknown or resized parameter {name}"
                            )))
                        }
                    }
                    state.insert(name, Moments { m, v });
                }
                adam.state = state;
                Some(adam)
            }
            f => return Err(Error::Corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            model: AnyModel::from_spec(&spec, params)?,
            optimizer,
            rng,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: Option<&ModelSpec>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    w.extend_from_slice(&(name.len() as u16).to_le_bytes());
    w.extend_from_slice(name.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not utf-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Corrupt("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Forward pass of any checkpointed model on shared probe inputs; used to
/// compare models before and after a round trip. Base models ignore `y_t`.
pub fn probe_outputs(
    model: &AnyModel,
    x_t: &Tensor<f32>,
    y_t: &Tensor<f32>,
    t: &[usize],
    class: &[usize],
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    match model {
        AnyModel::Base(b) => Ok((b.predict(x_t, t, class)?, None)),
        AnyModel::Joint(j) => {
            let (a, b) = j.predict(x_t, y_t, t, class, None)?;
            Ok((a, Some(b)))
        }
        AnyModel::DirectExtend(d) => {
            let (a, b) = d.predict(x_t, y_t, t, class, None)?;
            Ok((a, Some(b)))
        }
    }
}

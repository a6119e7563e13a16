//! Learnable components: volumetric encoder, tabular encoder, drift and
//! diffusion networks, and the outcome decoder.
//!
//! All networks run batched on an autodiff [`Tape`]; rows are patients (or
//! patient/sample pairs). Drift, diffusion and decoder see the latent state
//! concatenated with a one-hot treatment code.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tnsde_autodiff::{AdError, Gradients, NodeId, Tape, Tensor};

use crate::data::TABULAR_WIDTH;

pub const BUNDLE_MAGIC: &[u8; 6] = b"TNSDE1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("arm index {arm} out of range for {n_arms} arms")]
    InvalidArm { arm: usize, n_arms: usize },
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("parameter `{0}` missing from bundle")]
    MissingParam(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bundle format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
}

/// Widths of a fully connected stack, input first. ELU between layers,
/// identity on the output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        Self { widths }
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn validate(&self, what: &str) -> Result<(), NetError> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(NetError::Spec(format!(
                "{what}: needs at least 2 positive widths, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

/// ResNet-style 3D encoder: one residual block per entry of `channels`,
/// stride-2 downsampling from the second block on, global average pooling
/// and a linear projection to `latent` units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvEncoderSpec {
    pub input_shape: [usize; 3],
    pub channels: Vec<usize>,
    pub latent: usize,
}

impl Default for ConvEncoderSpec {
    fn default() -> Self {
        Self {
            input_shape: [8, 8, 8],
            channels: vec![4, 8, 16],
            latent: 16,
        }
    }
}

impl ConvEncoderSpec {
    fn block_io(&self, i: usize) -> (usize, usize, usize) {
        let c_in = if i == 0 { 1 } else { self.channels[i - 1] };
        let stride = if i == 0 { 1 } else { 2 };
        (c_in, self.channels[i], stride)
    }

    fn has_projection(&self, i: usize) -> bool {
        let (c_in, c_out, stride) = self.block_io(i);
        c_in != c_out || stride != 1
    }

    fn validate(&self) -> Result<(), NetError> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(NetError::Spec("conv encoder needs at least one block with positive channels".into()));
        }
        if self.latent == 0 || self.input_shape.contains(&0) {
            return Err(NetError::Spec("conv encoder latent width and input dims must be positive".into()));
        }
        Ok(())
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub volume: ConvEncoderSpec,
    pub tabular: MlpSpec,
    #[serde(default = "default_hidden")]
    pub drift_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub diffusion_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: Vec<usize>,
    pub n_arms: usize,
    /// Softplus output of the diffusion net is multiplied by this.
    pub diffusion_scale: f64,
    /// Drift net output is divided by this many weeks.
    pub drift_time_scale: f64,
}

impl ModelSpec {
    pub fn new(n_arms: usize) -> Self {
        Self {
            volume: ConvEncoderSpec::default(),
            tabular: MlpSpec::new(vec![TABULAR_WIDTH, 16, 8]),
            drift_hidden: default_hidden(),
            diffusion_hidden: default_hidden(),
            decoder_hidden: default_hidden(),
            n_arms,
            diffusion_scale: 0.1,
            drift_time_scale: 96.0,
        }
    }

    pub fn latent_width(&self) -> usize {
        self.volume.latent + self.tabular.output()
    }

    fn conditioned(&self, hidden: &[usize], out: usize) -> MlpSpec {
        let mut widths = vec![self.latent_width() + self.n_arms];
        widths.extend_from_slice(hidden);
        widths.push(out);
        MlpSpec::new(widths)
    }

    pub fn drift_mlp(&self) -> MlpSpec {
        self.conditioned(&self.drift_hidden, self.latent_width())
    }

    pub fn diffusion_mlp(&self) -> MlpSpec {
        self.conditioned(&self.diffusion_hidden, self.latent_width())
    }

    pub fn decoder_mlp(&self) -> MlpSpec {
        self.conditioned(&self.decoder_hidden, 1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.volume.validate()?;
        self.tabular.validate("tabular encoder")?;
        if self.tabular.input() != TABULAR_WIDTH {
            return Err(NetError::Spec(format!(
                "tabular encoder input must be {TABULAR_WIDTH}, got {}",
                self.tabular.input()
            )));
        }
        if self.n_arms == 0 {
            return Err(NetError::Spec("n_arms must be positive".into()));
        }
        self.drift_mlp().validate("drift")?;
        self.diffusion_mlp().validate("diffusion")?;
        self.decoder_mlp().validate("decoder")?;
        if !(self.diffusion_scale >= 0.0 && self.diffusion_scale.is_finite()) {
            return Err(NetError::Spec("diffusion_scale must be finite and non-negative".into()));
        }
        if !(self.drift_time_scale > 0.0 && self.drift_time_scale.is_finite()) {
            return Err(NetError::Spec("drift_time_scale must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter tensor: (name, shape, fan_in, fan_out).
    fn layout(&self) -> Vec<(String, Vec<usize>, usize, usize)> {
        let mut out = Vec::new();
        let k = 3;
        let conv = |out: &mut Vec<_>, name: String, c_in: usize, c_out: usize, k: usize| {
            let taps = k * k * k;
            out.push((format!("{name}.w"), vec![c_out, c_in, k, k, k], c_in * taps, c_out * taps));
            out.push((format!("{name}.b"), vec![c_out], 0, 0));
        };
        for i in 0..self.volume.channels.len() {
            let (c_in, c_out, _) = self.volume.block_io(i);
            conv(&mut out, format!("phi.block{i}.conv1"), c_in, c_out, k);
            conv(&mut out, format!("phi.block{i}.conv2"), c_out, c_out, k);
            if self.volume.has_projection(i) {
                conv(&mut out, format!("phi.block{i}.skip"), c_in, c_out, 1);
            }
        }
        let last = *self.volume.channels.last().expect("validated");
        linear_layout(&mut out, "phi.proj", last, self.volume.latent);
        mlp_layout(&mut out, "psi", &self.tabular);
        mlp_layout(&mut out, "drift", &self.drift_mlp());
        mlp_layout(&mut out, "diffusion", &self.diffusion_mlp());
        mlp_layout(&mut out, "decoder", &self.decoder_mlp());
        out
    }
}

fn linear_layout(out: &mut Vec<(String, Vec<usize>, usize, usize)>, name: &str, i: usize, o: usize) {
    out.push((format!("{name}.w"), vec![i, o], i, o));
    out.push((format!("{name}.b"), vec![o], 0, 0));
}

fn mlp_layout(out: &mut Vec<(String, Vec<usize>, usize, usize)>, prefix: &str, spec: &MlpSpec) {
    for (l, w) in spec.widths.windows(2).enumerate() {
        linear_layout(out, &format!("{prefix}.l{l}"), w[0], w[1]);
    }
}

/// Named parameter tensors for every component, plus the `ModelSpec` they fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBundle {
    spec: ModelSpec,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamBundle {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in, fan_out) in spec.layout() {
            let n = shape.iter().product();
            let data = if fan_in + fan_out == 0 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            spec: spec.clone(),
            tensors,
        })
    }

    /// Checks that `tensors` holds exactly the parameters `spec` requires.
    pub fn from_parts(spec: ModelSpec, tensors: BTreeMap<String, Tensor>) -> Result<Self, NetError> {
        spec.validate()?;
        let layout = spec.layout();
        for (name, shape, _, _) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| NetError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(NetError::Shape {
                    what: "parameter",
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if tensors.len() != layout.len() {
            return Err(NetError::Spec(format!(
                "bundle holds {} tensors, spec needs {}",
                tensors.len(),
                layout.len()
            )));
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NetError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| NetError::MissingParam(name.into()))?;
        if slot.shape() != value.shape() {
            return Err(NetError::Shape {
                what: "parameter",
                expected: slot.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Records every tensor as a trainable tape parameter.
    pub fn bind_trainable<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        self.bind(tape, true)
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        self.bind(tape, false)
    }

    fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> BoundParams<'a> {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        BoundParams {
            spec: &self.spec,
            ids,
        }
    }

    /// Encodes one `(c1, c2, c3)` volume to its `h1` latent.
    pub fn encode_volume(&self, volume: &Tensor) -> Result<Tensor, NetError> {
        let [a, b, c] = self.spec.volume.input_shape;
        if volume.shape() != [a, b, c] {
            return Err(NetError::Shape {
                what: "volume",
                expected: vec![a, b, c],
                actual: volume.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(volume.reshaped(vec![1, 1, a, b, c])?);
        let z = bound.encode_volume(&mut tape, x)?;
        Ok(tape.value(z).reshaped(vec![self.spec.volume.latent])?)
    }

    /// Encodes one tabular vector to its `h2` latent.
    pub fn encode_tabular(&self, w: &Tensor) -> Result<Tensor, NetError> {
        let d = self.spec.tabular.input();
        if w.shape() != [d] {
            return Err(NetError::Shape {
                what: "tabular input",
                expected: vec![d],
                actual: w.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(w.reshaped(vec![1, d])?);
        let z = bound.encode_tabular(&mut tape, x)?;
        Ok(tape.value(z).reshaped(vec![self.spec.tabular.output()])?)
    }

    /// Decoded outcome for one latent state under arm `arm`.
    pub fn decode(&self, z: &Tensor, arm: usize) -> Result<f64, NetError> {
        let h = self.spec.latent_width();
        if z.shape() != [h] {
            return Err(NetError::Shape {
                what: "latent",
                expected: vec![h],
                actual: z.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let code = bound.arm_code(&mut tape, &[arm])?;
        let x = tape.constant(z.reshaped(vec![1, h])?);
        let y = bound.decode(&mut tape, x, code)?;
        Ok(tape.value(y).data()[0])
    }

    pub fn to_bytes(&self, extra: &serde_json::Value) -> Vec<u8> {
        let meta = serde_json::json!({ "spec": self.spec, "extra": extra });
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value), NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != BUNDLE_MAGIC {
            return Err(NetError::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos;
        let meta: serde_json::Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| NetError::Format {
                offset: meta_at,
                reason: format!("metadata: {e}"),
            })?;
        let spec: ModelSpec = serde_json::from_value(meta["spec"].clone()).map_err(|e| NetError::Format {
            offset: meta_at,
            reason: format!("spec echo: {e}"),
        })?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| NetError::Format {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|e| NetError::Format {
                offset: at,
                reason: format!("tensor `{name}`: {e}"),
            })?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(NetError::Format {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok((Self::from_parts(spec, tensors)?, meta["extra"].clone()))
    }

    pub fn save(&self, path: &Path, extra: &serde_json::Value) -> Result<(), NetError> {
        fs::write(path, self.to_bytes(extra)).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), NetError> {
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(NetError::Format {
            offset: self.pos,
            reason: format!("unexpected end of file reading {n} bytes"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// A [`ParamBundle`] recorded on a tape.
pub struct BoundParams<'a> {
    spec: &'a ModelSpec,
    ids: BTreeMap<String, NodeId>,
}

impl<'a> AsRef<BoundParams<'a>> for BoundParams<'a> {
    fn as_ref(&self) -> &BoundParams<'a> {
        self
    }
}

impl BoundParams<'_> {
    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Gradients keyed by parameter name.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    /// One-hot `[rows, n_arms]` treatment code.
    pub fn arm_code(&self, tape: &mut Tape, arms: &[usize]) -> Result<NodeId, NetError> {
        let n = self.spec.n_arms;
        let mut data = vec![0.0; arms.len() * n];
        for (row, &arm) in arms.iter().enumerate() {
            if arm >= n {
                return Err(NetError::InvalidArm { arm, n_arms: n });
            }
            data[row * n + arm] = 1.0;
        }
        Ok(tape.constant(Tensor::matrix(arms.len(), n, data)?))
    }

    fn linear(&self, tape: &mut Tape, prefix: &str, x: NodeId) -> Result<NodeId, AdError> {
        let h = tape.matmul(x, self.id(&format!("{prefix}.w")))?;
        tape.add_bias(h, self.id(&format!("{prefix}.b")))
    }

    fn mlp(&self, tape: &mut Tape, prefix: &str, layers: usize, x: NodeId) -> Result<NodeId, AdError> {
        let mut h = x;
        for l in 0..layers {
            h = self.linear(tape, &format!("{prefix}.l{l}"), h)?;
            if l + 1 < layers {
                h = tape.elu(h)?;
            }
        }
        Ok(h)
    }

    fn conv(&self, tape: &mut Tape, prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId, AdError> {
        tape.conv3d(x, self.id(&format!("{prefix}.w")), self.id(&format!("{prefix}.b")), stride, pad)
    }

    /// `[B, 1, c1, c2, c3]` volumes to `[B, h1]` latents.
    pub fn encode_volume(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NetError> {
        let spec = &self.spec.volume;
        let s = tape.shape(x);
        let [a, b, c] = spec.input_shape;
        if s.len() != 5 || s[1..] != [1, a, b, c] {
            return Err(NetError::Shape {
                what: "volume batch",
                expected: vec![s.first().copied().unwrap_or(1), 1, a, b, c],
                actual: s.to_vec(),
            });
        }
        let batch = s[0];
        let mut h = x;
        for i in 0..spec.channels.len() {
            let (_, _, stride) = spec.block_io(i);
            let p = format!("phi.block{i}");
            let c1 = self.conv(tape, &format!("{p}.conv1"), h, stride, 1)?;
            let a1 = tape.elu(c1)?;
            let c2 = self.conv(tape, &format!("{p}.conv2"), a1, 1, 1)?;
            let main = tape.elu(c2)?;
            let skip = if spec.has_projection(i) {
                self.conv(tape, &format!("{p}.skip"), h, stride, 0)?
            } else {
                h
            };
            h = tape.add(main, skip)?;
        }
        let shape = tape.shape(h).to_vec();
        let voxels: usize = shape[2..].iter().product();
        let flat = tape.reshape(h, vec![batch, shape[1], voxels])?;
        let pooled = tape.mean_last(flat)?;
        Ok(self.linear(tape, "phi.proj", pooled)?)
    }

    /// `[B, d]` covariates to `[B, h2]` latents.
    pub fn encode_tabular(&self, tape: &mut Tape, w: NodeId) -> Result<NodeId, NetError> {
        let d = self.spec.tabular.input();
        let s = tape.shape(w);
        if s.len() != 2 || s[1] != d {
            return Err(NetError::Shape {
                what: "tabular batch",
                expected: vec![s.first().copied().unwrap_or(1), d],
                actual: s.to_vec(),
            });
        }
        Ok(self.mlp(tape, "psi", self.spec.tabular.layers(), w)?)
    }

    fn conditioned_input(&self, tape: &mut Tape, z: NodeId, code: NodeId) -> Result<NodeId, AdError> {
        tape.concat(&[z, code], 1)
    }

    /// Drift per week, `[B, h]`.
    pub fn drift(&self, tape: &mut Tape, z: NodeId, code: NodeId) -> Result<NodeId, AdError> {
        let x = self.conditioned_input(tape, z, code)?;
        let f = self.mlp(tape, "drift", self.spec.drift_mlp().layers(), x)?;
        tape.scale(f, 1.0 / self.spec.drift_time_scale)
    }

    /// Diagonal diffusion, `[B, h]`, positive.
    pub fn diffusion(&self, tape: &mut Tape, z: NodeId, code: NodeId) -> Result<NodeId, AdError> {
        let x = self.conditioned_input(tape, z, code)?;
        let g = self.mlp(tape, "diffusion", self.spec.diffusion_mlp().layers(), x)?;
        let g = tape.softplus(g)?;
        tape.scale(g, self.spec.diffusion_scale)
    }

    /// `[B, h]` latents to `[B, 1]` outcomes.
    pub fn decode(&self, tape: &mut Tape, z: NodeId, code: NodeId) -> Result<NodeId, NetError> {
        let h = self.spec.latent_width();
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != h {
            return Err(NetError::Shape {
                what: "latent batch",
                expected: vec![s.first().copied().unwrap_or(1), h],
                actual: s.to_vec(),
            });
        }
        let x = self.conditioned_input(tape, z, code)?;
        Ok(self.mlp(tape, "decoder", self.spec.decoder_mlp().layers(), x)?)
    }
}

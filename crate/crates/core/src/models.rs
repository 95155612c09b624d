//! Feed-forward ReLU classifiers and their binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! | field                     | type            |
//! |---------------------------|-----------------|
//! | magic `DMEM`              | 4 bytes         |
//! | format version (= 1)      | u32             |
//! | layer count L             | u32             |
//! | per layer: rows, cols     | u32, u32        |
//! | weights then bias, per layer, weights row-major | f64 … |
//! | activation tag (0 = relu) | u32             |
//!
//! A layer with `rows × cols` weights maps `rows` inputs to `cols` outputs.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::seed::{self, stream};
use crate::tensor::{self, Tensor};

const MAGIC: &[u8; 4] = b"DMEM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    #[default]
    HeUniform,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_scheme: InitScheme,
}

impl ModelConfig {
    pub fn mlp(layer_widths: Vec<usize>) -> Self {
        Self {
            layer_widths,
            activation: Activation::Relu,
            init_scheme: InitScheme::HeUniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        ensure!(w.len() >= 2, Config, "layer_widths needs at least input and output widths");
        ensure!(w.iter().all(|&d| d >= 1), Config, "layer widths must be positive");
        ensure!(
            *w.last().unwrap() >= 2,
            Config,
            "output width (classes) must be at least 2"
        );
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`, row-major.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Classifier parameters `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    config: ModelConfig,
}

/// Tape handles for a model's parameters, in layer order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// He-uniform bound `√(6 / fan_in)`.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl Model {
    /// He-uniform weights, zero biases; determined by `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::mix(seed, stream::INIT));
        let layers = config
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = he_uniform_bound(fan_in);
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], weights),
                    bias: Tensor::from_parts(vec![fan_out], vec![0.0; fan_out]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            config: config.clone(),
        })
    }

    /// Builds a model from explicit layers; shapes must chain.
    pub fn from_layers(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        ensure!(
            layers.len() + 1 == config.layer_widths.len(),
            Input,
            "{} layers for {} widths",
            layers.len(),
            config.layer_widths.len()
        );
        for (i, (layer, w)) in layers.iter().zip(config.layer_widths.windows(2)).enumerate() {
            ensure!(
                layer.weight.shape() == [w[0], w[1]] && layer.bias.shape() == [w[1]],
                Input,
                "layer {i}: weight {:?} / bias {:?} do not match widths {} -> {}",
                layer.weight.shape(),
                layer.bias.shape(),
                w[0],
                w[1]
            );
        }
        Ok(Self { layers, config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.values());
            out.extend_from_slice(l.bias.values());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.n_params(),
            Input,
            "expected {} parameters, got {}",
            self.n_params(),
            flat.len()
        );
        ensure!(flat.iter().all(|v| v.is_finite()), Numeric, "non-finite parameter");
        let mut offset = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                *t = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        ensure!(
            batch.is_matrix() && batch.cols() == self.config.input_dim(),
            Input,
            "input batch {:?} does not match input width {}",
            batch.shape(),
            self.config.input_dim()
        );
        Ok(())
    }

    /// Logits for an `N×D` batch, no tape.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let n = batch.rows();
        let mut h = batch.values().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (k, m) = (l.weight.rows(), l.weight.cols());
            let mut z = tensor::matmul(&h, l.weight.values(), n, k, m);
            let b = l.bias.values();
            for (j, v) in z.iter_mut().enumerate() {
                *v += b[j % m];
                if i < last {
                    *v = v.max(0.0);
                }
            }
            h = z;
        }
        let out = Tensor::from_parts(vec![n, self.config.n_classes()], h);
        out.check_finite("forward")?;
        Ok(out)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Records the parameters on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        ParamVars { layers }
    }

    /// Records the forward pass of `input` on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input)?)?;
        let last = params.layers.len() - 1;
        let mut h = input;
        for (i, &(w, b)) in params.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
        }
        for v in self.flat_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config.activation.tag().to_le_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        ensure!(magic == MAGIC, Format, "bad magic {:?}", String::from_utf8_lossy(magic));
        let version = r.u32("version")?;
        ensure!(
            version == FORMAT_VERSION,
            Format,
            "version mismatch: file has {version}, expected {FORMAT_VERSION}"
        );
        let n_layers = r.u32("layer count")? as usize;
        ensure!(n_layers >= 1, Format, "layer count must be at least 1");
        let mut dims = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let rows = r.u32(&format!("layer {i} rows"))? as usize;
            let cols = r.u32(&format!("layer {i} cols"))? as usize;
            ensure!(rows > 0 && cols > 0, Format, "layer {i} has a zero dimension");
            if let Some(&(_, prev_cols)) = dims.last() {
                ensure!(
                    prev_cols == rows,
                    Format,
                    "layer {i} rows {rows} do not chain with previous cols {prev_cols}"
                );
            }
            dims.push((rows, cols));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(rows, cols) in &dims {
            let weight = r.f64s(rows * cols)?;
            let bias = r.f64s(cols)?;
            layers.push(Layer {
                weight: Tensor::new(vec![rows, cols], weight)?,
                bias: Tensor::new(vec![cols], bias)?,
            });
        }
        let activation = Activation::from_tag(r.u32("activation tag")?)?;
        ensure!(
            r.pos == bytes.len(),
            Format,
            "{} trailing bytes after activation tag",
            bytes.len() - r.pos
        );
        let mut widths = vec![dims[0].0];
        widths.extend(dims.iter().map(|d| d.1));
        let config = ModelConfig {
            layer_widths: widths,
            activation,
            init_scheme: InitScheme::HeUniform,
        };
        Self::from_layers(config, layers).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated header: missing {field}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + 8 * n > self.bytes.len() {
            return Err(Error::Format("truncated payload".into()));
        }
        let out = self.bytes[self.pos..self.pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 8 * n;
        Ok(out)
    }
}

//! Per-stage sub-models: stacks of affine and nonlinearity layers with
//! reverse-mode gradients, SGD updates and a byte-level parameter blob.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::RandomStream;
use crate::scalar::Scalar;
use crate::tensor::{
    activation_apply, activation_grad, add_row, col_sum_acc, gaussian, matmul, matmul_nt,
    matmul_tn_acc, Activation, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { in_dim: usize, out_dim: usize },
    Nonlinearity { activation: Activation },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar> {
    /// `y = x · weight + bias`, weight is `in × out`, bias `1 × out`.
    Affine { weight: Tensor<T>, bias: Tensor<T> },
    Nonlinearity(Activation),
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Affine { weight, .. } => LayerSpec::Affine {
                in_dim: weight.rows(),
                out_dim: weight.cols(),
            },
            Layer::Nonlinearity(a) => LayerSpec::Nonlinearity { activation: *a },
        }
    }
}

/// Checks that consecutive affine layers agree on width and returns the
/// `(in, out)` width of the whole stack.
pub fn chain_widths(specs: &[LayerSpec]) -> Result<(usize, usize)> {
    let mut input = None;
    let mut current = None;
    for (i, spec) in specs.iter().enumerate() {
        if let LayerSpec::Affine { in_dim, out_dim } = *spec {
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::config(
                    format!("layers[{i}]"),
                    "affine dimensions must be at least 1",
                ));
            }
            if let Some(w) = current {
                if w != in_dim {
                    return Err(Error::config(
                        format!("layers[{i}].in_dim"),
                        format!("expected {w}, got {in_dim}"),
                    ));
                }
            }
            input.get_or_insert(in_dim);
            current = Some(out_dim);
        }
    }
    match (input, current) {
        (Some(i), Some(o)) => Ok((i, o)),
        _ => Err(Error::config("layers", "stage needs at least one affine layer")),
    }
}

/// Inputs seen by each layer during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    output_shape: (usize, usize),
}

impl<T: Scalar> ForwardCache<T> {
    pub fn layer_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.inputs[0]
    }
}

/// Parameter-shaped gradient accumulators, ordered `[w0, b0, w1, b1, ...]`
/// over the affine layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(Tensor::is_zero)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageModule<T: Scalar> {
    index: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> StageModule<T> {
    /// Scaled-Gaussian weights (`N(0,1) / sqrt(in_dim)`), zero biases.
    pub fn init(specs: &[LayerSpec], stage_index: usize, stream: &mut RandomStream) -> Result<Self> {
        chain_widths(specs)?;
        let layers = specs
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Affine { in_dim, out_dim } => {
                    let scale = T::one() / T::from_usize(in_dim).expect("dim fits").sqrt();
                    Layer::Affine {
                        weight: gaussian::<T>(stream, in_dim, out_dim).scale(scale),
                        bias: Tensor::zeros(1, out_dim),
                    }
                }
                LayerSpec::Nonlinearity { activation } => Layer::Nonlinearity(activation),
            })
            .collect();
        Ok(Self {
            index: stage_index,
            layers,
        })
    }

    pub fn from_layers(stage_index: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        chain_widths(&specs)?;
        for layer in &layers {
            if let Layer::Affine { weight, bias } = layer {
                if bias.shape() != (1, weight.cols()) {
                    return Err(Error::shape("bias", (1, weight.cols()), bias.shape()));
                }
            }
        }
        Ok(Self {
            index: stage_index,
            layers,
        })
    }

    /// Concatenates the layers of several modules into one.
    pub fn merged(stage_index: usize, parts: &[&StageModule<T>]) -> Result<Self> {
        let layers = parts.iter().flat_map(|m| m.layers.iter().cloned()).collect();
        Self::from_layers(stage_index, layers)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        chain_widths(&self.specs()).expect("validated at construction").0
    }

    pub fn out_dim(&self) -> usize {
        chain_widths(&self.specs()).expect("validated at construction").1
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Affine { weight, bias } => vec![weight, bias],
            Layer::Nonlinearity(_) => vec![],
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| match l {
            Layer::Affine { weight, bias } => vec![weight, bias],
            Layer::Nonlinearity(_) => vec![],
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.params().all(Tensor::is_finite)
    }

    /// Bitwise parameter equality (structure included).
    pub fn params_bit_eq(&self, other: &Self) -> bool {
        self.specs() == other.specs()
            && self.params().zip(other.params()).all(|(a, b)| a.bit_eq(b))
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            tensors: self
                .params()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape(
                "stage forward",
                input.shape(),
                (input.rows(), self.in_dim()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let y = match layer {
                Layer::Affine { weight, bias } => add_row(&matmul(&x, weight)?, bias)?,
                Layer::Nonlinearity(a) => activation_apply(*a, &x),
            };
            inputs.push(std::mem::replace(&mut x, y));
        }
        let output_shape = x.shape();
        Ok((
            x,
            ForwardCache {
                inputs,
                output_shape,
            },
        ))
    }

    /// Reverse pass adding parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Structure(format!(
                "stale cache: {} cached layers for a {}-layer module",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        if grad_out.shape() != cache.output_shape {
            return Err(Error::shape("stage backward", cache.output_shape, grad_out.shape()));
        }
        if grads.tensors.len() != self.params().count() {
            return Err(Error::Structure("gradient buffer does not match module".into()));
        }
        let mut g = grad_out.clone();
        let mut slot = grads.tensors.len();
        for (layer, x) in self.layers.iter().zip(&cache.inputs).rev() {
            g = match layer {
                Layer::Affine { weight, .. } => {
                    slot -= 2;
                    let (gw, gb) = grads.tensors[slot..slot + 2].split_at_mut(1);
                    matmul_tn_acc(&mut gw[0], x, &g)?;
                    col_sum_acc(&mut gb[0], &g)?;
                    matmul_nt(&g, weight)?
                }
                Layer::Nonlinearity(a) => activation_grad(*a, x, &g)?,
            };
        }
        Ok(g)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Gradients<T>)> {
        let mut grads = self.zero_grads();
        let grad_in = self.backward_into(cache, grad_out, &mut grads)?;
        Ok((grad_in, grads))
    }

    /// Plain SGD: `p ← p − lr·g`.
    pub fn apply_update(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        let shapes_ok = self.params().count() == grads.tensors.len()
            && self
                .params()
                .zip(&grads.tensors)
                .all(|(p, g)| p.shape() == g.shape());
        if !shapes_ok {
            return Err(Error::Structure("gradient shapes do not match parameters".into()));
        }
        for (p, g) in self.params_mut().zip(&grads.tensors) {
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamBlob {
        ParamBlob::encode(self)
    }

    pub fn load(&mut self, blob: &ParamBlob) -> Result<()> {
        blob.decode_into(self)
    }
}

const BLOB_MAGIC: &[u8; 4] = b"PGPB";
const BLOB_VERSION: u32 = 1;

/// Self-describing parameter snapshot.
///
/// Layout, all integers `u32` little-endian:
///
/// ```text
/// magic "PGPB" | version | layer count L
/// L × descriptor { tag, a, b }   tag 0 = affine (a = in, b = out)
///                                tag 1 = nonlinearity (a = 0 tanh / 1 relu, b = 0)
/// parameters as f64 little-endian, per affine layer: weight row-major, then bias
/// ```
///
/// Header size is `12 + 12·L` bytes; `f32` modules are widened losslessly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlob(Vec<u8>);

impl ParamBlob {
    pub const fn header_len(layer_count: usize) -> usize {
        12 + 12 * layer_count
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn encode<T: Scalar>(m: &StageModule<T>) -> Self {
        let mut out = Vec::with_capacity(Self::header_len(m.layers.len()) + 8 * m.param_count());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(m.layers.len() as u32).to_le_bytes());
        for spec in m.specs() {
            let (tag, a, b) = descriptor(spec);
            for v in [tag, a, b] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for p in m.params() {
            for v in p.data() {
                out.extend_from_slice(&v.widen().to_le_bytes());
            }
        }
        Self(out)
    }

    fn decode_into<T: Scalar>(&self, m: &mut StageModule<T>) -> Result<()> {
        let bytes = &self.0;
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
                .ok_or_else(|| Error::Structure("truncated blob header".into()))
        };
        if bytes.get(0..4) != Some(BLOB_MAGIC.as_slice()) {
            return Err(Error::Structure("bad blob magic".into()));
        }
        if word(4)? != BLOB_VERSION {
            return Err(Error::Structure(format!("unsupported blob version {}", word(4)?)));
        }
        let layers = word(8)? as usize;
        let specs = m.specs();
        if layers != specs.len() {
            return Err(Error::Structure(format!(
                "blob has {layers} layers, module has {}",
                specs.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            let at = 12 + 12 * i;
            let found = (word(at)?, word(at + 4)?, word(at + 8)?);
            if found != descriptor(*spec) {
                return Err(Error::Structure(format!("layer {i} descriptor differs")));
            }
        }
        let expected = Self::header_len(layers) + 8 * m.param_count();
        if bytes.len() != expected {
            return Err(Error::Structure(format!(
                "blob length {} but module needs {expected}",
                bytes.len()
            )));
        }
        let mut at = Self::header_len(layers);
        for p in m.params_mut() {
            for v in p.data_mut() {
                let raw: [u8; 8] = bytes[at..at + 8].try_into().unwrap();
                *v = T::narrow(f64::from_le_bytes(raw));
                at += 8;
            }
        }
        Ok(())
    }
}

fn descriptor(spec: LayerSpec) -> (u32, u32, u32) {
    match spec {
        LayerSpec::Affine { in_dim, out_dim } => (0, in_dim as u32, out_dim as u32),
        LayerSpec::Nonlinearity { activation } => (
            1,
            match activation {
                Activation::Tanh => 0,
                Activation::Relu => 1,
            },
            0,
        ),
    }
}

//! Dense networks of the model: the input encoder (latent `l` and
//! probability feature `h`), the data–label pair encoder (feature `z`), and
//! the code-conditioned generator.
//!
//! Everything operates on batches: row `i` of every matrix belongs to
//! sample `i`, images are flattened row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{DmmError, Result};
use crate::etf::EtfClassifier;
use crate::image::{Image, Mask};
use crate::ndcore::{Tape, Tensor, Var};

/// Sizes that fully determine the architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    /// Size of the latent `l` fed to the generator.
    pub latent: usize,
    /// Code dimension `m`, shared by `z`, `h` and the codes.
    pub code_dim: usize,
    /// Number of codes `N`.
    pub codes: usize,
    pub encoder_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            latent: 64,
            code_dim: 16,
            codes: 16,
            encoder_hidden: vec![256, 128],
            generator_hidden: vec![128, 256],
        }
    }
}

impl Dims {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [self.height, self.width, self.latent, self.code_dim, self.codes]
            .iter()
            .chain(&self.encoder_hidden)
            .chain(&self.generator_hidden)
            .any(|&v| v == 0);
        if zero {
            return Err(DmmError::Config(format!("all model sizes must be positive: {self:?}")));
        }
        if self.codes < 2 || self.code_dim < self.codes {
            return Err(DmmError::Config(format!(
                "need 2 <= codes <= code_dim, got codes={} code_dim={}",
                self.codes, self.code_dim
            )));
        }
        Ok(())
    }

    fn input_encoder_sizes(&self) -> Vec<usize> {
        layer_sizes(self.pixels(), &self.encoder_hidden, self.latent + self.code_dim)
    }

    fn pair_encoder_sizes(&self) -> Vec<usize> {
        layer_sizes(2 * self.pixels(), &self.encoder_hidden, self.code_dim)
    }

    fn generator_sizes(&self) -> Vec<usize> {
        layer_sizes(self.latent + self.code_dim, &self.generator_hidden, self.pixels())
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

/// Fully connected layer `x·W + b` with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform fan-in initialization; `gain` is 6 for layers followed by a
    /// ReLU and 3 for output layers.
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = (gain / fan_in as f64).sqrt() as f32;
        Self {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Stack of dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(rng: &mut R, sizes: &[usize]) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(rng, w[0], w[1], if i == last { 3.0 } else { 6.0 }))
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// An [`Mlp`] whose parameters have been recorded on a tape.
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rows = tape.value(x).dims2()?.0;
        let ones = tape.constant(Tensor::full(&[rows, 1], 1.0));
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let xw = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            h = tape.add(xw, bias)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmmModel {
    dims: Dims,
    pub input_encoder: Mlp,
    pub pair_encoder: Mlp,
    pub generator: Mlp,
    pub etf: EtfClassifier,
    /// `m × N` matrix used by the probability head. Equal to the ETF frame
    /// unless the classifier is trained.
    pub classifier: Tensor,
    pub codebook: Codebook,
}

/// Splitmix64 step, used to derive independent sub-seeds.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DmmModel {
    pub fn new(dims: Dims, kappa: f32, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let input_encoder = Mlp::new(&mut rng, &dims.input_encoder_sizes());
        let pair_encoder = Mlp::new(&mut rng, &dims.pair_encoder_sizes());
        let generator = Mlp::new(&mut rng, &dims.generator_sizes());
        let etf = EtfClassifier::build(dims.codes, dims.code_dim, derive_seed(seed, 2))?;
        let codebook = Codebook::init(dims.codes, dims.code_dim, kappa, derive_seed(seed, 3))?;
        Ok(Self {
            classifier: etf.matrix().clone(),
            dims,
            input_encoder,
            pair_encoder,
            generator,
            etf,
            codebook,
        })
    }

    pub(crate) fn from_parts(
        dims: Dims,
        networks: [Mlp; 3],
        etf: EtfClassifier,
        classifier: Tensor,
        codebook: Codebook,
    ) -> Result<Self> {
        let [input_encoder, pair_encoder, generator] = networks;
        let model = Self {
            dims,
            input_encoder,
            pair_encoder,
            generator,
            etf,
            classifier,
            codebook,
        };
        let shapes_ok = model.input_encoder.input_size() == model.dims.pixels()
            && model.input_encoder.output_size() == model.dims.latent + model.dims.code_dim
            && model.pair_encoder.input_size() == 2 * model.dims.pixels()
            && model.pair_encoder.output_size() == model.dims.code_dim
            && model.generator.input_size() == model.dims.latent + model.dims.code_dim
            && model.generator.output_size() == model.dims.pixels()
            && model.classifier.shape() == [model.dims.code_dim, model.dims.codes]
            && model.codebook.codes().shape() == [model.dims.code_dim, model.dims.codes];
        if !shapes_ok {
            return Err(DmmError::dim("model", "parameters do not match the dims record"));
        }
        Ok(model)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    /// Network parameters in a fixed order: input encoder, pair encoder,
    /// generator; weight before bias within each layer.
    pub fn network_tensors(&self) -> Vec<&Tensor> {
        self.input_encoder
            .tensors()
            .chain(self.pair_encoder.tensors())
            .chain(self.generator.tensors())
            .collect()
    }

    pub fn network_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.input_encoder
            .tensors_mut()
            .chain(self.pair_encoder.tensors_mut())
            .chain(self.generator.tensors_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.input_encoder.param_count() + self.pair_encoder.param_count() + self.generator.param_count()
    }

    /// Records every parameter on `tape`. The classifier and the codes are
    /// recorded as constants unless the corresponding flag asks for their
    /// gradient.
    pub fn bind(&self, tape: &mut Tape, train_classifier: bool, train_codes: bool) -> BoundModel {
        let input_encoder = self.input_encoder.bind(tape);
        let pair_encoder = self.pair_encoder.bind(tape);
        let generator = self.generator.bind(tape);
        let classifier = if train_classifier {
            tape.param(&self.classifier)
        } else {
            tape.constant(self.classifier.clone())
        };
        let codes = if train_codes {
            tape.param(self.codebook.codes())
        } else {
            tape.constant(self.codebook.codes().clone())
        };
        BoundModel {
            dims: self.dims.clone(),
            input_encoder,
            pair_encoder,
            generator,
            classifier,
            codes,
        }
    }

    fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if (height, width) != (self.dims.height, self.dims.width) {
            return Err(DmmError::dim(
                "model input",
                format!(
                    "{height}x{width} image for a {}x{} model",
                    self.dims.height, self.dims.width
                ),
            ));
        }
        Ok(())
    }

    /// `(l, h)` for a single image.
    pub fn encode_input(&self, x: &Image) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_image(x.height(), x.width())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let xv = tape.constant(Tensor::matrix(1, self.dims.pixels(), x.data().to_vec())?);
        let (l, h) = bound.encode_input(&mut tape, xv)?;
        Ok((tape.value(l).data().to_vec(), tape.value(h).data().to_vec()))
    }

    pub fn encode_pair(&self, x: &Image, y: &Mask) -> Result<Vec<f32>> {
        self.check_image(x.height(), x.width())?;
        self.check_image(y.height(), y.width())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let xv = tape.constant(Tensor::matrix(1, self.dims.pixels(), x.data().to_vec())?);
        let yv = tape.constant(Tensor::matrix(1, self.dims.pixels(), y.as_f32())?);
        let z = bound.encode_pair(&mut tape, xv, yv)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Decodes one output per code from a shared latent `l`.
    pub fn generate(&self, l: &[f32], codes: &[Vec<f32>]) -> Result<Vec<Image>> {
        let (latent, m) = (self.dims.latent, self.dims.code_dim);
        if l.len() != latent || codes.iter().any(|c| c.len() != m) {
            return Err(DmmError::dim("generate", format!("expected l in R^{latent}, codes in R^{m}")));
        }
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        let rows = codes.len();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let lv = tape.constant(Tensor::matrix(rows, latent, l.repeat(rows))?);
        let cv = tape.constant(Tensor::matrix(rows, m, codes.concat())?);
        let y = bound.generate(&mut tape, lv, cv)?;
        let out = tape.value(y);
        (0..rows)
            .map(|r| Image::new(self.dims.height, self.dims.width, out.row(r).to_vec()))
            .collect()
    }
}

/// A [`DmmModel`] recorded on a tape.
pub struct BoundModel {
    dims: Dims,
    pub input_encoder: BoundMlp,
    pub pair_encoder: BoundMlp,
    pub generator: BoundMlp,
    pub classifier: Var,
    pub codes: Var,
}

impl BoundModel {
    fn check_cols(&self, tape: &Tape, v: Var, cols: usize, what: &'static str) -> Result<usize> {
        let (rows, c) = tape.value(v).dims2()?;
        if c != cols {
            return Err(DmmError::dim(what, format!("expected {cols} columns, got {c}")));
        }
        Ok(rows)
    }

    /// Latent `l` (`B × L`) and probability feature `h` (`B × m`).
    pub fn encode_input(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.check_cols(tape, x, self.dims.pixels(), "encode_input")?;
        let out = self.input_encoder.forward(tape, x)?;
        let l = tape.slice_cols(out, 0, self.dims.latent)?;
        let h = tape.slice_cols(out, self.dims.latent, self.dims.latent + self.dims.code_dim)?;
        Ok((l, h))
    }

    /// Pair feature `z` (`B × m`) from inputs and labels.
    pub fn encode_pair(&self, tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
        let bx = self.check_cols(tape, x, self.dims.pixels(), "encode_pair")?;
        let by = self.check_cols(tape, y, self.dims.pixels(), "encode_pair")?;
        if bx != by {
            return Err(DmmError::dim("encode_pair", format!("{bx} inputs vs {by} labels")));
        }
        let xy = tape.concat_cols(x, y)?;
        self.pair_encoder.forward(tape, xy)
    }

    /// Replaces every row of `z` by its nearest code. Forward values are the
    /// codes; the backward pass hands the gradient to `z` untouched and
    /// nothing to the codebook.
    pub fn straight_through(&self, tape: &mut Tape, z: Var, cb: &Codebook) -> Result<(Var, Vec<usize>)> {
        straight_through(tape, z, cb)
    }

    /// Sigmoid outputs (`B × H·W`) from latents and codes.
    pub fn generate(&self, tape: &mut Tape, l: Var, code: Var) -> Result<Var> {
        let bl = self.check_cols(tape, l, self.dims.latent, "generate")?;
        let bc = self.check_cols(tape, code, self.dims.code_dim, "generate")?;
        if bl != bc {
            return Err(DmmError::dim("generate", format!("{bl} latents vs {bc} codes")));
        }
        let joined = tape.concat_cols(l, code)?;
        let logits = self.generator.forward(tape, joined)?;
        Ok(tape.sigmoid(logits))
    }

    /// Every network parameter node, in [`DmmModel::network_tensors`] order.
    pub fn network_vars(&self) -> Vec<Var> {
        self.input_encoder
            .vars()
            .chain(self.pair_encoder.vars())
            .chain(self.generator.vars())
            .collect()
    }
}

/// Nearest-code substitution with a straight-through gradient, for a
/// `B × m` feature batch.
pub fn straight_through(tape: &mut Tape, z: Var, cb: &Codebook) -> Result<(Var, Vec<usize>)> {
    let (rows, m) = tape.value(z).dims2()?;
    if m != cb.dim() {
        return Err(DmmError::dim(
            "straight_through",
            format!("features in R^{m}, codes in R^{}", cb.dim()),
        ));
    }
    let mut indices = Vec::with_capacity(rows);
    let mut quantized = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let (j, code) = cb.nearest_code(tape.value(z).row(r))?;
        indices.push(j);
        quantized.extend(code);
    }
    let q = tape.straight_through(z, Tensor::matrix(rows, m, quantized)?)?;
    Ok((q, indices))
}

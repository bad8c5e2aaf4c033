//! Variational autoencoder over two-channel facies images.
//!
//! Dense layers with hand-written backpropagation. The encoder emits `μ` and
//! `log σ²`; training samples `z = μ + σ ⊙ ẑ` with `ẑ ~ N(0, I)`; the decoder
//! ends in a sigmoid per output channel. Assimilation uses the deterministic
//! code `z = μ`.

mod io;
mod train;

pub use train::{vae_train, Adam, EpochLog, TrainLog, VaeTrainConfig};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::facies::{facies_to_channels, FaciesRealization, Grid2D};
use crate::param::{binarize, LatentVector, Parameterization};
use crate::rng::StreamRng;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    CrossEntropy,
    MeanSquaredError,
}

impl ReconstructionLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconstructionLoss::CrossEntropy => "cross_entropy",
            ReconstructionLoss::MeanSquaredError => "mean_squared_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    /// Grid cells per channel; the input and output have `2 * cells` entries.
    pub cells: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub reconstruction: ReconstructionLoss,
}

impl VaeArchitecture {
    /// Dense counterpart of the reference convolutional network: a 2048-unit
    /// encoder layer, 500 latent units, then 2048 and 7200 decoder units.
    pub fn reference(cells: usize) -> Self {
        VaeArchitecture {
            cells,
            encoder_hidden: vec![2048],
            latent_dim: 500,
            decoder_hidden: vec![2048, 7200],
            activation: Activation::Relu,
            reconstruction: ReconstructionLoss::CrossEntropy,
        }
    }

    /// Reduced network used for desk-scale runs.
    pub fn desk(cells: usize, latent_dim: usize) -> Self {
        VaeArchitecture {
            cells,
            encoder_hidden: vec![256],
            latent_dim,
            decoder_hidden: vec![256],
            activation: Activation::Relu,
            reconstruction: ReconstructionLoss::CrossEntropy,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.latent_dim == 0 {
            return Err(Error::config("VAE cells and latent_dim must be at least 1"));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::config("VAE hidden widths must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Layer {
            w: DMatrix::zeros(out, inp),
            b: DVector::zeros(out),
        }
    }

    fn init(out: usize, inp: usize, rng: &mut StreamRng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        Layer {
            w: DMatrix::from_fn(out, inp, |_, _| rng.gen_range(-limit..limit)),
            b: DVector::zeros(out),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.w * x;
        for mut col in a.column_iter_mut() {
            col += &self.b;
        }
        a
    }
}

/// Encoder layers, the two latent heads, and decoder layers (last one is the
/// sigmoid output layer). The same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParameters {
    pub encoder: Vec<Layer>,
    pub mu: Layer,
    pub logvar: Layer,
    pub decoder: Vec<Layer>,
}

impl VaeParameters {
    pub fn init(arch: &VaeArchitecture, rng: &mut StreamRng) -> Result<Self> {
        arch.validate()?;
        let mut encoder = Vec::new();
        let mut prev = arch.input_dim();
        for &w in &arch.encoder_hidden {
            encoder.push(Layer::init(w, prev, rng));
            prev = w;
        }
        let mu = Layer::init(arch.latent_dim, prev, rng);
        let mut logvar = Layer::init(arch.latent_dim, prev, rng);
        logvar.w *= 0.1;
        let mut decoder = Vec::new();
        let mut prev = arch.latent_dim;
        for &w in &arch.decoder_hidden {
            decoder.push(Layer::init(w, prev, rng));
            prev = w;
        }
        decoder.push(Layer::init(arch.input_dim(), prev, rng));
        Ok(VaeParameters {
            encoder,
            mu,
            logvar,
            decoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.w.nrows(), l.w.ncols());
        VaeParameters {
            encoder: self.encoder.iter().map(z).collect(),
            mu: z(&self.mu),
            logvar: z(&self.logvar),
            decoder: self.decoder.iter().map(z).collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder
            .iter()
            .chain([&self.mu, &self.logvar])
            .chain(&self.decoder)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder
            .iter_mut()
            .chain([&mut self.mu, &mut self.logvar])
            .chain(&mut self.decoder)
    }

    pub fn len(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in a fixed order: per layer, weights column-major then bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in self.layers() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn get_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in self.layers_mut() {
            let (nw, nb) = (l.w.len(), l.b.len());
            if index < nw {
                return &mut l.w.as_mut_slice()[index];
            }
            index -= nw;
            if index < nb {
                return &mut l.b[index];
            }
            index -= nb;
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn add_assign(&mut self, other: &VaeParameters) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    fn check_shapes(&self, arch: &VaeArchitecture) -> Result<()> {
        let mut expected = Vec::new();
        let mut prev = arch.input_dim();
        for &w in &arch.encoder_hidden {
            expected.push((w, prev));
            prev = w;
        }
        expected.push((arch.latent_dim, prev));
        expected.push((arch.latent_dim, prev));
        let mut prev = arch.latent_dim;
        for &w in &arch.decoder_hidden {
            expected.push((w, prev));
            prev = w;
        }
        expected.push((arch.input_dim(), prev));
        let got: Vec<(usize, usize)> = self.layers().map(|l| l.w.shape()).collect();
        if got != expected || self.layers().any(|l| l.b.len() != l.w.nrows()) {
            return Err(Error::config(format!(
                "VAE parameter shapes {got:?} do not match architecture {expected:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl LossParts {
    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.reconstruction.is_finite() && self.kl.is_finite()
    }
}

/// KL divergence of `N(μ, σ²)` from `N(0, 1)`, summed over components.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

struct StackCache {
    /// Inputs to each layer, then the final output.
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

fn run_stack(layers: &[Layer], x: &DMatrix<f64>, act: Activation, last_linear: bool) -> StackCache {
    let mut acts = vec![x.clone()];
    let mut pre = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        let a = l.forward(acts.last().unwrap());
        let h = if last_linear && k + 1 == layers.len() {
            a.clone()
        } else {
            a.map(|v| act.apply(v))
        };
        pre.push(a);
        acts.push(h);
    }
    StackCache { acts, pre }
}

/// Backpropagate `delta` (gradient w.r.t. the stack output) and accumulate
/// layer gradients; returns the gradient w.r.t. the stack input.
fn back_stack(
    layers: &[Layer],
    cache: &StackCache,
    mut delta: DMatrix<f64>,
    act: Activation,
    last_linear: bool,
    grads: &mut [Layer],
) -> DMatrix<f64> {
    for k in (0..layers.len()).rev() {
        if !(last_linear && k + 1 == layers.len()) {
            let (a, h) = (&cache.pre[k], &cache.acts[k + 1]);
            delta.zip_zip_apply(a, h, |d, a, h| *d *= act.derivative(a, h));
        }
        grads[k].w += &delta * cache.acts[k].transpose();
        grads[k].b += delta.column_sum();
        delta = layers[k].w.tr_mul(&delta);
    }
    delta
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Loss and, optionally, gradients for one batch. `batch` is `2N_x × B`,
/// `noise` the `N_z × B` reparameterization draw.
fn loss_and_grad(
    arch: &VaeArchitecture,
    params: &VaeParameters,
    batch: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<VaeParameters>)> {
    check_dim("batch rows", arch.input_dim(), batch.nrows())?;
    check_dim("noise rows", arch.latent_dim, noise.nrows())?;
    check_dim("noise columns", batch.ncols(), noise.ncols())?;
    if batch.ncols() == 0 {
        return Err(Error::config("VAE batch must be nonempty"));
    }
    let bsz = batch.ncols() as f64;
    let nout = arch.input_dim() as f64;

    let enc = run_stack(&params.encoder, batch, arch.activation, false);
    let h = enc.acts.last().unwrap();
    let mu = params.mu.forward(h);
    let logvar = params.logvar.forward(h);
    let sigma = logvar.map(|v| (0.5 * v).exp());
    let z = &mu + sigma.component_mul(noise);
    let dec = run_stack(&params.decoder, &z, arch.activation, true);
    let logits = dec.acts.last().unwrap();
    let probs = logits.map(sigmoid);

    let (recon_sum, dprob) = match arch.reconstruction {
        ReconstructionLoss::CrossEntropy => {
            let mut sum = 0.0;
            let mut d = DMatrix::zeros(probs.nrows(), probs.ncols());
            for ((p, x), dv) in probs.iter().zip(batch.iter()).zip(d.iter_mut()) {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                sum -= x * pc.ln() + (1.0 - x) * (1.0 - pc).ln();
                if *p > PROB_EPS && *p < 1.0 - PROB_EPS {
                    *dv = -(x / pc - (1.0 - x) / (1.0 - pc)) / (bsz * nout);
                }
            }
            (sum, d)
        }
        ReconstructionLoss::MeanSquaredError => {
            let diff = &probs - batch;
            (diff.norm_squared(), diff * (2.0 / (bsz * nout)))
        }
    };
    let reconstruction = recon_sum / (bsz * nout);
    let kl = mu
        .iter()
        .zip(logvar.iter())
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
        * 0.5
        / bsz;
    let parts = LossParts {
        total: reconstruction + kl_weight * kl,
        reconstruction,
        kl,
    };
    if !want_grad {
        return Ok((parts, None));
    }

    let mut grads = params.zeros_like();
    let dlogits = dprob.component_mul(&probs.map(|p| p * (1.0 - p)));
    let dz = back_stack(
        &params.decoder,
        &dec,
        dlogits,
        arch.activation,
        true,
        &mut grads.decoder,
    );
    let mut dmu = dz.clone();
    dmu += &mu * (kl_weight / bsz);
    let mut dlogvar = dz.component_mul(noise).component_mul(&sigma) * 0.5;
    dlogvar += logvar.map(|lv| 0.5 * (lv.exp() - 1.0) * kl_weight / bsz);

    grads.mu.w += &dmu * h.transpose();
    grads.mu.b += dmu.column_sum();
    grads.logvar.w += &dlogvar * h.transpose();
    grads.logvar.b += dlogvar.column_sum();
    let dh = params.mu.w.tr_mul(&dmu) + params.logvar.w.tr_mul(&dlogvar);
    back_stack(
        &params.encoder,
        &enc,
        dh,
        arch.activation,
        false,
        &mut grads.encoder,
    );
    Ok((parts, Some(grads)))
}

pub fn vae_loss(
    arch: &VaeArchitecture,
    params: &VaeParameters,
    batch: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
) -> Result<LossParts> {
    loss_and_grad(arch, params, batch, noise, kl_weight, false).map(|(l, _)| l)
}

/// Loss plus exact gradients of `total` with respect to every parameter.
pub fn vae_backward(
    arch: &VaeArchitecture,
    params: &VaeParameters,
    batch: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    kl_weight: f64,
) -> Result<(LossParts, VaeParameters)> {
    loss_and_grad(arch, params, batch, noise, kl_weight, true).map(|(l, g)| (l, g.unwrap()))
}

pub fn draw_noise(latent_dim: usize, cols: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(latent_dim, cols, |_, _| StandardNormal.sample(rng))
}

/// Stack the two-channel images of `xs` as columns.
pub fn batch_matrix(xs: &[&FaciesRealization]) -> DMatrix<f64> {
    let rows = xs.first().map_or(0, |x| 2 * x.grid().len());
    let mut m = DMatrix::zeros(rows, xs.len());
    for (j, x) in xs.iter().enumerate() {
        m.column_mut(j).copy_from_slice(&facies_to_channels(x).data);
    }
    m
}

/// A trained network bound to its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub grid: Grid2D,
    pub arch: VaeArchitecture,
    pub params: VaeParameters,
}

impl VaeModel {
    pub fn new(grid: Grid2D, arch: VaeArchitecture, params: VaeParameters) -> Result<Self> {
        arch.validate()?;
        check_dim("VAE cells", grid.len(), arch.cells)?;
        params.check_shapes(&arch)?;
        Ok(VaeModel { grid, arch, params })
    }

    /// `μ` for every column of a `2N_x × B` batch.
    pub fn encode_batch(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("batch rows", self.arch.input_dim(), batch.nrows())?;
        let enc = run_stack(&self.params.encoder, batch, self.arch.activation, false);
        Ok(self.params.mu.forward(enc.acts.last().unwrap()))
    }

    /// Output-layer pre-activations (`2N_x × B`) for latent columns.
    pub fn decode_logits(&self, latents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("latent rows", self.arch.latent_dim, latents.nrows())?;
        let mut dec = run_stack(&self.params.decoder, latents, self.arch.activation, true);
        Ok(dec.acts.pop().unwrap())
    }

    /// Sigmoid outputs (`2N_x × B`) for latent columns.
    pub fn decode_batch(&self, latents: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.decode_logits(latents)?.map(sigmoid))
    }

    fn hidden_before_output(&self, latents: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.params.decoder.len();
        let dec = run_stack(&self.params.decoder[..n - 1], latents, self.arch.activation, false);
        dec.acts.last().unwrap().clone()
    }

    /// Highest activation per cell, compared on logits (sigmoid is monotone
    /// and saturates in floating point); ties go to background.
    fn facies_from_logits(&self, out: &[f64]) -> Result<FaciesRealization> {
        let n = self.grid.len();
        let values = (0..n).map(|k| u8::from(out[n + k] > out[k])).collect();
        FaciesRealization::new(self.grid, values)
    }

    pub fn smooth(&self, x: &FaciesRealization) -> Result<FaciesRealization> {
        vae_smooth(self, x)
    }
}

/// Re-encode and decode a realization to strip unstructured noise.
pub fn vae_smooth(model: &VaeModel, x: &FaciesRealization) -> Result<FaciesRealization> {
    let z = model.encode(x)?;
    model.realize(&z.values)
}

impl Parameterization for VaeModel {
    fn name(&self) -> &'static str {
        "vae"
    }

    fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn grid_shaped(&self) -> bool {
        self.arch.latent_dim == self.grid.len()
    }

    fn encode(&self, x: &FaciesRealization) -> Result<LatentVector> {
        if !x.grid().same_shape(&self.grid) {
            return Err(Error::Dimension {
                what: "realization grid",
                expected: self.grid.len(),
                got: x.grid().len(),
            });
        }
        let mu = self.encode_batch(&batch_matrix(&[x]))?;
        LatentVector::new(mu.as_slice().to_vec(), self.grid_shaped())
    }

    /// Channel-1 probability per cell.
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("latent vector", self.arch.latent_dim, z.len())?;
        let out = self.decode_batch(&DMatrix::from_column_slice(z.len(), 1, z))?;
        Ok(out.as_slice()[self.grid.len()..].to_vec())
    }

    fn binarize(&self, field: &[f64]) -> Result<FaciesRealization> {
        binarize(&self.grid, field, 0.5)
    }

    fn realize(&self, z: &[f64]) -> Result<FaciesRealization> {
        check_dim("latent vector", self.arch.latent_dim, z.len())?;
        let out = self.decode_logits(&DMatrix::from_column_slice(z.len(), 1, z))?;
        self.facies_from_logits(out.as_slice())
    }

    fn realize_cell_batch(&self, latents: &DMatrix<f64>, cell: usize) -> Result<Vec<u8>> {
        check_dim("latent rows", self.arch.latent_dim, latents.nrows())?;
        let hidden = self.hidden_before_output(latents);
        let out = self.params.decoder.last().unwrap();
        let n = self.grid.len();
        let (r0, r1) = (out.w.row(cell), out.w.row(n + cell));
        Ok((0..hidden.ncols())
            .map(|j| {
                let h = hidden.column(j);
                let a0 = r0.dot(&h.transpose()) + out.b[cell];
                let a1 = r1.dot(&h.transpose()) + out.b[n + cell];
                u8::from(a1 > a0)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;

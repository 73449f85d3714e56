//! The composite network: one encoder producing `V`, a reconstruction decoder and a
//! prediction decoder that read nothing but `V`.

mod checkpoint;
mod config;
mod episode;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_kv, ModelConfig, Precision};
pub use episode::{EpisodeTensor, LatentVector};
pub use network::{init_params, Decoder, Layout, Mode, Network};
pub use train::{fit, train_step, EpochLog, FitReport, StepLog, StepReport, TrainConfig};

use crate::error::{contract, Result};
use crate::losses::LossBreakdown;
use crate::substrate::{Graph, ParamSet, RngStream, Scalar, Tensor, Var};

use episode::{cast_frames, check_frames};

/// Result of a full forward pass.
#[derive(Clone, Debug)]
pub struct CompositeOutput {
    /// Noiseless encoder output.
    pub latent: LatentVector,
    pub reconstruction: Vec<Tensor<f32>>,
    pub prediction: Vec<Tensor<f32>>,
    pub loss: LossBreakdown,
}

/// Network configuration plus parameters at precision `T`.
#[derive(Clone, Debug)]
pub struct CompositeModel<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<T>,
}

fn to_latent<T: Scalar>(t: &Tensor<T>) -> LatentVector {
    LatentVector::new(t.data().iter().map(|v| v.as_f64() as f32).collect())
}

fn to_frames<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<f32>> {
    vars.iter().map(|&v| g.value(v).cast()).collect()
}

impl<T: Scalar> CompositeModel<T> {
    /// Freshly initialized model; the seed fixes every initial weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut RngStream::new(seed))?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(CompositeModel { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn network(&self) -> Network<'_> {
        Network::new(&self.config, &self.layout)
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> CompositeModel<U> {
        CompositeModel { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    /// Encodes the first `k` frames of an episode (exactly `k` frames are expected).
    pub fn encode(&self, frames: &[Tensor<f32>], mode: Mode, rng: &mut RngStream) -> Result<LatentVector> {
        check_frames(frames, &self.config.frame_shape())?;
        let mut g = Graph::new(&self.params);
        let v = self.network().encode(&mut g, &cast_frames(frames), mode, rng)?;
        Ok(to_latent(g.value(v)))
    }

    /// Encodes a still image as if it had been observed for `k` frames.
    pub fn encode_static_scene(&self, frame: &Tensor<f32>) -> Result<LatentVector> {
        frame.expect_shape(&self.config.frame_shape())?;
        let tiled = vec![frame.clone(); self.config.enc_len];
        self.encode(&tiled, Mode::Eval, &mut RngStream::new(0))
    }

    fn decode(&self, v: &LatentVector, which: Decoder, mode: Mode, rng: &mut RngStream) -> Result<Vec<Tensor<f32>>> {
        if v.len() != self.config.latent_dim() {
            return Err(contract!("latent vector has length {}, expected {}", v.len(), self.config.latent_dim()));
        }
        let steps = match which {
            Decoder::Reconstruct => self.config.enc_len,
            Decoder::Predict => self.config.pred_len(),
        };
        let mut g = Graph::new(&self.params);
        let input = Tensor::new(&[v.len()], v.values.iter().map(|&x| T::of(x as f64)).collect())?;
        let v = g.input(input);
        let ys = self.network().decode(&mut g, v, which, steps, mode, rng)?;
        Ok(to_frames(&g, &ys))
    }

    pub fn decode_reconstruct(&self, v: &LatentVector, mode: Mode, rng: &mut RngStream) -> Result<Vec<Tensor<f32>>> {
        self.decode(v, Decoder::Reconstruct, mode, rng)
    }

    pub fn decode_predict(&self, v: &LatentVector, mode: Mode, rng: &mut RngStream) -> Result<Vec<Tensor<f32>>> {
        self.decode(v, Decoder::Predict, mode, rng)
    }

    fn build<'g>(
        &self,
        g: &mut Graph<'g, T>,
        episode: &EpisodeTensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Var, Vec<Var>, Vec<Var>, LossBreakdown, Var)> {
        episode.check(&self.config)?;
        let frames = cast_frames::<T>(&episode.frames);
        let net = self.network();
        let (v, yr, yp) = net.composite(g, &frames, mode, rng)?;
        let outputs: Vec<Var> = yr.iter().chain(&yp).copied().collect();
        let (mse, gd, total) = net.loss(g, &outputs, &frames)?;
        let scalar = |v: Var| g.value(v).data()[0].as_f64();
        let loss = LossBreakdown { mse: scalar(mse), gd: scalar(gd), combined: scalar(total) };
        Ok((v, yr, yp, loss, total))
    }

    /// Full pass over an `n`-frame episode, with the loss over all `n` ground-truth frames.
    pub fn forward(&self, episode: &EpisodeTensor, mode: Mode, rng: &mut RngStream) -> Result<CompositeOutput> {
        let mut g = Graph::new(&self.params);
        let (v, yr, yp, loss, _) = self.build(&mut g, episode, mode, rng)?;
        Ok(CompositeOutput {
            latent: to_latent(g.value(v)),
            reconstruction: to_frames(&g, &yr),
            prediction: to_frames(&g, &yp),
            loss,
        })
    }

    /// Combined loss of one episode and its gradient for every parameter (indexed like the
    /// parameter set; `None` for parameters the pass did not touch).
    pub fn loss_and_gradients(
        &self,
        episode: &EpisodeTensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new(&self.params);
        let (_, _, _, loss, total) = self.build(&mut g, episode, mode, rng)?;
        let grads = g.backward(total)?;
        Ok((loss, grads.params))
    }

    /// Combined loss evaluated with an external parameter set of the same layout.
    pub fn loss_with(&self, params: &ParamSet<T>, episode: &EpisodeTensor, mode: Mode, rng: &mut RngStream) -> Result<f64> {
        let mut g = Graph::new(params);
        let frames = cast_frames::<T>(&episode.frames);
        episode.check(&self.config)?;
        let net = self.network();
        let (_, yr, yp) = net.composite(&mut g, &frames, mode, rng)?;
        let outputs: Vec<Var> = yr.iter().chain(&yp).copied().collect();
        let (_, _, total) = net.loss(&mut g, &outputs, &frames)?;
        Ok(g.value(total).data()[0].as_f64())
    }
}

/// `V + ε` with `ε ~ N(0, σ²)` drawn independently per entry.
pub fn add_latent_noise(v: &LatentVector, sigma: f64, rng: &mut RngStream) -> Result<LatentVector> {
    if !(sigma >= 0.0) {
        return Err(crate::Error::Config(format!("noise level {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    Ok(LatentVector::new(v.values.iter().map(|&x| (x as f64 + sigma * rng.normal()) as f32).collect()))
}

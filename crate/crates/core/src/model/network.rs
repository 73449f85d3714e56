//! Parameter layout and graph construction for the encoder and the two decoders.

use crate::error::{contract, Result};
use crate::substrate::{
    convlstm_step, lstm_step, ConvLstmWeights, Graph, LstmWeights, Padding, ParamId, ParamSet, RngStream, Scalar,
    Tensor, Var,
};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout and latent noise active.
    Train,
    /// Deterministic: no dropout, no noise.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Reconstruct,
    Predict,
}

impl Decoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Decoder::Reconstruct => "rec",
            Decoder::Predict => "pred",
        }
    }
}

#[derive(Clone, Debug)]
enum Init {
    Zero,
    One,
    Glorot { fan_in: usize, fan_out: usize },
    /// Uniform in `±1/√fan_in`.
    Bias { fan_in: usize },
    /// [`Init::Bias`] with one added to the forget-gate block.
    ForgetBias { gate: usize, fan_in: usize },
}

/// Name, shape and initializer of every parameter, in a fixed order.
#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn norm(&mut self, base: &str, width: usize) {
        self.push(format!("{base}.ln_g"), vec![width], Init::One);
        self.push(format!("{base}.ln_b"), vec![width], Init::Zero);
    }

    fn conv(&mut self, base: &str, cout: usize, cin: usize, k: usize) {
        let fan = |c| c * k * k;
        self.push(format!("{base}.k"), vec![cout, cin, k, k], Init::Glorot { fan_in: fan(cin), fan_out: fan(cout) });
        self.push(format!("{base}.b"), vec![cout], Init::Bias { fan_in: fan(cin) });
    }

    fn tconv(&mut self, base: &str, cin: usize, cout: usize, k: usize) {
        let fan = |c| c * k * k;
        self.push(format!("{base}.k"), vec![cin, cout, k, k], Init::Glorot { fan_in: fan(cin), fan_out: fan(cout) });
        self.push(format!("{base}.b"), vec![cout], Init::Bias { fan_in: fan(cin) });
    }

    fn convlstm(&mut self, base: &str, cx: usize, ch: usize, k: usize) {
        let fan_in = (cx + ch) * k * k;
        let fan_out = 4 * ch * k * k;
        self.push(format!("{base}.k"), vec![4 * ch, cx + ch, k, k], Init::Glorot { fan_in, fan_out });
        self.push(format!("{base}.b"), vec![4 * ch], Init::ForgetBias { gate: ch, fan_in });
    }

    fn linear(&mut self, base: &str, out: usize, inp: usize) {
        self.push(format!("{base}.w"), vec![out, inp], Init::Glorot { fan_in: inp, fan_out: out });
        self.push(format!("{base}.b"), vec![out], Init::Bias { fan_in: inp });
    }

    fn lstm(&mut self, base: &str, inp: usize, d: usize) {
        self.push(format!("{base}.w"), vec![4 * d, inp + d], Init::Glorot { fan_in: inp + d, fan_out: 4 * d });
        self.push(format!("{base}.b"), vec![4 * d], Init::ForgetBias { gate: d, fan_in: inp + d });
    }
}

fn specs(cfg: &ModelConfig) -> Specs {
    let mut s = Specs::default();
    let k = cfg.kernel_size;
    let levels = cfg.levels();
    let top = cfg.top_size();
    let flat = cfg.conv_channels[levels - 1] * top * top;

    for i in 0..levels {
        let cx = if i == 0 { cfg.channels } else { cfg.conv_channels[i - 1] };
        let ch = cfg.convlstm_channels[i];
        s.convlstm(&format!("enc.convlstm{i}"), cx, ch, k);
        s.norm(&format!("enc.convlstm{i}"), ch);
        s.conv(&format!("enc.conv{i}"), cfg.conv_channels[i], ch, k);
        s.norm(&format!("enc.conv{i}"), cfg.conv_channels[i]);
    }
    s.linear("enc.fc", cfg.fc_width, flat);
    s.norm("enc.fc", cfg.fc_width);
    s.lstm("enc.lstm", cfg.fc_width, cfg.lstm_hidden);

    for dec in [Decoder::Reconstruct, Decoder::Predict] {
        let p = dec.prefix();
        s.lstm(&format!("{p}.lstm"), 0, cfg.lstm_hidden);
        s.norm(&format!("{p}.lstm"), cfg.lstm_hidden);
        s.linear(&format!("{p}.fc0"), cfg.fc_width, cfg.lstm_hidden);
        s.norm(&format!("{p}.fc0"), cfg.fc_width);
        s.linear(&format!("{p}.fc1"), flat, cfg.fc_width);
        s.norm(&format!("{p}.fc1"), flat);
        for i in (0..levels).rev() {
            let cin = if i == levels - 1 { cfg.conv_channels[i] } else { cfg.convlstm_channels[i + 1] };
            let ch = cfg.convlstm_channels[i];
            s.tconv(&format!("{p}.tconv{i}"), cin, ch, k);
            s.norm(&format!("{p}.tconv{i}"), ch);
            s.convlstm(&format!("{p}.convlstm{i}"), ch, ch, k);
            s.norm(&format!("{p}.convlstm{i}"), ch);
        }
        s.conv(&format!("{p}.out"), cfg.channels, cfg.convlstm_channels[0], k);
    }
    s
}

/// Fresh parameters: Glorot-uniform weights, biases uniform in ±1/√fan_in (plus one on LSTM
/// forget gates), unit norm gains.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    for spec in specs(cfg).0 {
        let n: usize = spec.shape.iter().product();
        let value = match spec.init {
            Init::Zero => Tensor::zeros(&spec.shape),
            Init::One => Tensor::full(&spec.shape, T::one()),
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| T::of(rng.uniform_range(-limit, limit)))
            }
            Init::Bias { fan_in } => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| T::of(rng.uniform_range(-limit, limit)))
            }
            Init::ForgetBias { gate, fan_in } => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |i| {
                    let forget = if (gate..2 * gate).contains(&i) { 1.0 } else { 0.0 };
                    T::of(forget + rng.uniform_range(-limit, limit))
                })
            }
        };
        debug_assert_eq!(value.len(), n);
        params.add(&spec.name, value)?;
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
    norm: Option<Norm>,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    lstm: Affine,
    fc0: Affine,
    fc1: Affine,
    /// Indexed by level, top level last.
    tconv: Vec<Affine>,
    convlstm: Vec<Affine>,
    out: Affine,
}

/// Parameter handles for a [`ParamSet`] created by [`init_params`] (or loaded with the same names).
#[derive(Clone, Debug)]
pub struct Layout {
    enc_convlstm: Vec<Affine>,
    enc_conv: Vec<Affine>,
    enc_fc: Affine,
    enc_lstm: Affine,
    rec: DecoderIds,
    pred: DecoderIds,
}

impl Layout {
    /// Resolves every expected parameter by name and checks its shape.
    pub fn resolve<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let specs = specs(cfg);
        if params.len() != specs.0.len() {
            return Err(contract!("parameter set has {} entries, model expects {}", params.len(), specs.0.len()));
        }
        for spec in &specs.0 {
            let id = params.id(&spec.name)?;
            if params.value(id).shape() != spec.shape.as_slice() {
                return Err(contract!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    spec.name,
                    params.value(id).shape(),
                    spec.shape
                ));
            }
        }
        let id = |name: String| params.id(&name);
        let norm = |base: &str| -> Result<Norm> { Ok(Norm { g: id(format!("{base}.ln_g"))?, b: id(format!("{base}.ln_b"))? }) };
        let affine = |base: &str, wname: &str, normed: bool| -> Result<Affine> {
            Ok(Affine {
                w: id(format!("{base}.{wname}"))?,
                b: id(format!("{base}.b"))?,
                norm: if normed { Some(norm(base)?) } else { None },
            })
        };
        let levels = cfg.levels();
        let decoder = |p: &str| -> Result<DecoderIds> {
            Ok(DecoderIds {
                lstm: affine(&format!("{p}.lstm"), "w", true)?,
                fc0: affine(&format!("{p}.fc0"), "w", true)?,
                fc1: affine(&format!("{p}.fc1"), "w", true)?,
                tconv: (0..levels).map(|i| affine(&format!("{p}.tconv{i}"), "k", true)).collect::<Result<_>>()?,
                convlstm: (0..levels).map(|i| affine(&format!("{p}.convlstm{i}"), "k", true)).collect::<Result<_>>()?,
                out: affine(&format!("{p}.out"), "k", false)?,
            })
        };
        Ok(Layout {
            enc_convlstm: (0..levels).map(|i| affine(&format!("enc.convlstm{i}"), "k", true)).collect::<Result<_>>()?,
            enc_conv: (0..levels).map(|i| affine(&format!("enc.conv{i}"), "k", true)).collect::<Result<_>>()?,
            enc_fc: affine("enc.fc", "w", true)?,
            enc_lstm: affine("enc.lstm", "w", false)?,
            rec: decoder(Decoder::Reconstruct.prefix())?,
            pred: decoder(Decoder::Predict.prefix())?,
        })
    }

    fn decoder(&self, which: Decoder) -> &DecoderIds {
        match which {
            Decoder::Reconstruct => &self.rec,
            Decoder::Predict => &self.pred,
        }
    }
}

/// Builds the forward computation on a [`Graph`]. Stateless apart from the borrowed config and layout.
pub struct Network<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
}

struct Ctx<'r> {
    mode: Mode,
    rate: f64,
    eps: f64,
    rng: &'r mut RngStream,
}

impl Ctx<'_> {
    fn norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var, n: Option<Norm>) -> Result<Var> {
        match n {
            Some(n) => {
                let (gain, bias) = (g.param(n.g), g.param(n.b));
                g.layer_norm(x, gain, bias, self.eps)
            }
            None => Ok(x),
        }
    }

    fn drop<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.dropout(x, self.rate, self.rng, self.mode.is_train())
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, x: Var, a: Affine, stride: usize) -> Result<Var> {
        let (k, b) = (g.param(a.w), g.param(a.b));
        g.conv2d(x, k, b, stride, Padding::Same)
    }

    fn tconv<T: Scalar>(&self, g: &mut Graph<T>, x: Var, a: Affine) -> Result<Var> {
        let (k, b) = (g.param(a.w), g.param(a.b));
        g.transposed_conv2d(x, k, b, 2, Padding::Same)
    }

    /// Affine layer followed by layer norm, tanh and dropout.
    fn dense<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, a: Affine) -> Result<Var> {
        let (w, b) = (g.param(a.w), g.param(a.b));
        let y = g.linear(x, w, Some(b))?;
        let y = self.norm(g, y, a.norm)?;
        let y = g.tanh(y);
        self.drop(g, y)
    }
}

fn zero_state<T: Scalar>(g: &mut Graph<T>, shape: &[usize]) -> (Var, Var) {
    (g.input(Tensor::zeros(shape)), g.input(Tensor::zeros(shape)))
}

fn lstm_weights<T: Scalar>(g: &mut Graph<T>, a: Affine) -> LstmWeights {
    LstmWeights { w: g.param(a.w), b: g.param(a.b) }
}

fn convlstm_weights<T: Scalar>(g: &mut Graph<T>, a: Affine) -> ConvLstmWeights {
    ConvLstmWeights { k: g.param(a.w), b: g.param(a.b) }
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout) -> Self {
        Network { cfg, layout }
    }

    fn ctx<'r>(&self, mode: Mode, rng: &'r mut RngStream) -> Ctx<'r> {
        Ctx { mode, rate: self.cfg.dropout, eps: self.cfg.layer_norm_eps, rng }
    }

    /// Runs the encoder over `frames` and returns the node holding `V = h_k ‖ c_k`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, frames: &[Tensor<T>], mode: Mode, rng: &mut RngStream) -> Result<Var> {
        let cfg = self.cfg;
        if frames.len() != cfg.enc_len {
            return Err(contract!("encoder expects {} frames, got {}", cfg.enc_len, frames.len()));
        }
        let lay = self.layout;
        let mut cx = self.ctx(mode, rng);
        let levels = cfg.levels();
        let mut states: Vec<(Var, Var)> = (0..levels)
            .map(|i| {
                let side = cfg.frame_size >> i;
                zero_state(g, &[cfg.convlstm_channels[i], side, side])
            })
            .collect();
        let (mut h, mut c) = zero_state(g, &[cfg.lstm_hidden]);
        let flat = cfg.conv_channels[levels - 1] * cfg.top_size() * cfg.top_size();

        for frame in frames {
            frame.expect_shape(&cfg.frame_shape())?;
            let mut z = g.input(frame.clone());
            for i in 0..levels {
                let w = convlstm_weights(g, lay.enc_convlstm[i]);
                let (hs, cs) = convlstm_step(g, z, states[i].0, states[i].1, &w)?;
                states[i] = (hs, cs);
                z = cx.norm(g, hs, lay.enc_convlstm[i].norm)?;
                z = cx.drop(g, z)?;
                z = cx.conv(g, z, lay.enc_conv[i], 2)?;
                z = cx.norm(g, z, lay.enc_conv[i].norm)?;
                z = g.tanh(z);
                z = cx.drop(g, z)?;
            }
            let z = g.reshape(z, &[flat])?;
            let z = cx.dense(g, z, lay.enc_fc)?;
            let w = lstm_weights(g, lay.enc_lstm);
            (h, c) = lstm_step(g, Some(z), h, c, &w)?;
        }
        g.concat(&[h, c])
    }

    /// Adds `N(0, σ²)` noise to `v` as a constant offset.
    pub fn add_noise<T: Scalar>(&self, g: &mut Graph<T>, v: Var, rng: &mut RngStream) -> Result<Var> {
        let sigma = self.cfg.latent_noise;
        if sigma == 0.0 {
            return Ok(v);
        }
        let noise = Tensor::from_fn(g.shape(v), |_| T::of(sigma * rng.normal()));
        let noise = g.input(noise);
        g.add(v, noise)
    }

    /// Unrolls one decoder from `v` for `steps` frames.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        v: Var,
        which: Decoder,
        steps: usize,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Vec<Var>> {
        let cfg = self.cfg;
        let d = cfg.lstm_hidden;
        if g.shape(v) != [2 * d] {
            return Err(contract!("latent vector has shape {:?}, expected [{}]", g.shape(v), 2 * d));
        }
        let ids = self.layout.decoder(which);
        let mut cx = self.ctx(mode, rng);
        let levels = cfg.levels();
        let top = cfg.top_size();
        let mut h = g.slice(v, 0, d)?;
        let mut c = g.slice(v, d, d)?;
        let mut states: Vec<(Var, Var)> = (0..levels)
            .map(|i| {
                let side = cfg.frame_size >> i;
                zero_state(g, &[cfg.convlstm_channels[i], side, side])
            })
            .collect();

        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let w = lstm_weights(g, ids.lstm);
            (h, c) = lstm_step(g, None, h, c, &w)?;
            let z = cx.norm(g, h, ids.lstm.norm)?;
            let z = cx.drop(g, z)?;
            let z = cx.dense(g, z, ids.fc0)?;
            let z = cx.dense(g, z, ids.fc1)?;
            let mut z = g.reshape(z, &[cfg.conv_channels[levels - 1], top, top])?;
            for i in (0..levels).rev() {
                z = cx.tconv(g, z, ids.tconv[i])?;
                z = cx.norm(g, z, ids.tconv[i].norm)?;
                z = g.tanh(z);
                z = cx.drop(g, z)?;
                let w = convlstm_weights(g, ids.convlstm[i]);
                let (hs, cs) = convlstm_step(g, z, states[i].0, states[i].1, &w)?;
                states[i] = (hs, cs);
                z = cx.norm(g, hs, ids.convlstm[i].norm)?;
                z = cx.drop(g, z)?;
            }
            let y = cx.conv(g, z, ids.out, 1)?;
            out.push(g.sigmoid(y));
        }
        Ok(out)
    }

    /// Full composite pass; returns `(V, Y_r, Y_p)`.
    pub fn composite<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        frames: &[Tensor<T>],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let cfg = self.cfg;
        if frames.len() != cfg.seq_len {
            return Err(contract!("episode has {} frames, expected {}", frames.len(), cfg.seq_len));
        }
        let mut enc_rng = rng.fork(0);
        let mut noise_rng = rng.fork(1);
        let mut rec_rng = rng.fork(2);
        let mut pred_rng = rng.fork(3);
        let v = self.encode(g, &frames[..cfg.enc_len], mode, &mut enc_rng)?;
        let fed = if mode.is_train() { self.add_noise(g, v, &mut noise_rng)? } else { v };
        let yr = self.decode(g, fed, Decoder::Reconstruct, cfg.enc_len, mode, &mut rec_rng)?;
        let yp = self.decode(g, fed, Decoder::Predict, cfg.pred_len(), mode, &mut pred_rng)?;
        Ok((v, yr, yp))
    }

    /// Builds the combined loss over all `n` frames; returns `(mse, gd, combined)` nodes.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, outputs: &[Var], targets: &[Tensor<T>]) -> Result<(Var, Var, Var)> {
        let mse = g.seq_mse(outputs, targets)?;
        let gd = g.seq_gd(outputs, targets)?;
        let eta = self.cfg.eta;
        let total = g.weighted_sum(&[(mse, T::of(1.0 - eta)), (gd, T::of(eta))])?;
        Ok((mse, gd, total))
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::DEFAULT_ETA;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Architecture and loss hyper-parameters of the composite network.
///
/// The encoder alternates `convlstm_channels[i]` convLSTM layers with stride-2 convolutions of
/// width `conv_channels[i]`, then applies a fully connected layer of `fc_width` units and a
/// fully connected LSTM of `lstm_hidden` units. The latent vector concatenates that LSTM's final
/// hidden and cell states, so its length is `2 * lstm_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub channels: usize,
    pub seq_len: usize,
    pub enc_len: usize,
    pub convlstm_channels: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub fc_width: usize,
    pub lstm_hidden: usize,
    pub latent_noise: f64,
    pub dropout: f64,
    pub eta: f64,
    pub layer_norm_eps: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    /// Desk-scale network for 32×32 RGB episodes of 10 frames.
    fn default() -> Self {
        ModelConfig {
            frame_size: 32,
            channels: 3,
            seq_len: 10,
            enc_len: 5,
            convlstm_channels: vec![16, 32, 64],
            conv_channels: vec![32, 64, 64],
            kernel_size: 3,
            fc_width: 256,
            lstm_hidden: 64,
            latent_noise: 0.1,
            dropout: 0.15,
            eta: DEFAULT_ETA,
            layer_norm_eps: 1e-5,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// 128×128 frames with a 2000-dimensional latent vector.
    pub fn full_scale() -> Self {
        ModelConfig {
            frame_size: 128,
            convlstm_channels: vec![32, 64, 64, 128],
            conv_channels: vec![32, 64, 128, 128],
            fc_width: 1000,
            lstm_hidden: 1000,
            ..ModelConfig::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn pred_len(&self) -> usize {
        self.seq_len - self.enc_len
    }

    pub fn levels(&self) -> usize {
        self.convlstm_channels.len()
    }

    /// Spatial extent at the top of the convolutional stack.
    pub fn top_size(&self) -> usize {
        self.frame_size >> self.levels()
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.frame_size, self.frame_size]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_len < 1 || self.enc_len >= self.seq_len {
            return bad(format!("need 1 <= k < n, got k={} n={}", self.enc_len, self.seq_len));
        }
        if self.convlstm_channels.is_empty() || self.convlstm_channels.len() != self.conv_channels.len() {
            return bad("convlstm_channels and conv_channels must be non-empty and equally long".into());
        }
        let factor = 1usize << self.levels();
        if self.frame_size == 0 || self.frame_size % factor != 0 {
            return bad(format!("frame_size {} must be a multiple of {}", self.frame_size, factor));
        }
        let widths = self.convlstm_channels.iter().chain(&self.conv_channels);
        if self.channels == 0 || self.fc_width == 0 || self.lstm_hidden == 0 || widths.clone().any(|&w| w == 0) {
            return bad("all layer widths must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} must lie in [0,1]", self.eta));
        }
        if !(self.latent_noise >= 0.0) {
            return bad(format!("latent noise {} must be non-negative", self.latent_noise));
        }
        if !(0.0..=0.2).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 0.2]", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "frame_size={}", self.frame_size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "seq_len={}", self.seq_len);
        let _ = writeln!(s, "enc_len={}", self.enc_len);
        let _ = writeln!(s, "convlstm_channels={}", list(&self.convlstm_channels));
        let _ = writeln!(s, "conv_channels={}", list(&self.conv_channels));
        let _ = writeln!(s, "kernel_size={}", self.kernel_size);
        let _ = writeln!(s, "fc_width={}", self.fc_width);
        let _ = writeln!(s, "lstm_hidden={}", self.lstm_hidden);
        let _ = writeln!(s, "latent_noise={}", self.latent_noise);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "eta={}", self.eta);
        let _ = writeln!(s, "layer_norm_eps={}", self.layer_norm_eps);
        let _ = writeln!(s, "precision={}", self.precision);
        s
    }

    /// Parses [`ModelConfig::to_text`] output; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form; returns an error for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| num(key, x)).collect()
        }
        match key {
            "frame_size" => self.frame_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "enc_len" => self.enc_len = num(key, value)?,
            "convlstm_channels" => self.convlstm_channels = list(key, value)?,
            "conv_channels" => self.conv_channels = list(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "fc_width" => self.fc_width = num(key, value)?,
            "lstm_hidden" => self.lstm_hidden = num(key, value)?,
            "latent_noise" => self.latent_noise = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = num(key, value)?,
            "precision" => self.precision = value.trim().parse()?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 14] = [
        "frame_size",
        "channels",
        "seq_len",
        "enc_len",
        "convlstm_channels",
        "conv_channels",
        "kernel_size",
        "fc_width",
        "lstm_hidden",
        "latent_noise",
        "dropout",
        "eta",
        "layer_norm_eps",
        "precision",
    ];
}

/// Parses `key=value` lines, skipping blanks and `#` comments. Later keys win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_with_128_latent() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.latent_dim(), 128);
        assert_eq!(c.top_size(), 4);
        let p = ModelConfig::full_scale();
        p.validate().unwrap();
        assert_eq!(p.latent_dim(), 2000);
        assert_eq!((p.seq_len, p.enc_len), (10, 5));
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            ModelConfig { enc_len: 10, ..Default::default() },
            ModelConfig { enc_len: 0, ..Default::default() },
            ModelConfig { frame_size: 36, ..Default::default() },
            ModelConfig { dropout: 0.3, ..Default::default() },
            ModelConfig { eta: 1.2, ..Default::default() },
            ModelConfig { latent_noise: -0.1, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn text_round_trip() {
        let c = ModelConfig { convlstm_channels: vec![4, 8], conv_channels: vec![8, 8], frame_size: 16, ..Default::default() };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("bogus=1").is_err());
    }
}

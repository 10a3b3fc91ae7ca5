use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::scene::gaussian::{Feature, FEATURE_DIM};

/// Width of the decoder's hidden layer.
pub const HIDDEN_DIM: usize = 64;

/// Weather condition a decoder (and sky texture) is registered under.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum WeatherLabel {
    Raw,
    Rainy,
    Snowy,
    Foggy,
    Custom(String),
}

impl WeatherLabel {
    pub fn as_str(&self) -> &str {
        match self {
            WeatherLabel::Raw => "raw",
            WeatherLabel::Rainy => "rainy",
            WeatherLabel::Snowy => "snowy",
            WeatherLabel::Foggy => "foggy",
            WeatherLabel::Custom(s) => s,
        }
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, WeatherLabel::Raw)
    }
}

impl fmt::Display for WeatherLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeatherLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(Error::invalid("weather", format!("malformed label {s:?}")));
        }
        Ok(match s {
            "raw" => WeatherLabel::Raw,
            "rainy" => WeatherLabel::Rainy,
            "snowy" => WeatherLabel::Snowy,
            "foggy" => WeatherLabel::Foggy,
            other => WeatherLabel::Custom(other.to_owned()),
        })
    }
}

impl From<WeatherLabel> for String {
    fn from(l: WeatherLabel) -> String {
        l.as_str().to_owned()
    }
}

impl TryFrom<String> for WeatherLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Two-layer perceptron mapping a shared feature to an RGB color:
/// `sigmoid(W2·relu(W1·f + b1) + b2)`.
///
/// Weights are row-major: `w1` is `HIDDEN_DIM × FEATURE_DIM`, `w2` is
/// `3 × HIDDEN_DIM`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherDecoder {
    pub label: WeatherLabel,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate values of one decode, retained for the backward pass.
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    pub hidden: [f64; HIDDEN_DIM],
    pub color: [f64; 3],
}

impl WeatherDecoder {
    pub const PARAM_COUNT: usize = HIDDEN_DIM * FEATURE_DIM + HIDDEN_DIM + 3 * HIDDEN_DIM + 3;

    pub fn zeros(label: WeatherLabel) -> Self {
        Self {
            label,
            w1: vec![0.0; HIDDEN_DIM * FEATURE_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; 3 * HIDDEN_DIM],
            b2: vec![0.0; 3],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(label: WeatherLabel, rng: &mut R) -> Self {
        let mut d = Self::zeros(label);
        let a1 = (6.0 / (FEATURE_DIM + HIDDEN_DIM) as f64).sqrt();
        let a2 = (6.0 / (HIDDEN_DIM + 3) as f64).sqrt();
        d.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        d.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        d
    }

    /// A decoder whose output is exactly `sigmoid(feature[0..3])`.
    ///
    /// Hidden unit `k` carries `relu(f_k)` and unit `k + 3` carries
    /// `relu(-f_k)`; their difference restores `f_k`.
    pub fn passthrough(label: WeatherLabel) -> Self {
        let mut d = Self::zeros(label);
        for k in 0..3 {
            d.w1[k * FEATURE_DIM + k] = 1.0;
            d.w1[(k + 3) * FEATURE_DIM + k] = -1.0;
            d.w2[k * HIDDEN_DIM + k] = 1.0;
            d.w2[k * HIDDEN_DIM + k + 3] = -1.0;
        }
        d
    }

    pub fn check_shape(&self) -> Result<()> {
        let checks = [
            ("w1", self.w1.len(), HIDDEN_DIM * FEATURE_DIM),
            ("b1", self.b1.len(), HIDDEN_DIM),
            ("w2", self.w2.len(), 3 * HIDDEN_DIM),
            ("b2", self.b2.len(), 3),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::dimension(
                    format!("decoder `{}` {name}", self.label),
                    want,
                    got,
                ));
            }
        }
        Ok(())
    }

    /// Decodes one feature given as a slice; the length must be `FEATURE_DIM`.
    pub fn decode(&self, feature: &[f64]) -> Result<[f64; 3]> {
        let f: &Feature = feature
            .try_into()
            .map_err(|_| Error::dimension("feature", FEATURE_DIM, feature.len()))?;
        Ok(self.forward(f).color)
    }

    pub fn decode_batch(&self, features: &[Feature]) -> Vec<[f64; 3]> {
        features.iter().map(|f| self.forward(f).color).collect()
    }

    pub fn forward(&self, f: &Feature) -> DecodeTrace {
        let mut hidden = [0.0; HIDDEN_DIM];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
            let z = row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
            *h = z.max(0.0);
        }
        let mut color = [0.0; 3];
        for (k, c) in color.iter_mut().enumerate() {
            let row = &self.w2[k * HIDDEN_DIM..(k + 1) * HIDDEN_DIM];
            let z = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + self.b2[k];
            *c = sigmoid(z);
        }
        DecodeTrace { hidden, color }
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dfeature`.
    pub fn backward(
        &self,
        f: &Feature,
        trace: &DecodeTrace,
        d_color: &[f64; 3],
        grad: &mut DecoderGrad,
    ) -> Feature {
        let mut d_hidden = [0.0; HIDDEN_DIM];
        for k in 0..3 {
            let c = trace.color[k];
            let dz = d_color[k] * c * (1.0 - c);
            if dz == 0.0 {
                continue;
            }
            grad.b2[k] += dz;
            for j in 0..HIDDEN_DIM {
                grad.w2[k * HIDDEN_DIM + j] += dz * trace.hidden[j];
                d_hidden[j] += dz * self.w2[k * HIDDEN_DIM + j];
            }
        }
        let mut d_feature = [0.0; FEATURE_DIM];
        for j in 0..HIDDEN_DIM {
            // relu'(z) taken as 0 at z == 0
            if trace.hidden[j] <= 0.0 || d_hidden[j] == 0.0 {
                continue;
            }
            let dz = d_hidden[j];
            grad.b1[j] += dz;
            let row = &self.w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
            let grow = &mut grad.w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
            for i in 0..FEATURE_DIM {
                grow[i] += dz * f[i];
                d_feature[i] += dz * row[i];
            }
        }
        d_feature
    }

    /// All parameters in a fixed order: `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }
}

/// Gradient buffers shaped like a [`WeatherDecoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Default for DecoderGrad {
    fn default() -> Self {
        Self {
            w1: vec![0.0; HIDDEN_DIM * FEATURE_DIM],
            b1: vec![0.0; HIDDEN_DIM],
            w2: vec![0.0; 3 * HIDDEN_DIM],
            b2: vec![0.0; 3],
        }
    }
}

impl DecoderGrad {
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }
}

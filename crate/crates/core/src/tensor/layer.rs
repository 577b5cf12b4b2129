use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

/// One layer of a feed-forward stack.
///
/// Shapes exclude the batch axis: images are `[channels, height, width]`,
/// feature vectors are `[features]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool2d { kernel: usize, stride: usize },
    Relu,
    Flatten,
    Dense { in_features: usize, out_features: usize },
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::Conv2d { in_channels, out_channels, kernel, stride: 1, padding: 0 }
    }

    pub fn conv_padded(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Self::Conv2d { in_channels, out_channels, kernel, stride: 1, padding }
    }

    pub fn pool(kernel: usize) -> Self {
        Self::MaxPool2d { kernel, stride: kernel }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self::Dense { in_features, out_features }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::MaxPool2d { .. } => "maxpool2d",
            Self::Relu => "relu",
            Self::Flatten => "flatten",
            Self::Dense { .. } => "dense",
            Self::Softmax => "softmax",
        }
    }

    /// Shapes of the weight and bias tensors, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, .. } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            Self::Dense { in_features, out_features } => {
                vec![vec![out_features, in_features], vec![out_features]]
            }
            _ => Vec::new(),
        }
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            Self::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            Self::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(TensorError::ShapeMismatch(format!("{} on input {input:?}: {what}", self.kind())))
        };
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let &[c, h, w] = input else { return mismatch("expected [C, H, W]") };
                if c != in_channels {
                    return mismatch(&format!("expected {in_channels} channels"));
                }
                if kernel == 0 || stride == 0 {
                    return mismatch("kernel and stride must be positive");
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return mismatch("kernel larger than padded input");
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            Self::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else { return mismatch("expected [C, H, W]") };
                if kernel == 0 || stride == 0 {
                    return mismatch("kernel and stride must be positive");
                }
                if h < kernel || w < kernel {
                    return mismatch("window larger than input");
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            Self::Relu => Ok(input.to_vec()),
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Dense { in_features, out_features } => {
                if input != [in_features] {
                    return mismatch(&format!("expected [{in_features}]"));
                }
                Ok(vec![out_features])
            }
            Self::Softmax => {
                if input.len() != 1 {
                    return mismatch("expected a feature vector");
                }
                Ok(input.to_vec())
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, stride, padding } => write!(
                f,
                "conv2d in={in_channels} out={out_channels} k={kernel} stride={stride} pad={padding}"
            ),
            Self::MaxPool2d { kernel, stride } => write!(f, "maxpool2d k={kernel} stride={stride}"),
            Self::Dense { in_features, out_features } => {
                write!(f, "dense in={in_features} out={out_features}")
            }
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = TensorError;

    /// Parses `kind key=value ...`, e.g. `conv2d in=3 out=8 k=3 pad=1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().ok_or_else(|| TensorError::InvalidLayer(s.into()))?;
        let mut kv = Vec::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| TensorError::InvalidLayer(s.into()))?;
            let v: usize = v.parse().map_err(|_| TensorError::InvalidLayer(s.into()))?;
            kv.push((k, v));
        }
        let get = |key: &str, default: Option<usize>| -> Result<usize> {
            kv.iter()
                .find(|(k, _)| *k == key)
                .map(|&(_, v)| v)
                .or(default)
                .ok_or_else(|| TensorError::InvalidLayer(format!("{s}: missing `{key}`")))
        };
        let allow = |keys: &[&str]| -> Result<()> {
            match kv.iter().find(|(k, _)| !keys.contains(k)) {
                Some((k, _)) => Err(TensorError::InvalidLayer(format!("{s}: unknown key `{k}`"))),
                None => Ok(()),
            }
        };
        let layer = match kind {
            "conv2d" | "conv" => {
                allow(&["in", "out", "k", "stride", "pad"])?;
                Self::Conv2d {
                    in_channels: get("in", None)?,
                    out_channels: get("out", None)?,
                    kernel: get("k", None)?,
                    stride: get("stride", Some(1))?,
                    padding: get("pad", Some(0))?,
                }
            }
            "maxpool2d" | "maxpool" => {
                allow(&["k", "stride"])?;
                let kernel = get("k", Some(2))?;
                Self::MaxPool2d { kernel, stride: get("stride", Some(kernel))? }
            }
            "dense" | "linear" => {
                allow(&["in", "out"])?;
                Self::Dense { in_features: get("in", None)?, out_features: get("out", None)? }
            }
            "relu" | "flatten" | "softmax" => {
                allow(&[])?;
                match kind {
                    "relu" => Self::Relu,
                    "flatten" => Self::Flatten,
                    _ => Self::Softmax,
                }
            }
            other => return Err(TensorError::UnsupportedLayer(other.to_string())),
        };
        Ok(layer)
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = TensorError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(l: LayerSpec) -> String {
        l.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes_follow_conv_arithmetic() {
        let c = LayerSpec::Conv2d { in_channels: 3, out_channels: 8, kernel: 3, stride: 2, padding: 1 };
        assert_eq!(c.output_shape(&[3, 64, 64]).unwrap(), vec![8, 32, 32]);
        assert!(c.output_shape(&[1, 64, 64]).is_err());
        assert_eq!(LayerSpec::pool(2).output_shape(&[8, 5, 5]).unwrap(), vec![8, 2, 2]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[8, 2, 2]).unwrap(), vec![32]);
        assert!(LayerSpec::dense(31, 2).output_shape(&[32]).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["conv2d in=3 out=8 k=3 stride=1 pad=1", "maxpool2d k=2 stride=2", "relu", "flatten", "dense in=16 out=2", "softmax"] {
            let l: LayerSpec = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert_eq!("conv in=1 out=2 k=3".parse::<LayerSpec>().unwrap(), LayerSpec::conv(1, 2, 3));
        assert_eq!("batchnorm".parse::<LayerSpec>(), Err(TensorError::UnsupportedLayer("batchnorm".into())));
        assert!(matches!("dense in=3".parse::<LayerSpec>(), Err(TensorError::InvalidLayer(_))));
        assert!(matches!("relu k=2".parse::<LayerSpec>(), Err(TensorError::InvalidLayer(_))));
    }
}

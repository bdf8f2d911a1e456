use std::collections::HashMap;

use numkit::{Rng, Tensor};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Names and shapes of every learned array, in a fixed order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, p, f, dh, k) = (cfg.embed_dim, cfg.patch_size, cfg.mlp_dim, cfg.head_dim, cfg.num_components);
    let mut out = vec![
        ("embed.weight".to_string(), vec![p, d]),
        ("embed.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.num_layers {
        let b = format!("blocks.{i}");
        out.push((format!("{b}.attn_norm.gain"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{b}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("{b}.ffn_norm.gain"), vec![d]));
        out.push((format!("{b}.ffn.w_gate"), vec![d, f]));
        out.push((format!("{b}.ffn.w_up"), vec![d, f]));
        out.push((format!("{b}.ffn.w_down"), vec![f, d]));
    }
    out.push(("final_norm.gain".to_string(), vec![d]));
    out.push(("unembed.weight".to_string(), vec![d, p * dh]));
    out.push(("unembed.bias".to_string(), vec![p * dh]));
    for h in ["nu", "mu", "tau", "pi"] {
        out.push((format!("head.{h}.weight"), vec![dh, k]));
        out.push((format!("head.{h}.bias"), vec![k]));
    }
    out
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Parameters {
    fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Parameters { names, tensors, index }
    }

    /// Random initialization: weights ~ N(0, 1/fan_in), norm gains 1, biases 0.
    /// The patch-embedding bias is drawn like a weight row so that an all-zero
    /// patch does not put RMS normalization at its singular point.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in parameter_layout(cfg) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name == "embed.bias" {
                let std = 1.0 / (cfg.patch_size as f64).sqrt();
                (0..n).map(|_| rng.normal() * std).collect()
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.normal() * std).collect()
            };
            tensors.push(Tensor::new(data, &shape)?);
            names.push(name);
        }
        Ok(Self::from_parts(names, tensors))
    }

    /// Builds from named arrays, which must cover the layout exactly.
    pub fn from_arrays(cfg: &ModelConfig, arrays: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let layout = parameter_layout(cfg);
        let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
        for (name, data) in arrays {
            if by_name.insert(name.clone(), data).is_some() {
                return Err(Error::Checkpoint(format!("parameter {name} listed twice")));
            }
        }
        if let Some(extra) = by_name.keys().filter(|n| !layout.iter().any(|(l, _)| l == *n)).min() {
            return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout {
            let data = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            tensors.push(Tensor::new(data, &shape).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?);
            names.push(name);
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies as gradient-tracking leaves.
    pub fn trainable(&self) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor::param(t.data().to_vec(), t.shape()))
            .collect::<numkit::Result<_>>()?;
        Ok(Self::from_parts(self.names.clone(), tensors))
    }

    /// Copies without gradient tracking.
    pub fn frozen(&self) -> Self {
        Self::from_parts(self.names.clone(), self.tensors.iter().map(Tensor::detach).collect())
    }

    /// Same names, replaced tensors (order must match).
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Input(format!("expected {} tensors, got {}", self.tensors.len(), tensors.len())));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::Input(format!("{name}: shape {:?} vs {:?}", old.shape(), new.shape())));
            }
        }
        Ok(Self::from_parts(self.names.clone(), tensors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_init_and_is_unique() {
        let cfg = ModelConfig::default();
        let p = Parameters::init(&cfg, &mut Rng::new(0)).unwrap();
        let layout = parameter_layout(&cfg);
        assert_eq!(p.len(), layout.len());
        let mut names: Vec<_> = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
        assert_eq!(p.get("head.pi.weight").unwrap().shape(), &[32, 3]);
    }

    #[test]
    fn from_arrays_validates_names() {
        let cfg = ModelConfig {
            num_layers: 1,
            ..Default::default()
        };
        let p = Parameters::init(&cfg, &mut Rng::new(0)).unwrap();
        let mut arrays: Vec<(String, Vec<f64>)> = p.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect();
        assert!(Parameters::from_arrays(&cfg, arrays.clone()).is_ok());
        arrays.push(("bogus".into(), vec![1.0]));
        let err = Parameters::from_arrays(&cfg, arrays.clone()).unwrap_err().to_string();
        assert!(err.contains("unknown parameter bogus"), "{err}");
        arrays.pop();
        arrays.remove(0);
        assert!(Parameters::from_arrays(&cfg, arrays).is_err());
    }
}

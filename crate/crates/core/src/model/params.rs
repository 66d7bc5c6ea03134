use std::collections::HashMap;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Weights of one encoder layer. Query/key/value matrices hold the heads
/// side by side: columns `j*d_s..(j+1)*d_s` belong to head `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub ff_in_weight: T,
    pub ff_in_bias: T,
    pub ff_out_weight: T,
    pub ff_out_bias: T,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
}

/// Neighbor-attention weights of the graph transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayer<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub hidden_weight: T,
    pub hidden_bias: T,
    pub out_weight: T,
    pub out_bias: T,
}

/// The full parameter tree, generic over what sits at each leaf
/// (tensors, tape handles, gradients, shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<T> {
    pub proj_weight: T,
    pub proj_bias: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub graph: GraphLayer<T>,
    pub classifier: Classifier<T>,
}

impl<T> ParamTree<T> {
    /// Visits every leaf in canonical order with its dotted name.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        f("proj.weight".into(), &self.proj_weight);
        f("proj.bias".into(), &self.proj_bias);
        for (i, l) in self.encoder.iter().enumerate() {
            for (name, t) in [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
                ("ff_in.weight", &l.ff_in_weight),
                ("ff_in.bias", &l.ff_in_bias),
                ("ff_out.weight", &l.ff_out_weight),
                ("ff_out.bias", &l.ff_out_bias),
                ("norm1.gain", &l.norm1_gain),
                ("norm1.bias", &l.norm1_bias),
                ("norm2.gain", &l.norm2_gain),
                ("norm2.bias", &l.norm2_bias),
            ] {
                f(format!("encoder.{i}.{name}"), t);
            }
        }
        for (name, t) in [
            ("query", &self.graph.query),
            ("key", &self.graph.key),
            ("value", &self.graph.value),
            ("output", &self.graph.output),
        ] {
            f(format!("graph.{name}"), t);
        }
        for (name, t) in [
            ("hidden.weight", &self.classifier.hidden_weight),
            ("hidden.bias", &self.classifier.hidden_bias),
            ("out.weight", &self.classifier.out_weight),
            ("out.bias", &self.classifier.out_bias),
        ] {
            f(format!("classifier.{name}"), t);
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.proj_weight, &mut self.proj_bias];
        for l in &mut self.encoder {
            out.extend([
                &mut l.query,
                &mut l.key,
                &mut l.value,
                &mut l.output,
                &mut l.ff_in_weight,
                &mut l.ff_in_bias,
                &mut l.ff_out_weight,
                &mut l.ff_out_bias,
                &mut l.norm1_gain,
                &mut l.norm1_bias,
                &mut l.norm2_gain,
                &mut l.norm2_bias,
            ]);
        }
        out.extend([
            &mut self.graph.query,
            &mut self.graph.key,
            &mut self.graph.value,
            &mut self.graph.output,
            &mut self.classifier.hidden_weight,
            &mut self.classifier.hidden_bias,
            &mut self.classifier.out_weight,
            &mut self.classifier.out_bias,
        ]);
        out
    }

    /// Builds a tree of the same layout from leaves in canonical order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ParamTree<U>, E> {
        let mut g = |name: String, t: &T| f(&name, t);
        let proj_weight = g("proj.weight".into(), &self.proj_weight)?;
        let proj_bias = g("proj.bias".into(), &self.proj_bias)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, l) in self.encoder.iter().enumerate() {
            let p = |n: &str| format!("encoder.{i}.{n}");
            encoder.push(EncoderLayer {
                query: g(p("query"), &l.query)?,
                key: g(p("key"), &l.key)?,
                value: g(p("value"), &l.value)?,
                output: g(p("output"), &l.output)?,
                ff_in_weight: g(p("ff_in.weight"), &l.ff_in_weight)?,
                ff_in_bias: g(p("ff_in.bias"), &l.ff_in_bias)?,
                ff_out_weight: g(p("ff_out.weight"), &l.ff_out_weight)?,
                ff_out_bias: g(p("ff_out.bias"), &l.ff_out_bias)?,
                norm1_gain: g(p("norm1.gain"), &l.norm1_gain)?,
                norm1_bias: g(p("norm1.bias"), &l.norm1_bias)?,
                norm2_gain: g(p("norm2.gain"), &l.norm2_gain)?,
                norm2_bias: g(p("norm2.bias"), &l.norm2_bias)?,
            });
        }
        let graph = GraphLayer {
            query: g("graph.query".into(), &self.graph.query)?,
            key: g("graph.key".into(), &self.graph.key)?,
            value: g("graph.value".into(), &self.graph.value)?,
            output: g("graph.output".into(), &self.graph.output)?,
        };
        let classifier = Classifier {
            hidden_weight: g("classifier.hidden.weight".into(), &self.classifier.hidden_weight)?,
            hidden_bias: g("classifier.hidden.bias".into(), &self.classifier.hidden_bias)?,
            out_weight: g("classifier.out.weight".into(), &self.classifier.out_weight)?,
            out_bias: g("classifier.out.bias".into(), &self.classifier.out_bias)?,
        };
        Ok(ParamTree {
            proj_weight,
            proj_bias,
            encoder,
            graph,
            classifier,
        })
    }
}

/// How a leaf is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot-uniform with the given fan-in and fan-out.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Init {
    pub fn bound(self) -> f64 {
        match self {
            Init::Glorot { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

/// Shape and initializer of every leaf, as a pure function of the config.
pub fn layout(config: &ModelConfig) -> ParamTree<(Vec<usize>, Init)> {
    let d = config.d_model;
    let ds = config.head_dim();
    let ff = config.ff_dim();
    let glorot = |fan_in, fan_out| (vec![fan_in, fan_out], Init::Glorot { fan_in, fan_out });
    // per-head blocks: each head maps d_model -> d_s
    let heads = |_: ()| (vec![d, d], Init::Glorot { fan_in: d, fan_out: ds });
    let zeros = |n: usize| (vec![n], Init::Zeros);
    let ones = |n: usize| (vec![n], Init::Ones);
    ParamTree {
        proj_weight: glorot(config.input_dim, d),
        proj_bias: zeros(d),
        encoder: (0..config.layers)
            .map(|_| EncoderLayer {
                query: heads(()),
                key: heads(()),
                value: heads(()),
                output: glorot(d, d),
                ff_in_weight: glorot(d, ff),
                ff_in_bias: zeros(ff),
                ff_out_weight: glorot(ff, d),
                ff_out_bias: zeros(d),
                norm1_gain: ones(d),
                norm1_bias: zeros(d),
                norm2_gain: ones(d),
                norm2_bias: zeros(d),
            })
            .collect(),
        graph: GraphLayer {
            query: heads(()),
            key: heads(()),
            value: heads(()),
            output: glorot(d, d),
        },
        classifier: Classifier {
            hidden_weight: glorot(2 * d, config.hidden_dim),
            hidden_bias: zeros(config.hidden_dim),
            out_weight: glorot(config.hidden_dim, config.classes),
            out_bias: zeros(config.classes),
        },
    }
}

/// Learnable weights of the head together with the config that shaped them.
///
/// Tensors sit behind `Arc` so a forward pass can put them on a tape without
/// copying; the optimizer mutates them in place once the tape is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub tree: ParamTree<Arc<Tensor<S>>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    /// Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = layout(config).try_map(|_, (shape, init)| -> Result<_> {
            let n: usize = shape.iter().product();
            let data: Vec<S> = match init {
                Init::Zeros => vec![S::zero(); n],
                Init::Ones => vec![S::one(); n],
                Init::Glorot { .. } => {
                    let b = init.bound();
                    let dist = Uniform::new_inclusive(-b, b);
                    (0..n).map(|_| S::of(dist.sample(&mut rng))).collect()
                }
            };
            Ok(Arc::new(Tensor::new(shape.clone(), data)?))
        })?;
        Ok(Self {
            config: config.clone(),
            tree,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the config.
    pub fn from_named(config: &ModelConfig, mut tensors: HashMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let tree = layout(config).try_map(|name, (shape, _)| -> Result<_> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::input(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(Arc::new(t))
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::input(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config: config.clone(),
            tree,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        self.tree
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.as_ref()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tree.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let tree = self
            .tree
            .try_map(|_, t| Ok::<_, Error>(Arc::new(t.cast::<T>())))
            .expect("infallible");
        ModelParams {
            config: self.config.clone(),
            tree,
        }
    }

    /// Mutable access to a leaf by name, copying it first if shared.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let names: Vec<String> = self.tree.named().into_iter().map(|(n, _)| n).collect();
        let idx = names.iter().position(|n| n == name)?;
        self.tree.leaves_mut().into_iter().nth(idx).map(Arc::make_mut)
    }
}

/// Number of learnable scalars implied by `config`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    layout(config)
        .leaves()
        .iter()
        .map(|(s, _)| s.iter().product::<usize>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_in_seed() {
        let c = ModelConfig {
            input_dim: 16,
            d_model: 8,
            ..Default::default()
        };
        let a = ModelParams::<f32>::init(&c, 7).unwrap();
        let b = ModelParams::<f32>::init(&c, 7).unwrap();
        let other = ModelParams::<f32>::init(&c, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn default_init_respects_glorot_bounds() {
        let c = ModelConfig::default();
        let p = ModelParams::<f32>::init(&c, 1).unwrap();
        let lay = layout(&c);
        for ((name, t), (_, (_, init))) in p.named().into_iter().zip(lay.named()) {
            match init {
                Init::Zeros => assert!(t.data().iter().all(|&v| v == 0.0), "{name}"),
                Init::Ones => assert!(t.data().iter().all(|&v| v == 1.0), "{name}"),
                Init::Glorot { .. } => {
                    let b = init.bound() as f32;
                    assert!(t.data().iter().all(|v| v.abs() <= b), "{name}");
                    assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
                }
            }
        }
        assert_eq!(p.parameter_count(), parameter_count(&c));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = ModelConfig {
            d_model: 6,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(ModelParams::<f32>::init(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn named_round_trip() {
        let c = ModelConfig {
            input_dim: 5,
            d_model: 4,
            heads: 2,
            layers: 1,
            hidden_dim: 3,
            ..Default::default()
        };
        let p = ModelParams::<f32>::init(&c, 3).unwrap();
        let map: HashMap<_, _> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ModelParams::from_named(&c, map.clone()).unwrap();
        assert_eq!(p, back);

        let mut missing = map.clone();
        missing.remove("graph.key");
        assert!(ModelParams::<f32>::from_named(&c, missing).is_err());
    }
}

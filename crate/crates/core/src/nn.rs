//! Named parameter storage and the small layers built on it.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<T>>,
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-gain / sqrt(fan_in), gain / sqrt(fan_in)]`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
}

/// Ordered collection of every learnable tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let bound = match init {
            Init::FanIn { fan_in, gain } => gain / (fan_in.max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
            Init::Zeros => 0.0,
        };
        let value = (0..numel)
            .map(|_| {
                if bound == 0.0 {
                    T::zero()
                } else {
                    T::lit(rng.gen_range(-bound..bound))
                }
            })
            .collect();
        self.params.push(Param {
            name: name.into(),
            shape,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.value.len() {
            return Err(Error::shape("set parameter", &p.shape, &[values.len()]));
        }
        p.value = Arc::new(values);
        Ok(())
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<T> {
        let tensors = self
            .params
            .iter()
            .map(|p| tape.leaf(&Tensor::from_shared(p.shape.clone(), Arc::clone(&p.value))))
            .collect();
        Bound { tensors }
    }
}

/// Parameters as tape tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
}

/// Shared construction context: the store being filled, the RNG and the
/// weight gain.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub gain: f64,
}

impl<T: Real> Builder<'_, T> {
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let init = Init::FanIn {
            fan_in,
            gain: self.gain,
        };
        self.store.add(name, vec![fan_in, fan_out], init, self.rng)
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        self.store.add(name, shape, init, self.rng)
    }
}

/// `y = x·W (+ b)`, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = b.weight(&format!("{name}.weight"), fan_in, fan_out);
        let bias = bias.then(|| {
            let init = Init::FanIn { fan_in, gain: 1.0 };
            b.param(&format!("{name}.bias"), vec![fan_out], init)
        });
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// A biased layer whose weights and bias start at zero.
    pub fn zeroed<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = b.param(
            &format!("{name}.weight"),
            vec![fan_in, fan_out],
            Init::Zeros,
        );
        let bias = Some(b.param(&format!("{name}.bias"), vec![fan_out], Init::Zeros));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let y = tape.matmul(x, p.get(self.weight))?;
        match self.bias {
            Some(b) => tape.broadcast_add(&y, p.get(b)),
            None => Ok(y),
        }
    }
}

/// Stack of biased linear layers with a rectifier between consecutive
/// layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(b, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    /// Like [`Mlp::new`] but the final layer starts at zero.
    pub fn with_zero_output<T: Real>(b: &mut Builder<'_, T>, name: &str, widths: &[usize]) -> Self {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                if i == last {
                    Linear::zeroed(b, &lname, w[0], w[1])
                } else {
                    Linear::new(b, &lname, w[0], w[1], true)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(&h);
            }
            h = layer.forward(tape, p, &h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_shapes_and_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            gain: 1.0,
        };
        let mlp = Mlp::with_zero_output(&mut b, "m", &[3, 5, 2]);
        assert_eq!(store.len(), 4);
        assert_eq!(store.numel(), 3 * 5 + 5 + 5 * 2 + 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::new([4, 3], (0..12).map(f64::from).collect()).unwrap();
        let y = mlp.forward(&mut tape, &p, &x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(store.id_of("m.1.bias").map(ParamId::index), Some(3));
    }
}

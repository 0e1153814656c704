//! Parameterized layers and the forward session that binds a model's
//! parameters onto a tape.

use rand::distributions::{Distribution, Uniform};
use rand::RngCore;

use crate::engine::ops::{BN_EPS, BN_MOMENTUM};
use crate::engine::{Mode, Padding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// One forward pass: a tape plus the mapping from parameters to tape leaves.
pub struct Session<'a> {
    tape: Tape,
    params: &'a ParamStore,
    mode: Mode,
    bound: Vec<Option<Var>>,
    stat_updates: Vec<(ParamId, Tensor)>,
}

/// What a finished [`Session`] hands back to the model owner.
pub struct SessionOutput {
    pub tape: Tape,
    pub bindings: Vec<(ParamId, Var)>,
    /// New running mean/variance values computed in training mode.
    pub stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Session {
            tape: Tape::new(),
            params,
            mode,
            bound: vec![None; params.len()],
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Tape handle for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = self.params.get(id);
        let v = if p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn finish(self) -> SessionOutput {
        let bindings = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
            .filter(|&(id, _)| self.params.get(id).trainable)
            .collect();
        SessionOutput {
            tape: self.tape,
            bindings,
            stat_updates: self.stat_updates,
        }
    }
}

impl ParamStore {
    /// Folds running-statistic updates from a training session into the store.
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            self.get_mut(id).value = value;
        }
    }
}

/// Registers layer parameters, drawing weights from a Xavier-uniform
/// distribution or leaving them zero when no RNG is supplied.
pub struct LayerBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut dyn RngCore>,
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

impl<'a> LayerBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: Option<&'a mut dyn RngCore>) -> Self {
        LayerBuilder { store, rng }
    }

    fn weight(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let bound = xavier_bound(fan_in, fan_out);
                let dist = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(shape, |_| dist.sample(rng))
            }
            None => Tensor::zeros(shape),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Conv> {
        let area = kernel * kernel;
        let w = self.weight(
            &[out_channels, in_channels, kernel, kernel],
            in_channels * area,
            out_channels * area,
        );
        Ok(Conv {
            weight: self.store.register(format!("{name}.weight"), w, true)?,
            bias: self.store.register(
                format!("{name}.bias"),
                Tensor::zeros(&[out_channels]),
                true,
            )?,
            stride,
            padding,
        })
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let c = [channels];
        Ok(BatchNorm {
            gamma: self
                .store
                .register(format!("{name}.gamma"), Tensor::full(&c, 1.0), true)?,
            beta: self
                .store
                .register(format!("{name}.beta"), Tensor::zeros(&c), true)?,
            running_mean: self.store.register(
                format!("{name}.running_mean"),
                Tensor::zeros(&c),
                false,
            )?,
            running_var: self.store.register(
                format!("{name}.running_var"),
                Tensor::full(&c, 1.0),
                false,
            )?,
        })
    }

    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Dense> {
        let w = self.weight(&[inputs, outputs], inputs, outputs);
        Ok(Dense {
            weight: self.store.register(format!("{name}.weight"), w, true)?,
            bias: self
                .store
                .register(format!("{name}.bias"), Tensor::zeros(&[outputs]), true)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape_mut().conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch norm whose running statistics live in the parameter store as
/// non-trainable entries. Models initialize them to mean 0, variance 1.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Eval => {
                let params = s.params;
                let mean = params.value(self.running_mean).data();
                let var = params.value(self.running_var).data();
                let (out, _) = s
                    .tape
                    .batchnorm2d(x, gamma, beta, Some((mean, var)), BN_EPS)?;
                Ok(out)
            }
            Mode::Train => {
                let (out, batch) = s.tape.batchnorm2d(x, gamma, beta, None, BN_EPS)?;
                let batch = batch.expect("training mode yields batch statistics");
                let blend = |id: ParamId, fresh: &[f32]| {
                    let old = s.params.value(id);
                    let data = old
                        .data()
                        .iter()
                        .zip(fresh)
                        .map(|(&r, &b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                        .collect();
                    Tensor::new(old.shape().to_vec(), data).expect("channel vector")
                };
                let mean = blend(self.running_mean, &batch.mean);
                let var = blend(self.running_var, &batch.var);
                s.stat_updates.push((self.running_mean, mean));
                s.stat_updates.push((self.running_var, var));
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape_mut().dense(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_weights_within_bound() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = LayerBuilder::new(&mut store, Some(&mut rng));
        let conv = b.conv("c", 3, 8, 5, 2, Padding::Same).unwrap();
        let bound = xavier_bound(3 * 25, 8 * 25);
        let w = store.value(conv.weight);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|&v| v != 0.0));
        assert!(store.value(conv.bias).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_records_stat_updates() {
        let mut store = ParamStore::new();
        let bn = LayerBuilder::new(&mut store, None)
            .batchnorm("bn", 1)
            .unwrap();
        let mut s = Session::new(&store, Mode::Train);
        let x = s.input(Tensor::full(&[2, 1, 2, 2], 3.0));
        bn.forward(&mut s, x).unwrap();
        let out = s.finish();
        assert_eq!(out.stat_updates.len(), 2);
        store.apply_stat_updates(out.stat_updates);
        assert!((store.value(bn.running_mean).data()[0] - 0.03).abs() < 1e-6);
        assert!((store.value(bn.running_var).data()[0] - 0.99).abs() < 1e-6);
        // Running statistics are constants on the tape, not gradient targets.
        assert_eq!(out.bindings.len(), 2);
    }
}

//! Parameters, layers and optimizers shared by every trainable network.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Rc<Tensor<T>>,
}

/// Named, ordered parameter storage for one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value: Rc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf_rc(p.value.clone())
                } else {
                    tape.constant_rc(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Hash over names, shapes and exact bit patterns of all parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut buf = Vec::new();
        for p in &self.entries {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            buf.hash(&mut h);
        }
        h.finish()
    }

    /// Replaces parameter values by name; every name must already exist
    /// with the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for p in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = Rc::new(t.clone());
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect()
    }
}

/// Parameters of one network recorded on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in storage order (zero where unused).
    pub fn grads(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zero(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-normal for ReLU stacks.
    He,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = vec![out_channels, in_channels, kernel, kernel];
        let weight = match init {
            Init::He => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                Tensor::<T>::randn(shape, rng).scale(T::lit((2.0 / fan_in).sqrt()))
            }
            Init::Zeros => Tensor::zeros(shape),
        };
        let weight = params.add(format!("{name}.weight"), weight);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.spec)
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer bound to one [`ParamSet`] layout.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.steps += 1;
        let lr = T::lit(self.lr);
        for (i, g) in grads.iter().enumerate() {
            let p = Rc::make_mut(&mut params.entries[i].value);
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    let v = &mut self.first[i];
                    for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = mu * *vv + gv;
                        *pv = *pv - lr * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - T::lit(beta1.powi(self.steps as i32));
                    let c2 = T::one() - T::lit(beta2.powi(self.steps as i32));
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

use std::collections::HashMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity slope for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    decay: bool,
}

/// Named parameter tensors. Names are the canonical checkpoint keys.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; `decay` marks it for weight decay.
    pub fn add(&mut self, name: &str, value: Tensor<S>, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            decay,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<S>, requires_grad: bool) -> Bound {
        self.bind_with(g, |_| requires_grad)
    }

    /// Records every parameter as a graph leaf, choosing per name whether it
    /// is trainable.
    pub fn bind_with(&self, g: &mut Graph<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| g.leaf(e.value.clone(), trainable(&e.name)))
                .collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Handles in parameter-id order, e.g. leaves created by the caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in for weights and biases.
    KaimingUniform,
    /// Orthogonal weights, zero biases.
    Orthogonal,
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

/// Fully connected network with leaky-ReLU hidden layers. When `residual`
/// is set, consecutive hidden layers of equal width are joined by identity
/// shortcuts. The output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMlp {
    layers: Vec<Dense>,
    residual: bool,
}

impl ResidualMlp {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "{prefix}: layer widths must be >= 1 (in {in_dim}, hidden {hidden:?}, out {out_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let (weight, bias) = match init {
                Init::KaimingUniform => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut u = |n: usize| -> Vec<f64> {
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    };
                    (
                        Tensor::from_f64(&[fan_in, fan_out], &u(fan_in * fan_out))?,
                        Tensor::from_f64(&[1, fan_out], &u(fan_out))?,
                    )
                }
                Init::Orthogonal => (
                    orthogonal_matrix(fan_in, fan_out, &mut rng).cast(),
                    Tensor::zeros(&[1, fan_out]),
                ),
            };
            layers.push(Dense {
                weight: store.add(&format!("{prefix}.layer{k}.weight"), weight, true)?,
                bias: store.add(&format!("{prefix}.layer{k}.bias"), bias, true)?,
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(ResidualMlp {
            layers,
            residual: true,
        })
    }

    /// Disables the identity shortcuts.
    pub fn plain(mut self) -> Self {
        self.residual = false;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().map(|l| l.weight)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, l) in self.layers.iter().enumerate() {
            let y = g.matmul(h, p[l.weight])?;
            let y = g.add(y, p[l.bias])?;
            if k == last {
                return Ok(y);
            }
            let y = g.leaky_relu(y, S::lit(LEAKY_SLOPE));
            h = if self.residual && k > 0 && l.in_dim == l.out_dim {
                g.add(y, h)?
            } else {
                y
            };
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass on plain tensors.
    pub fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }

    /// Zeroes the output layer so the network maps everything to zero.
    pub fn zero_output_layer<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let l = &self.layers[self.layers.len() - 1];
        for id in [l.weight, l.bias] {
            let t = store.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Re-initializes every weight matrix orthogonally and zeroes biases.
    pub fn orthogonal_init<S: Scalar>(&self, store: &mut ParamStore<S>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &self.layers {
            *store.get_mut(l.weight) = orthogonal_matrix(l.in_dim, l.out_dim, &mut rng).cast();
            *store.get_mut(l.bias) = Tensor::zeros(&[1, l.out_dim]);
        }
    }
}

/// Builds a standalone network with its own parameter store.
pub fn build_residual_mlp<S: Scalar>(
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    seed: u64,
) -> Result<(ParamStore<S>, ResidualMlp)> {
    let mut store = ParamStore::new();
    let net = ResidualMlp::build(&mut store, "net", in_dim, hidden, out_dim, Init::KaimingUniform, seed)?;
    Ok((store, net))
}

/// Random `rows × cols` matrix with orthonormal columns (tall) or rows (wide),
/// from Gram-Schmidt on a Gaussian draw with one re-orthogonalization pass.
pub fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            if rows >= cols {
                out.set(i, j, v);
            } else {
                out.set(j, i, v);
            }
        }
    }
    out
}

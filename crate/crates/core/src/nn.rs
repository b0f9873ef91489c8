//! Parameterised layers recorded onto a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgq_tensor::{grad_check, Bound, GradCheckReport, KeyIndex, ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

use crate::error::{Result, SgqError};

/// [`grad_check`] for functions built from this crate's layers.
pub fn check_gradients<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let wrapped = |t: &mut Tape<f64>, x: Var| {
        f(t, x).map_err(|e| match e {
            SgqError::Tensor(inner) => inner,
            other => TensorError::Invalid {
                op: "model",
                msg: other.to_string(),
            },
        })
    };
    Ok(grad_check(wrapped, input, h)?)
}

/// Uniform Xavier-style initialisation.
pub fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_f64(shape.to_vec(), &values).expect("shape matches value count")
}

pub fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, scale: f64, shape: &[usize]) -> Tensor<S> {
    let values: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape.to_vec(), &values).expect("shape matches value count")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim, &[in_dim, out_dim]))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `[m, in] -> [m, out]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => tape.add(y, p.var(b))?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], S::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))?)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, rng, &format!("{name}.{i}"), d[0], d[1], true))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("an MLP has at least one layer")
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        index: KeyIndex,
        label: &'static str,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, key)?;
        let v = self.v.forward(tape, p, value)?;
        let a = tape.attention(q, k, v, self.heads, index, label)?;
        self.o.forward(tape, p, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_hand_product() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, &mut rng, "l", 2, 3, true).unwrap();
        *store.get_mut(l.weight) = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        *store.get_mut(l.bias.unwrap()) = Tensor::new(vec![3], vec![0.5, 0.0, -0.5]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = l.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.data(y), &[-2.5, -3.0, -3.5]);
    }

    #[test]
    fn mlp_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 4, 2]).unwrap();
        let x = uniform::<f64>(&mut rng, 1.0, &[2, 3]);
        let report = check_gradients(
            |t, x| {
                let p = store.bind_frozen(t);
                let y = mlp.forward(t, &p, x)?;
                let s = t.mul(y, y)?;
                Ok(t.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_projections_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(uniform(&mut rng, 1.0, &[3, 8]));
        let kv = tape.constant(uniform(&mut rng, 1.0, &[5, 8]));
        let y = mha.forward(&mut tape, &p, q, kv, kv, KeyIndex::Dense, "t").unwrap();
        assert_eq!(tape.shape(y), &[3, 8]);
        assert_eq!(tape.stats().peak_scores["t"], 2 * 3 * 5);
    }
}

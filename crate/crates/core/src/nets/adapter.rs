use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, DenoiserNet, EpsField, ParamSet};
use crate::autograd::{matmul_forward, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rank-`r` weight deltas `scale * B A` for every conv/linear weight of a
/// denoiser. `A` is `[r, fan_in]`, `B` is `[fan_out, r]` and starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub scale: f64,
    pub params: ParamSet,
}

fn is_target(name: &str, t: &Tensor) -> bool {
    name.ends_with(".w") && t.shape().len() >= 2 && !t.is_empty()
}

fn split(t: &Tensor) -> (usize, usize) {
    let m = t.shape()[0];
    (m, t.len() / m)
}

impl LowRankAdapter {
    pub fn new(net: &DenoiserNet, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::RankMismatch("rank must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, w) in net.params.iter().filter(|(n, w)| is_target(n, w)) {
            let (m, n) = split(w);
            let d = Normal::new(0.0, (1.0 / n as f64).sqrt()).unwrap();
            let a = Tensor::from_vec(&[rank, n], (0..rank * n).map(|_| d.sample(&mut rng)).collect())?;
            params.insert(format!("{name}.lora_a"), a);
            params.insert(format!("{name}.lora_b"), Tensor::zeros(&[m, rank]));
        }
        Ok(Self {
            rank,
            scale,
            params,
        })
    }

    pub fn targets(&self) -> Vec<String> {
        self.params
            .names()
            .into_iter()
            .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_string))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count()
    }

    /// Verifies that every factor pair fits its target weight.
    pub fn check(&self, net: &DenoiserNet) -> Result<()> {
        let mut expected = 0;
        for (name, w) in net.params.iter().filter(|(n, w)| is_target(n, w)) {
            expected += 2;
            let (m, n) = split(w);
            let a = self.params.get(&format!("{name}.lora_a"));
            let b = self.params.get(&format!("{name}.lora_b"));
            match (a, b) {
                (Some(a), Some(b))
                    if a.shape() == [self.rank, n] && b.shape() == [m, self.rank] => {}
                _ => {
                    return Err(Error::RankMismatch(format!(
                        "factors for {name} do not match weight {:?} at rank {}",
                        w.shape(),
                        self.rank
                    )))
                }
            }
        }
        if expected != self.params.len() {
            return Err(Error::RankMismatch("adapter has factors for unknown layers".into()));
        }
        Ok(())
    }

    fn delta(&self, name: &str, shape: &[usize]) -> Tensor {
        let a = self.params.get(&format!("{name}.lora_a")).unwrap();
        let b = self.params.get(&format!("{name}.lora_b")).unwrap();
        matmul_forward(b, a).scale(self.scale).reshape(shape).unwrap()
    }

    /// Folds the deltas into plain weights.
    pub fn merge(&self, net: &DenoiserNet) -> Result<DenoiserNet> {
        self.check(net)?;
        let mut out = net.clone();
        for name in self.targets() {
            let w = out.params.get_mut(&name).unwrap();
            let d = self.delta(&name, w.shape());
            *w = w.zip_map(&d, |a, b| a + b)?;
        }
        Ok(out)
    }
}

/// Binds `net` with adapted weights `W + scale * reshape(B A)` computed on the
/// tape. Returns the effective bindings and the adapter factor bindings.
pub fn bind_adapted(
    g: &mut Graph,
    net: &DenoiserNet,
    adapter: &LowRankAdapter,
    train_base: bool,
    train_adapter: bool,
) -> Result<(Bound, Bound)> {
    adapter.check(net)?;
    let base = net.bind(g, train_base);
    let factors = super::bind(g, &adapter.params, train_adapter);
    let mut eff = base.clone();
    for name in adapter.targets() {
        let shape = g.value(base.get(&name)).shape().to_vec();
        let ba = g.matmul(
            factors.get(&format!("{name}.lora_b")),
            factors.get(&format!("{name}.lora_a")),
        );
        let ba = g.scale(ba, adapter.scale);
        let ba = g.reshape(ba, &shape);
        let w = g.add(base.get(&name), ba);
        eff.insert(name, w);
    }
    Ok((eff, factors))
}

/// Lazy view of a denoiser with an adapter attached.
pub struct AdaptedNet<'a> {
    pub base: &'a DenoiserNet,
    pub adapter: &'a LowRankAdapter,
}

impl AdaptedNet<'_> {
    pub fn forward(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (eff, _) = bind_adapted(&mut g, self.base, self.adapter, false, false)?;
        let zv = g.constant(z.clone());
        let out = self.base.forward_graph(&mut g, &eff, zv, t, c)?;
        Ok(g.value(out).clone())
    }
}

impl EpsField for AdaptedNet<'_> {
    fn eps(&self, z: &Tensor, t: f64, c: &[f64]) -> Result<Tensor> {
        self.forward(z, t, c)
    }
}

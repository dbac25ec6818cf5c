//! Parameter registry, initializers, optimizer and gradient-check utilities.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic RNG used everywhere randomness is needed.
pub struct Rng(ChaCha12Rng);

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng(ChaCha12Rng::seed_from_u64(seed))
    }

    pub fn normal_f64(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn normal_tensor<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::of_f64(self.normal_f64() * std))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

/// Stream derivation so independent consumers of one seed never collide.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which part of the model a parameter belongs to; used for stage freezing
/// and checkpoint sectioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Codec,
    Embedder,
    MotionEncoder,
    BackboneSpatial,
    Temporal,
    HandBank,
    NullCond,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Codec => "codec",
            ParamGroup::Embedder => "embedder",
            ParamGroup::MotionEncoder => "motion_encoder",
            ParamGroup::BackboneSpatial => "backbone",
            ParamGroup::Temporal => "temporal",
            ParamGroup::HandBank => "bank",
            ParamGroup::NullCond => "null_cond",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Some(match s {
            "codec" => ParamGroup::Codec,
            "embedder" => ParamGroup::Embedder,
            "motion_encoder" => ParamGroup::MotionEncoder,
            "backbone" => ParamGroup::BackboneSpatial,
            "temporal" => ParamGroup::Temporal,
            "bank" => ParamGroup::HandBank,
            "null_cond" => ParamGroup::NullCond,
            _ => return None,
        })
    }
}

pub type ParamId = usize;

pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<S>,
}

/// Flat registry of named parameters. Model structs keep `ParamId` handles.
pub struct Params<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id].tensor
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<S>) {
        assert_eq!(
            self.entries[id].tensor.shape(),
            t.shape(),
            "shape change for {}",
            self.entries[id].name
        );
        self.entries[id].tensor = t;
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Insert every parameter into `g` as a leaf; `trainable` decides which
    /// leaves record gradients.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(&ParamEntry<S>) -> bool) -> Binding {
        let nodes = self
            .entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), trainable(e)))
            .collect();
        Binding { nodes }
    }

    pub fn bind_all(&self, g: &mut Graph<S>) -> Binding {
        self.bind(g, |_| true)
    }

    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Binding {
        self.bind(g, |_| false)
    }

    pub fn clone_params(&self) -> Params<S> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.clone(),
                })
                .collect(),
        }
    }
}

/// Node ids for one graph's view of the parameter set.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id]
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads[id]` may be `None` for frozen or unused params.
    pub fn step(&mut self, params: &mut Params<S>, grads: &[Option<Tensor<S>>]) {
        if self.m.len() < params.len() {
            self.m.resize_with(params.len(), || None);
            self.v.resize_with(params.len(), || None);
        }
        self.step += 1;
        let b1 = S::of_f64(self.beta1);
        let b2 = S::of_f64(self.beta2);
        let one = S::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = S::of_f64(self.lr);
        let eps = S::of_f64(self.eps);
        let wd = S::of_f64(self.weight_decay * self.lr);
        let ibc1 = S::of_f64(1.0 / bc1);
        let ibc2 = S::of_f64(1.0 / bc2);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if self.m[id].is_none() {
                self.m[id] = Some(Tensor::zeros(g.shape()));
                self.v[id] = Some(Tensor::zeros(g.shape()));
            }
            let m = self.m[id].as_mut().unwrap();
            let v = self.v[id].as_mut().unwrap();
            let mut p = params.tensor(id).clone();
            {
                let ms = m.as_mut_slice();
                let vs = v.as_mut_slice();
                let ps = p.as_mut_slice();
                let gs = g.as_slice();
                for i in 0..gs.len() {
                    ms[i] = b1 * ms[i] + (one - b1) * gs[i];
                    vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
                    let mhat = ms[i] * ibc1;
                    let vhat = vs[i] * ibc2;
                    ps[i] = ps[i] - lr * mhat / (vhat.sqrt() + eps) - wd * ps[i];
                }
            }
            params.set(id, p);
        }
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = params.add(format!("{name}.w"), group, rng.normal_tensor(&[in_dim, out_dim], std));
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Applies to the last axis of any rank >= 1 input.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: NodeId) -> NodeId {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input dim");
        let rows: usize = shape.iter().product::<usize>() / self.in_dim;
        let flat = g.reshape(x, &[rows, self.in_dim]);
        let y = g.matmul(flat, bind.node(self.w));
        let y = g.add_last(y, bind.node(self.b));
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = params.add(format!("{name}.w"), group, rng.normal_tensor(&[cout, cin, k, k], std));
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: NodeId) -> NodeId {
        g.conv2d(x, bind.node(self.w), bind.node(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), group, Tensor::full(&[dim], S::one()));
        let beta = params.add(format!("{name}.beta"), group, Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: NodeId) -> NodeId {
        g.layer_norm_last(x, bind.node(self.gamma), bind.node(self.beta))
    }
}

/// Sinusoidal embedding of a diffusion timestep.
pub fn timestep_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    assert!(dim % 2 == 0, "timestep embedding dim must be even");
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
        v.push(S::of_f64((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
        v.push(S::of_f64((t as f64 * freq).cos()));
    }
    Tensor::from_vec(&[dim], v)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

/// Max relative error between tape gradients and central finite differences,
/// probing `probes` random coordinates of each input tensor.
///
/// `loss_fn` must be a pure function of the inputs it is given.
pub fn input_grad_check(
    inputs: &[Tensor<f64>],
    probes: usize,
    seed: u64,
    loss_fn: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = loss_fn(&mut g, &ids);
        g.value(l).item()
    };

    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let l = loss_fn(&mut g, &ids);
    let grads = g.backward(l);

    let mut rng = Rng::seed_from(seed);
    let mut max_rel = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for _ in 0..probes {
            let idx = rng.below(input.numel());
            let x0 = input.as_slice()[idx];
            let h = 1e-4 * x0.abs().max(1.0);
            let mut plus = inputs.to_vec();
            let mut t = plus[k].clone();
            t.as_mut_slice()[idx] = x0 + h;
            plus[k] = t;
            let mut minus = inputs.to_vec();
            let mut t = minus[k].clone();
            t.as_mut_slice()[idx] = x0 - h;
            minus[k] = t;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-7 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Same check but probing registered parameters of a model; `build` runs the
/// forward pass and returns the scalar loss node.
pub fn param_grad_check(
    params: &Params<f64>,
    probe_ids: &[ParamId],
    probes: usize,
    seed: u64,
    build: &dyn Fn(&Params<f64>, &mut Graph<f64>) -> (Binding, NodeId),
) -> f64 {
    let eval = |p: &Params<f64>| -> f64 {
        let mut g = Graph::new();
        let (_, l) = build(p, &mut g);
        g.value(l).item()
    };

    let mut g = Graph::new();
    let (bind, l) = build(params, &mut g);
    let grads = g.backward(l);

    let mut rng = Rng::seed_from(seed);
    let mut max_rel = 0.0f64;
    for &pid in probe_ids {
        let tensor = params.tensor(pid);
        let analytic = grads
            .get(bind.node(pid))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        for _ in 0..probes {
            let idx = rng.below(tensor.numel());
            let x0 = tensor.as_slice()[idx];
            let h = 1e-4 * x0.abs().max(1.0);
            let mut plus = params.clone_params();
            let mut t = plus.tensor(pid).clone();
            t.as_mut_slice()[idx] = x0 + h;
            plus.set(pid, t);
            let mut minus = params.clone_params();
            let mut t = minus.tensor(pid).clone();
            t.as_mut_slice()[idx] = x0 - h;
            minus.set(pid, t);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-7 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_streams_are_deterministic() {
        let mut a = Rng::seed_from(7);
        let mut b = Rng::seed_from(7);
        for _ in 0..10 {
            assert_eq!(a.normal_f64(), b.normal_f64());
        }
        assert_ne!(subseed(7, 0), subseed(7, 1));
    }

    #[test]
    fn linear_layer_grad_check() {
        let mut rng = Rng::seed_from(3);
        let mut params = Params::<f64>::new();
        let lin = Linear::new(&mut params, "l", ParamGroup::BackboneSpatial, 5, 4, &mut rng);
        let x = rng.normal_tensor::<f64>(&[3, 5], 1.0);
        let target = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let err = param_grad_check(&params, &[lin.w, lin.b], 6, 11, &|p, g| {
            let bind = p.bind_all(g);
            let xi = g.constant(x.clone());
            let ti = g.constant(target.clone());
            let y = lin.forward(g, &bind, xi);
            let y = g.silu(y);
            let l = g.mse(y, ti);
            (bind, l)
        });
        assert!(err < 1e-5, "linear grad check rel err {err}");
    }

    #[test]
    fn conv_and_norm_grad_check() {
        let mut rng = Rng::seed_from(5);
        let mut params = Params::<f64>::new();
        let conv = Conv2d::new(&mut params, "c", ParamGroup::Codec, 2, 3, 3, 2, 1, &mut rng);
        let ln = LayerNorm::new(&mut params, "ln", ParamGroup::Codec, 3);
        let x = rng.normal_tensor::<f64>(&[2, 2, 6, 6], 1.0);
        let ids: Vec<ParamId> = params.iter().map(|(i, _)| i).collect();
        let err = param_grad_check(&params, &ids, 5, 13, &|p, g| {
            let bind = p.bind_all(g);
            let xi = g.constant(x.clone());
            let y = conv.forward(g, &bind, xi);
            // NCHW -> channel-last tokens, layernorm, silu
            let y = g.permute(y, &[0, 2, 3, 1]);
            let y = ln.forward(g, &bind, y);
            let y = g.silu(y);
            let sq = g.mul(y, y);
            let l = g.mean_all(sq);
            (bind, l)
        });
        assert!(err < 1e-5, "conv/norm grad check rel err {err}");
    }

    #[test]
    fn adamw_moves_params_toward_lower_loss() {
        let mut rng = Rng::seed_from(9);
        let mut params = Params::<f64>::new();
        let w = params.add("w", ParamGroup::Codec, rng.normal_tensor(&[4], 1.0));
        let target = rng.normal_tensor::<f64>(&[4], 1.0);
        let mut opt = AdamW::new(0.05);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let bind = params.bind_all(&mut g);
            let t = g.constant(target.clone());
            let l = g.mse(bind.node(w), t);
            losses.push(g.value(l).item());
            let grads = g.backward(l);
            let gvec: Vec<Option<Tensor<f64>>> =
                (0..params.len()).map(|i| grads.get(bind.node(i)).cloned()).collect();
            opt.step(&mut params, &gvec);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.01), "adamw failed to optimize");
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let e = timestep_embedding::<f64>(500, 64);
        assert_eq!(e.shape(), &[64]);
        assert!(e.as_slice().iter().all(|v| v.abs() <= 1.0));
        // distinct timesteps embed differently
        let e2 = timestep_embedding::<f64>(501, 64);
        assert_ne!(e.as_slice(), e2.as_slice());
    }
}

//! Network building blocks on top of the autograd graph: a parameter
//! registry with deterministic initialization, convolution / norm /
//! attention layers, sinusoidal embeddings, and the AdamW optimizer.
//!
//! Layers hold parameter ids into a `ParamSet`; the actual values live in a
//! plain `Vec<ArrayD<T>>` owned by the model, so a frozen copy of the
//! network is just a second value vector run through the same layers.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Graph, Id, Scalar};
use crate::error::{FodError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in +-sqrt(6 / fan_in).
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Registry of parameter names, shapes, and init rules. The registration
/// order is the canonical parameter order used by the optimizer and the
/// checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    defs: Vec<ParamDef>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> PId {
        self.defs.push(ParamDef {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        PId(self.defs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn name(&self, p: PId) -> &str {
        &self.defs[p.0].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.defs.iter().map(|d| d.name.as_str())
    }

    pub fn shape(&self, p: PId) -> &[usize] {
        &self.defs[p.0].shape
    }

    /// Deterministic initialization: each parameter draws from its own rng
    /// stream split by registration index.
    pub fn init_values<T: Scalar>(&self, rng: &Rng) -> Vec<ArrayD<T>> {
        self.defs
            .iter()
            .enumerate()
            .map(|(i, def)| {
                let n: usize = def.shape.iter().product();
                let mut stream = rng.split(i as u64);
                let data: Vec<T> = match def.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Kaiming { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| T::from_f64(stream.uniform_in(-bound, bound)))
                            .collect()
                    }
                };
                ArrayD::from_shape_vec(IxDyn(&def.shape), data).expect("shape matches")
            })
            .collect()
    }

    /// Validate that `values` matches this set's shapes.
    pub fn check_values<T: Scalar>(&self, values: &[ArrayD<T>]) -> Result<()> {
        if values.len() != self.defs.len() {
            return Err(FodError::invalid(format!(
                "expected {} parameters, got {}",
                self.defs.len(),
                values.len()
            )));
        }
        for (def, v) in self.defs.iter().zip(values) {
            if v.shape() != def.shape.as_slice() {
                return Err(FodError::invalid(format!(
                    "parameter {} shape {:?} does not match {:?}",
                    def.name,
                    v.shape(),
                    def.shape
                )));
            }
        }
        Ok(())
    }
}

/// Lazily binds parameter values into a graph as leaves, memoizing the node
/// id so each parameter appears once per graph.
pub struct Binder {
    ids: Vec<Option<Id>>,
    trainable: bool,
}

impl Binder {
    pub fn new(set: &ParamSet, trainable: bool) -> Self {
        Binder {
            ids: vec![None; set.len()],
            trainable,
        }
    }

    pub fn get<T: Scalar>(&mut self, g: &mut Graph<T>, values: &[ArrayD<T>], p: PId) -> Id {
        if let Some(id) = self.ids[p.0] {
            return id;
        }
        let id = g.leaf(values[p.0].clone(), self.trainable);
        self.ids[p.0] = Some(id);
        id
    }

    /// Node id assigned to a parameter, if it was used in this graph.
    pub fn node_of(&self, p: PId) -> Option<Id> {
        self.ids[p.0]
    }

    /// (param index, node id) for every parameter bound into the graph.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Id)> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| id.map(|id| (i, id)))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 3x3x3 convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub w: PId,
    pub b: PId,
    pub stride: usize,
}

impl Conv3dLayer {
    pub fn new(
        set: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = in_c * 27;
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in }
        };
        Conv3dLayer {
            w: set.register(format!("{name}.w"), &[out_c, fan_in], init),
            b: set.register(format!("{name}.b"), &[out_c], Init::Zeros),
            stride,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
    ) -> Id {
        let w = binder.get(g, values, self.w);
        let b = binder.get(g, values, self.b);
        let y = g.conv3d(x, w, self.stride);
        g.add_channel_bias(y, b)
    }
}

/// 1x1x1 convolution as a channel matmul on [C, S].
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub w: PId,
    pub b: PId,
}

impl Conv1x1 {
    pub fn new(set: &mut ParamSet, name: &str, in_c: usize, out_c: usize, zero_init: bool) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Kaiming { fan_in: in_c }
        };
        Conv1x1 {
            w: set.register(format!("{name}.w"), &[out_c, in_c], init),
            b: set.register(format!("{name}.b"), &[out_c], Init::Zeros),
        }
    }

    /// x: [C_in, S] -> [C_out, S].
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
    ) -> Id {
        let w = binder.get(g, values, self.w);
        let b = binder.get(g, values, self.b);
        let y = g.matmul(w, x);
        g.add_channel_bias(y, b)
    }
}

/// Dense layer on column vectors: x [in, 1] -> [out, 1].
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: PId,
    pub b: PId,
}

impl LinearLayer {
    pub fn new(set: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            w: set.register(
                format!("{name}.w"),
                &[out_dim, in_dim],
                Init::Kaiming { fan_in: in_dim },
            ),
            b: set.register(format!("{name}.b"), &[out_dim], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
    ) -> Id {
        let w = binder.get(g, values, self.w);
        let b = binder.get(g, values, self.b);
        let y = g.matmul(w, x);
        g.add_channel_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub gamma: PId,
    pub beta: PId,
    pub groups: usize,
}

/// Largest group count <= 8 dividing the channel count while keeping at
/// least 4 channels per group. Smaller groups would let the normalization
/// cancel the per-channel embedding bias (a single-channel group removes a
/// channel-constant shift exactly, cutting the time/volume conditioning
/// out of the gradient path).
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 && channels / g >= 4 {
            return g;
        }
    }
    1
}

impl GroupNormLayer {
    pub fn new(set: &mut ParamSet, name: &str, channels: usize) -> Self {
        GroupNormLayer {
            gamma: set.register(format!("{name}.g"), &[channels], Init::Ones),
            beta: set.register(format!("{name}.b"), &[channels], Init::Zeros),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
    ) -> Id {
        let gamma = binder.get(g, values, self.gamma);
        let beta = binder.get(g, values, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Residual block: two 3x3x3 convolutions with pre-norm SiLU and an
/// embedding-conditioned channel bias between them.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv3dLayer,
    emb_proj: LinearLayer,
    norm2: GroupNormLayer,
    conv2: Conv3dLayer,
    skip: Option<Conv1x1>,
}

impl ResBlock {
    pub fn new(set: &mut ParamSet, name: &str, in_c: usize, out_c: usize, emb_dim: usize) -> Self {
        ResBlock {
            norm1: GroupNormLayer::new(set, &format!("{name}.norm1"), in_c),
            conv1: Conv3dLayer::new(set, &format!("{name}.conv1"), in_c, out_c, 1, false),
            emb_proj: LinearLayer::new(set, &format!("{name}.emb"), emb_dim, out_c),
            norm2: GroupNormLayer::new(set, &format!("{name}.norm2"), out_c),
            conv2: Conv3dLayer::new(set, &format!("{name}.conv2"), out_c, out_c, 1, false),
            skip: if in_c != out_c {
                Some(Conv1x1::new(set, &format!("{name}.skip"), in_c, out_c, false))
            } else {
                None
            },
        }
    }

    /// x: [C_in, D, H, W], emb: [E, 1] -> [C_out, D, H, W].
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
        emb: Id,
    ) -> Id {
        let h = self.norm1.forward(g, binder, values, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, binder, values, h);

        let eb = self.emb_proj.forward(g, binder, values, emb);
        let out_c = g.value(eb).shape()[0];
        let eb = g.reshape(eb, &[out_c]);
        let h = g.add_channel_bias(h, eb);

        let h = self.norm2.forward(g, binder, values, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, binder, values, h);

        let shape = g.value(x).shape().to_vec();
        let shortcut = match &self.skip {
            None => x,
            Some(skip) => {
                let s: usize = shape[1..].iter().product();
                let flat = g.reshape(x, &[shape[0], s]);
                let y = skip.forward(g, binder, values, flat);
                g.reshape(y, &[out_c, shape[1], shape[2], shape[3]])
            }
        };
        g.add(h, shortcut)
    }
}

/// Single-head attention block with pre-norm, residual, and zero-initialized
/// output projection. With `kv = None` it is self-attention; otherwise the
/// Key/Value come from the provided [C, S_kv] feature map.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNormLayer,
    wq: PId,
    wk: PId,
    wv: PId,
    proj: Conv1x1,
    channels: usize,
}

impl AttentionBlock {
    pub fn new(set: &mut ParamSet, name: &str, channels: usize, zero_init: bool) -> Self {
        let init = Init::Kaiming { fan_in: channels };
        AttentionBlock {
            norm: GroupNormLayer::new(set, &format!("{name}.norm"), channels),
            wq: set.register(format!("{name}.wq"), &[channels, channels], init),
            wk: set.register(format!("{name}.wk"), &[channels, channels], init),
            wv: set.register(format!("{name}.wv"), &[channels, channels], init),
            proj: Conv1x1::new(set, &format!("{name}.proj"), channels, channels, zero_init),
            channels,
        }
    }

    /// x: [C, D, H, W]; kv: optional [C, S_kv] node.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        values: &[ArrayD<T>],
        x: Id,
        kv: Option<Id>,
    ) -> Id {
        let shape = g.value(x).shape().to_vec();
        let (c, s) = (shape[0], shape[1..].iter().product::<usize>());
        assert_eq!(c, self.channels);

        let h = self.norm.forward(g, binder, values, x);
        let h2 = g.reshape(h, &[c, s]);

        let wq = binder.get(g, values, self.wq);
        let wk = binder.get(g, values, self.wk);
        let wv = binder.get(g, values, self.wv);

        let q = g.matmul(wq, h2);
        let source = kv.unwrap_or(h2);
        let k = g.matmul(wk, source);
        let v = g.matmul(wv, source);

        let qt = g.transpose(q);
        let scores = g.matmul(qt, k); // [S, S_kv]
        let scores = g.scale(scores, T::from_f64(1.0 / (c as f64).sqrt()));
        let attn = g.softmax_rows(scores);
        let attn_t = g.transpose(attn);
        let out = g.matmul(v, attn_t); // [C, S]

        let out = self.proj.forward(g, binder, values, out);
        let out = g.reshape(out, &shape);
        g.add(x, out)
    }
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Standard sinusoidal position embedding: interleaved (sin, cos) pairs at
/// geometrically spaced frequencies. Injective over the integer ranges used
/// here (timesteps, orders, volume numbers).
pub fn sinusoidal_embed(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(FodError::invalid(format!(
            "embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = value * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

/// Column-vector constant for an embedding.
pub fn embed_column<T: Scalar>(emb: &[f64]) -> ArrayD<T> {
    ArrayD::from_shape_vec(
        IxDyn(&[emb.len(), 1]),
        emb.iter().map(|&v| T::from_f64(v)).collect(),
    )
    .expect("column shape")
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are stored per parameter in
/// registration order; the update runs in that order, so training is
/// deterministic.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(set: &ParamSet, cfg: AdamWConfig) -> Self {
        let zeros: Vec<ArrayD<f32>> = (0..set.len())
            .map(|i| ArrayD::zeros(IxDyn(set.shape(PId(i)))))
            .collect();
        AdamW {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Apply one update. `grads[i] = None` leaves parameter i untouched.
    pub fn step(&mut self, params: &mut [ArrayD<f32>], grads: &[Option<ArrayD<f32>>], lr: f64) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g as f64;
                    let mn = b1 * (*m as f64) + (1.0 - b1) * g;
                    let vn = b2 * (*v as f64) + (1.0 - b2) * g * g;
                    *m = mn as f32;
                    *v = vn as f32;
                    let mhat = mn / bc1;
                    let vhat = vn / bc2;
                    let upd = mhat / (vhat.sqrt() + self.cfg.eps)
                        + self.cfg.weight_decay * (*p as f64);
                    *p = (*p as f64 - lr * upd) as f32;
                });
        }
    }
}

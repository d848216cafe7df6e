//! Encoder-decoder backbone with skip connections and two 1x1 heads.
//!
//! The network is compiled from a [`ModelConfig`] into a small tape of nodes
//! (conv, transposed conv, concat); forward records every activation and the
//! backward pass walks the tape in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Act, ConvGeom};
use super::{Scalar, TensorF};
use crate::error::{Error, Result};

/// Regression values per anchor: (dx, dz, log w, log l, sin, cos).
pub const REG_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Number of stride-2 downsampling stages (and matching upsampling stages).
    pub stages: usize,
    /// Convolutions per encoder stage, the strided one included.
    pub convs_per_stage: usize,
    /// Channel width at each resolution level, `stages + 1` entries.
    pub widths: Vec<usize>,
    pub anchors_per_cell: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_stages(3)
    }
}

impl ModelConfig {
    pub fn with_stages(stages: usize) -> Self {
        let widths = (0..=stages).map(|s| [24, 32, 48, 64, 96, 128][s.min(5)]).collect();
        Self {
            in_channels: crate::spg::SPG_CHANNELS,
            stages,
            convs_per_stage: 2,
            widths,
            anchors_per_cell: 2,
        }
    }

    /// The 4-stage, 3-convs-per-stage layout.
    pub fn deep() -> Self {
        Self {
            convs_per_stage: 3,
            ..Self::with_stages(4)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.convs_per_stage == 0 || self.anchors_per_cell == 0 {
            return Err(Error::Config(
                "stages, convs_per_stage and anchors_per_cell must be >= 1".into(),
            ));
        }
        if self.widths.len() != self.stages + 1 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths needs {} positive entries, got {:?}",
                self.stages + 1,
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
enum LayerKind {
    Conv(ConvGeom),
    TConv { cin: usize, cout: usize },
}

#[derive(Clone, Debug)]
struct LayerDef {
    name: String,
    kind: LayerKind,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Layer { layer: usize, input: usize, relu: bool },
    Concat { a: usize, b: usize },
}

#[derive(Clone, Debug)]
struct Graph {
    layers: Vec<LayerDef>,
    nodes: Vec<Node>,
    cls_out: usize,
    reg_out: usize,
}

fn build_graph(cfg: &ModelConfig) -> (Graph, Vec<(String, Vec<usize>)>) {
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut nodes = Vec::new();
    // activation 0 is the network input; node i produces activation i + 1
    let mut add = |name: String,
                   kind: LayerKind,
                   input: usize,
                   relu: bool,
                   layers: &mut Vec<LayerDef>,
                   nodes: &mut Vec<Node>|
     -> usize {
        let (wshape, cout) = match kind {
            LayerKind::Conv(g) => (vec![g.cout, g.cin, g.k, g.k], g.cout),
            LayerKind::TConv { cin, cout } => (vec![cin, cout, 2, 2], cout),
        };
        let weight = params.len();
        params.push((format!("{name}.weight"), wshape));
        params.push((format!("{name}.bias"), vec![cout]));
        layers.push(LayerDef {
            name,
            kind,
            weight,
            bias: weight + 1,
        });
        nodes.push(Node::Layer {
            layer: layers.len() - 1,
            input,
            relu,
        });
        nodes.len()
    };
    let conv3 = |cin, cout, stride| {
        LayerKind::Conv(ConvGeom {
            cin,
            cout,
            k: 3,
            stride,
            pad: 1,
        })
    };
    let w = &cfg.widths;
    let mut h = add(
        "stem".into(),
        conv3(cfg.in_channels, w[0], 1),
        0,
        true,
        &mut layers,
        &mut nodes,
    );
    let mut skips = vec![h];
    for s in 1..=cfg.stages {
        h = add(
            format!("down{s}.conv0"),
            conv3(w[s - 1], w[s], 2),
            h,
            true,
            &mut layers,
            &mut nodes,
        );
        for k in 1..cfg.convs_per_stage {
            h = add(
                format!("down{s}.conv{k}"),
                conv3(w[s], w[s], 1),
                h,
                true,
                &mut layers,
                &mut nodes,
            );
        }
        skips.push(h);
    }
    for s in (1..=cfg.stages).rev() {
        let up = add(
            format!("up{s}.tconv"),
            LayerKind::TConv {
                cin: w[s],
                cout: w[s - 1],
            },
            h,
            true,
            &mut layers,
            &mut nodes,
        );
        nodes.push(Node::Concat {
            a: up,
            b: skips[s - 1],
        });
        h = nodes.len();
        h = add(
            format!("up{s}.conv0"),
            conv3(2 * w[s - 1], w[s - 1], 1),
            h,
            true,
            &mut layers,
            &mut nodes,
        );
        for k in 1..cfg.convs_per_stage.saturating_sub(1) {
            h = add(
                format!("up{s}.conv{k}"),
                conv3(w[s - 1], w[s - 1], 1),
                h,
                true,
                &mut layers,
                &mut nodes,
            );
        }
    }
    let point = |cout| {
        LayerKind::Conv(ConvGeom {
            cin: w[0],
            cout,
            k: 1,
            stride: 1,
            pad: 0,
        })
    };
    let cls_out = add(
        "head.cls".into(),
        point(cfg.anchors_per_cell),
        h,
        false,
        &mut layers,
        &mut nodes,
    );
    let reg_out = add(
        "head.reg".into(),
        point(REG_DIM * cfg.anchors_per_cell),
        h,
        false,
        &mut layers,
        &mut nodes,
    );
    (
        Graph {
            layers,
            nodes,
            cls_out,
            reg_out,
        },
        params,
    )
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Network parameters plus the architecture they belong to.
#[derive(Debug)]
pub struct ModelWeights<T = f32> {
    config: ModelConfig,
    graph: Graph,
    params: Vec<Param<T>>,
    id: u64,
    version: u64,
}

impl<T: Clone> Clone for ModelWeights<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self.params.clone(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl<T: PartialEq> PartialEq for ModelWeights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// All-zero parameters (biases included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (graph, specs) = build_graph(config);
        let params = specs
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                Param {
                    name,
                    shape,
                    data: vec![T::ZERO; len],
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            graph,
            params,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    /// Kaiming-uniform (fan-in) kernels, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &w.graph.layers {
            let fan_in = match layer.kind {
                LayerKind::Conv(g) => g.cin * g.k * g.k,
                LayerKind::TConv { cin, .. } => cin,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut w.params[layer.weight].data {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Ok(w)
    }

    /// Builds weights from named tensors (e.g. a loaded checkpoint). Every
    /// parameter of `config` must be present with the right shape.
    pub fn from_params(config: &ModelConfig, named: Vec<Param<T>>) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        for p in &mut w.params {
            let src = named.iter().find(|q| q.name == p.name).ok_or_else(|| {
                Error::Format(format!("missing parameter '{}'", p.name))
            })?;
            if src.shape != p.shape {
                return Err(Error::shape(
                    &p.name,
                    format!("expected {:?}, found {:?}", p.shape, src.shape),
                ));
            }
            p.data.clone_from(&src.data);
        }
        Ok(w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        self.version += 1;
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    /// Names of the layers in forward order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.graph.layers.iter().map(|l| l.name.as_str()).collect()
    }
}

/// Per-cell classification logits `(N, A, H, W)` and regression values
/// `(N, 6A, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T = f32> {
    pub cls: TensorF<T>,
    pub reg: TensorF<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            cls: TensorF::zeros(self.cls.shape()),
            reg: TensorF::zeros(self.reg.shape()),
        }
    }

    pub fn batch(&self) -> usize {
        self.cls.shape()[0]
    }
}

#[derive(Debug)]
struct SampleTape<T> {
    acts: Vec<Act<T>>,
    cols: Vec<Vec<T>>,
}

/// Activations recorded by [`model_forward`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T = f32> {
    weights_id: u64,
    weights_version: u64,
    relu_acts: Vec<usize>,
    samples: Vec<SampleTape<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Whether every ReLU in both caches agrees on which units are active.
    pub fn same_relu_pattern(&self, other: &Self) -> bool {
        self.samples.iter().zip(&other.samples).all(|(a, b)| {
            self.relu_acts.iter().all(|&i| {
                let (x, y) = (&a.acts[i], &b.acts[i]);
                x.data
                    .iter()
                    .zip(&y.data)
                    .all(|(p, q)| (*p > T::ZERO) == (*q > T::ZERO))
            })
        })
    }
}

fn forward_sample<T: Scalar>(w: &ModelWeights<T>, input: Act<T>) -> Result<SampleTape<T>> {
    let mut acts = vec![input];
    let mut cols = Vec::with_capacity(w.graph.nodes.len());
    for node in &w.graph.nodes {
        match *node {
            Node::Layer { layer, input, relu } => {
                let def = &w.graph.layers[layer];
                let x = &acts[input];
                let wt = &w.params[def.weight].data;
                let b = &w.params[def.bias].data;
                let (mut out, c) = match def.kind {
                    LayerKind::Conv(g) => {
                        if x.c != g.cin {
                            return Err(Error::shape(
                                &def.name,
                                format!("expected {} input channels, got {}", g.cin, x.c),
                            ));
                        }
                        layers::conv_forward(x, &g, wt, b)
                    }
                    LayerKind::TConv { cin, cout } => {
                        if x.c != cin {
                            return Err(Error::shape(
                                &def.name,
                                format!("expected {} input channels, got {}", cin, x.c),
                            ));
                        }
                        (layers::tconv_forward(x, cout, wt, b), Vec::new())
                    }
                };
                if relu {
                    layers::relu_inplace(&mut out);
                }
                acts.push(out);
                cols.push(c);
            }
            Node::Concat { a, b } => {
                let (x, y) = (&acts[a], &acts[b]);
                if (x.h, x.w) != (y.h, y.w) {
                    return Err(Error::shape(
                        "concat",
                        format!("{}x{} vs {}x{}", x.h, x.w, y.h, y.w),
                    ));
                }
                let out = layers::concat(x, y);
                acts.push(out);
                cols.push(Vec::new());
            }
        }
    }
    Ok(SampleTape { acts, cols })
}

/// Runs the backbone and both heads on an `(N, C, H, W)` batch.
pub fn model_forward<T: Scalar>(
    x: &TensorF<T>,
    w: &ModelWeights<T>,
) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
    let cfg = &w.config;
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("input", format!("expected NCHW, got {shape:?}")));
    }
    let (n, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    if c != cfg.in_channels {
        return Err(Error::shape(
            "input",
            format!("expected {} channels, got {c}", cfg.in_channels),
        ));
    }
    let m = 1usize << cfg.stages;
    if h == 0 || wd == 0 || h % m != 0 || wd % m != 0 {
        return Err(Error::shape(
            "input",
            format!("spatial size {h}x{wd} must be a positive multiple of {m}"),
        ));
    }
    let a = cfg.anchors_per_cell;
    let mut cls = Vec::with_capacity(n * a * h * wd);
    let mut reg = Vec::with_capacity(n * REG_DIM * a * h * wd);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let input = Act {
            c,
            h,
            w: wd,
            data: x.sample(i).to_vec(),
        };
        let tape = forward_sample(w, input)?;
        cls.extend_from_slice(&tape.acts[w.graph.cls_out].data);
        reg.extend_from_slice(&tape.acts[w.graph.reg_out].data);
        samples.push(tape);
    }
    Ok((
        HeadOutputs {
            cls: TensorF::from_vec(&[n, a, h, wd], cls)?,
            reg: TensorF::from_vec(&[n, REG_DIM * a, h, wd], reg)?,
        },
        ForwardCache {
            weights_id: w.id,
            weights_version: w.version,
            relu_acts: w
                .graph
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| matches!(n, Node::Layer { relu: true, .. }))
                .map(|(i, _)| i + 1)
                .collect(),
            samples,
        },
    ))
}

/// Gradients of every parameter (same order as [`ModelWeights::params`]) and
/// of the input batch.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub params: Vec<Vec<T>>,
    pub input: Option<TensorF<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct BackwardOptions {
    pub input_grad: bool,
    /// Test hook: negate the weight gradient of the named layer.
    #[doc(hidden)]
    pub fault_layer: Option<String>,
}

pub fn model_backward<T: Scalar>(
    grads_out: &HeadOutputs<T>,
    cache: &ForwardCache<T>,
    w: &ModelWeights<T>,
) -> Result<Gradients<T>> {
    model_backward_with(
        grads_out,
        cache,
        w,
        &BackwardOptions {
            input_grad: true,
            fault_layer: None,
        },
    )
}

pub fn model_backward_with<T: Scalar>(
    grads_out: &HeadOutputs<T>,
    cache: &ForwardCache<T>,
    w: &ModelWeights<T>,
    opts: &BackwardOptions,
) -> Result<Gradients<T>> {
    if cache.weights_id != w.id || cache.weights_version != w.version {
        return Err(Error::StaleCache);
    }
    let n = cache.samples.len();
    if grads_out.batch() != n {
        return Err(Error::shape(
            "backward",
            format!("gradient batch {} vs cached batch {n}", grads_out.batch()),
        ));
    }
    let mut pgrads: Vec<Vec<T>> = w.params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect();
    let mut input_grads = Vec::new();
    for (i, tape) in cache.samples.iter().enumerate() {
        let mut dacts: Vec<Option<Act<T>>> = (0..tape.acts.len()).map(|_| None).collect();
        let cls_a = &tape.acts[w.graph.cls_out];
        let reg_a = &tape.acts[w.graph.reg_out];
        if grads_out.cls.sample(i).len() != cls_a.data.len()
            || grads_out.reg.sample(i).len() != reg_a.data.len()
        {
            return Err(Error::shape("backward", "head gradient shape mismatch"));
        }
        dacts[w.graph.cls_out] = Some(Act {
            data: grads_out.cls.sample(i).to_vec(),
            ..cls_a.clone_shape()
        });
        dacts[w.graph.reg_out] = Some(Act {
            data: grads_out.reg.sample(i).to_vec(),
            ..reg_a.clone_shape()
        });
        for (ni, node) in w.graph.nodes.iter().enumerate().rev() {
            let out_idx = ni + 1;
            let Some(mut g) = dacts[out_idx].take() else {
                continue;
            };
            match *node {
                Node::Layer { layer, input, relu } => {
                    let def = &w.graph.layers[layer];
                    if relu {
                        layers::relu_backward_inplace(&tape.acts[out_idx], &mut g);
                    }
                    let need_dx = input != 0 || opts.input_grad;
                    let wt = &w.params[def.weight].data;
                    let x = &tape.acts[input];
                    let (dw_slot, db_slot) = two_mut(&mut pgrads, def.weight, def.bias);
                    let mut dw_local = vec![T::ZERO; dw_slot.len()];
                    let dx = match def.kind {
                        LayerKind::Conv(geom) => layers::conv_backward(
                            x,
                            &tape.cols[ni],
                            &geom,
                            wt,
                            &g,
                            &mut dw_local,
                            db_slot,
                            need_dx,
                        ),
                        LayerKind::TConv { .. } => {
                            let dx = layers::tconv_backward(x, wt, &g, &mut dw_local, db_slot);
                            need_dx.then_some(dx)
                        }
                    };
                    let flip = opts.fault_layer.as_deref() == Some(def.name.as_str());
                    for (acc, v) in dw_slot.iter_mut().zip(dw_local) {
                        if flip {
                            *acc -= v;
                        } else {
                            *acc += v;
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut dacts[input], dx);
                    }
                }
                Node::Concat { a, b } => {
                    let (ga, gb) = layers::split(g, tape.acts[a].c);
                    accumulate(&mut dacts[a], ga);
                    accumulate(&mut dacts[b], gb);
                }
            }
        }
        if opts.input_grad {
            let x = &tape.acts[0];
            let d = dacts[0]
                .take()
                .map(|a| a.data)
                .unwrap_or_else(|| vec![T::ZERO; x.data.len()]);
            input_grads.extend(d);
        }
    }
    let input = if opts.input_grad {
        let a = &cache.samples[0].acts[0];
        Some(TensorF::from_vec(&[n, a.c, a.h, a.w], input_grads)?)
    } else {
        None
    };
    Ok(Gradients {
        params: pgrads,
        input,
    })
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn accumulate<T: Scalar>(slot: &mut Option<Act<T>>, g: Act<T>) {
    match slot {
        Some(acc) => {
            for (x, y) in acc.data.iter_mut().zip(g.data) {
                *x += y;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Act<T> {
    fn clone_shape(&self) -> Act<T> {
        Act {
            c: self.c,
            h: self.h,
            w: self.w,
            data: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 6, 8, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_follow_input_resolution() {
        let w = ModelWeights::<f32>::init(&ModelConfig::default(), 1).unwrap();
        let x = TensorF::zeros(&[1, 22, 32, 32]);
        let (out, _) = model_forward(&x, &w).unwrap();
        assert_eq!(out.cls.shape(), &[1, 2, 32, 32]);
        assert_eq!(out.reg.shape(), &[1, 12, 32, 32]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let w = ModelWeights::<f32>::zeros(&small()).unwrap();
        let x = TensorF::from_vec(&[1, 22, 8, 8], (0..22 * 64).map(|i| i as f32).collect()).unwrap();
        let (out, _) = model_forward(&x, &w).unwrap();
        assert!(out.cls.data().iter().all(|&v| v == 0.0));
        assert!(out.reg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let w = ModelWeights::<f32>::zeros(&small()).unwrap();
        let err = model_forward(&TensorF::zeros(&[1, 21, 8, 8]), &w).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let err = model_forward(&TensorF::zeros(&[1, 22, 12, 12]), &w).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let w = ModelWeights::<f64>::init(&small(), 3).unwrap();
        let x = TensorF::from_vec(&[2, 22, 8, 8], (0..2 * 22 * 64).map(|i| (i % 7) as f64).collect())
            .unwrap();
        let (out, cache) = model_forward(&x, &w).unwrap();
        let g = model_backward(&out.zeros_like(), &cache, &w).unwrap();
        assert!(g.params.iter().flatten().all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_spatial_sum() {
        let w = ModelWeights::<f64>::init(&small(), 4).unwrap();
        let x = TensorF::from_vec(&[1, 22, 8, 8], (0..22 * 64).map(|i| (i % 5) as f64 * 0.1).collect())
            .unwrap();
        let (out, cache) = model_forward(&x, &w).unwrap();
        let mut up = out.zeros_like();
        for (i, v) in up.cls.data_mut().iter_mut().enumerate() {
            *v = (i % 3) as f64 - 1.0;
        }
        let g = model_backward(&up, &cache, &w).unwrap();
        let idx = w.params().iter().position(|p| p.name == "head.cls.bias").unwrap();
        let plane = 64;
        for a in 0..2 {
            let s: f64 = up.cls.data()[a * plane..(a + 1) * plane].iter().sum();
            assert!((g.params[idx][a] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut w = ModelWeights::<f32>::init(&small(), 5).unwrap();
        let (out, cache) = model_forward(&TensorF::zeros(&[1, 22, 8, 8]), &w).unwrap();
        w.params_mut()[0].data[0] += 1.0;
        assert!(matches!(
            model_backward(&out, &cache, &w),
            Err(Error::StaleCache)
        ));
    }
}

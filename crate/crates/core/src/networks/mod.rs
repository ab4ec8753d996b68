//! Generator, discriminator, and projection networks.
//!
//! All three are defined over the autodiff graph in [`crate::tensor`]; an
//! inference call is just a graph built from constant leaves. Images cross
//! the module boundary in `[0,1]` and are converted to the `[-1,1]` model
//! range internally.

pub mod checkpoint;

use crate::dataset::{StainDomain, StainedImage};
use crate::error::{Error, Result};
use crate::tensor::{randn, Arr, Graph, Id, ParamId, ParamStore};
use ndarray::{Array2, Array3, IxDyn};
use rand_chacha::ChaCha12Rng;
use std::collections::{HashMap, HashSet};

/// Architecture hyperparameters shared by the three networks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Generator stem width; downsampling stages double it.
    pub base_width: usize,
    /// Residual blocks at the bottleneck.
    pub n_res_blocks: usize,
    /// Discriminator first-layer width.
    pub disc_width: usize,
    /// Number of strided discriminator convs.
    pub disc_layers: usize,
    /// Embedding dimension D of the projection heads.
    pub embed_dim: usize,
    /// Hidden width of the two-layer projection MLP.
    pub proj_hidden: usize,
}

impl Default for NetConfig {
    /// Full-scale configuration: ResNet-6Blocks at width 64.
    fn default() -> Self {
        Self {
            base_width: 64,
            n_res_blocks: 6,
            disc_width: 64,
            disc_layers: 3,
            embed_dim: 256,
            proj_hidden: 256,
        }
    }
}

impl NetConfig {
    /// CPU-feasible configuration used by the end-to-end test runs.
    pub fn desk() -> Self {
        Self {
            base_width: 32,
            n_res_blocks: 3,
            disc_width: 32,
            disc_layers: 3,
            embed_dim: 256,
            proj_hidden: 256,
        }
    }
}

/// Per-graph binding of store parameters to graph leaves.
///
/// A parameter used twice in one graph (the generator encoder runs both on
/// the input and on its own output) must map to a single leaf so gradients
/// from both uses accumulate.
pub struct Bind<'g> {
    pub graph: &'g mut Graph,
    store: &'g ParamStore,
    trainable: &'g HashSet<ParamId>,
    bound: HashMap<ParamId, Id>,
}

impl<'g> Bind<'g> {
    pub fn new(graph: &'g mut Graph, store: &'g ParamStore, trainable: &'g HashSet<ParamId>) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Leaf id for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Id {
        if let Some(&node) = self.bound.get(&id) {
            return node;
        }
        let node = self
            .graph
            .leaf(self.store.get(id).clone(), self.trainable.contains(&id));
        self.bound.insert(id, node);
        node
    }

    /// Gradient of a bound parameter after backward, if any flowed.
    pub fn grad_of(&self, id: ParamId) -> Option<Arr> {
        self.bound.get(&id).and_then(|n| self.graph.grad(*n).cloned())
    }

    pub fn bound_node(&self, id: ParamId) -> Option<Id> {
        self.bound.get(&id).copied()
    }
}

#[derive(Debug, Clone)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

fn reg_conv(
    store: &mut ParamStore,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> ConvP {
    let w = store.register(format!("{name}.w"), randn(&[co, ci, k, k], 0.02, rng));
    let b = store.register(format!("{name}.b"), Arr::zeros(IxDyn(&[co])));
    ConvP { w, b }
}

fn reg_norm(store: &mut ParamStore, name: &str, c: usize) -> NormP {
    let gamma = store.register(format!("{name}.gamma"), Arr::ones(IxDyn(&[c])));
    let beta = store.register(format!("{name}.beta"), Arr::zeros(IxDyn(&[c])));
    NormP { gamma, beta }
}

/// ResNet-style encoder/decoder generator.
///
/// Encoder: 7x7 stem then two stride-2 stages, widths (w, 2w, 4w); each
/// stage output is an exposed feature tap with downsampling factors 1, 2, 4.
/// Bottleneck: `n_res_blocks` residual blocks at 4w. Decoder: two
/// nearest-upsample + conv stages and a 7x7 head with tanh output.
pub struct GeneratorNet {
    stem: (ConvP, NormP),
    down: Vec<(ConvP, NormP)>,
    res: Vec<(ConvP, NormP, ConvP, NormP)>,
    up: Vec<(ConvP, NormP)>,
    head: ConvP,
    pub base_width: usize,
    pub n_res_blocks: usize,
}

impl GeneratorNet {
    pub fn build(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha12Rng) -> Self {
        let w = cfg.base_width;
        let stem = (
            reg_conv(store, "g.stem.conv", w, 3, 7, rng),
            reg_norm(store, "g.stem.norm", w),
        );
        let mut down = Vec::new();
        for (i, (ci, co)) in [(w, 2 * w), (2 * w, 4 * w)].into_iter().enumerate() {
            down.push((
                reg_conv(store, &format!("g.down{i}.conv"), co, ci, 3, rng),
                reg_norm(store, &format!("g.down{i}.norm"), co),
            ));
        }
        let mut res = Vec::new();
        for i in 0..cfg.n_res_blocks {
            res.push((
                reg_conv(store, &format!("g.res{i}.conv1"), 4 * w, 4 * w, 3, rng),
                reg_norm(store, &format!("g.res{i}.norm1"), 4 * w),
                reg_conv(store, &format!("g.res{i}.conv2"), 4 * w, 4 * w, 3, rng),
                reg_norm(store, &format!("g.res{i}.norm2"), 4 * w),
            ));
        }
        let mut up = Vec::new();
        for (i, (ci, co)) in [(4 * w, 2 * w), (2 * w, w)].into_iter().enumerate() {
            up.push((
                reg_conv(store, &format!("g.up{i}.conv"), co, ci, 3, rng),
                reg_norm(store, &format!("g.up{i}.norm"), co),
            ));
        }
        let head = reg_conv(store, "g.head.conv", 3, w, 7, rng);
        Self {
            stem,
            down,
            res,
            up,
            head,
            base_width: cfg.base_width,
            n_res_blocks: cfg.n_res_blocks,
        }
    }

    /// Total spatial downsampling factor of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << self.down.len()
    }

    /// Downsampling factor of each exposed feature tap.
    pub fn tap_factors(&self) -> Vec<usize> {
        (0..=self.down.len()).map(|i| 1 << i).collect()
    }

    /// Channel count of each exposed feature tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        (0..=self.down.len()).map(|i| self.base_width << i).collect()
    }

    /// Encoder pass; returns one feature tap per stage (stem plus each
    /// downsampling stage). The last tap is the bottleneck input.
    pub fn encode(&self, b: &mut Bind, x: Id) -> Vec<Id> {
        let mut taps = Vec::with_capacity(1 + self.down.len());
        let (c, n) = (&self.stem.0, &self.stem.1);
        let (w, bb, gm, bt) = (b.p(c.w), b.p(c.b), b.p(n.gamma), b.p(n.beta));
        let mut h = b.graph.conv2d(x, w, bb, 1, 3);
        h = b.graph.instance_norm(h, gm, bt);
        h = b.graph.relu(h);
        taps.push(h);
        for (c, n) in &self.down {
            let (w, bb, gm, bt) = (b.p(c.w), b.p(c.b), b.p(n.gamma), b.p(n.beta));
            h = b.graph.conv2d(h, w, bb, 2, 1);
            h = b.graph.instance_norm(h, gm, bt);
            h = b.graph.relu(h);
            taps.push(h);
        }
        taps
    }

    /// Bottleneck and decoder from the last encoder tap to a model-range
    /// (tanh) output.
    pub fn decode(&self, b: &mut Bind, z: Id) -> Id {
        let mut h = z;
        for (c1, n1, c2, n2) in &self.res {
            let skip = h;
            let (w1, b1, g1, t1) = (b.p(c1.w), b.p(c1.b), b.p(n1.gamma), b.p(n1.beta));
            let mut r = b.graph.conv2d(h, w1, b1, 1, 1);
            r = b.graph.instance_norm(r, g1, t1);
            r = b.graph.relu(r);
            let (w2, b2, g2, t2) = (b.p(c2.w), b.p(c2.b), b.p(n2.gamma), b.p(n2.beta));
            r = b.graph.conv2d(r, w2, b2, 1, 1);
            r = b.graph.instance_norm(r, g2, t2);
            h = b.graph.add(skip, r);
        }
        for (c, n) in &self.up {
            let (w, bb, gm, bt) = (b.p(c.w), b.p(c.b), b.p(n.gamma), b.p(n.beta));
            h = b.graph.upsample2(h);
            h = b.graph.conv2d(h, w, bb, 1, 1);
            h = b.graph.instance_norm(h, gm, bt);
            h = b.graph.relu(h);
        }
        let (w, bb) = (b.p(self.head.w), b.p(self.head.b));
        h = b.graph.conv2d(h, w, bb, 1, 3);
        b.graph.tanh(h)
    }

    /// Full pass: model-range input to model-range output plus encoder taps.
    pub fn forward(&self, b: &mut Bind, x: Id) -> (Id, Vec<Id>) {
        let taps = self.encode(b, x);
        let out = self.decode(b, *taps.last().expect("encoder produces taps"));
        (out, taps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        let push_conv = |c: &ConvP, out: &mut Vec<ParamId>| {
            out.push(c.w);
            out.push(c.b);
        };
        let push_norm = |n: &NormP, out: &mut Vec<ParamId>| {
            out.push(n.gamma);
            out.push(n.beta);
        };
        push_conv(&self.stem.0, &mut out);
        push_norm(&self.stem.1, &mut out);
        for (c, n) in &self.down {
            push_conv(c, &mut out);
            push_norm(n, &mut out);
        }
        for (c1, n1, c2, n2) in &self.res {
            push_conv(c1, &mut out);
            push_norm(n1, &mut out);
            push_conv(c2, &mut out);
            push_norm(n2, &mut out);
        }
        for (c, n) in &self.up {
            push_conv(c, &mut out);
            push_norm(n, &mut out);
        }
        push_conv(&self.head, &mut out);
        out
    }
}

/// PatchGAN discriminator: a conv stack emitting an h'×w'×1 logit map of
/// patch-level real/fake scores.
pub struct DiscriminatorNet {
    layers: Vec<(ConvP, Option<NormP>, usize)>, // (conv, norm, stride)
    pub receptive_field: usize,
}

impl DiscriminatorNet {
    pub fn build(store: &mut ParamStore, cfg: &NetConfig, rng: &mut ChaCha12Rng) -> Self {
        let w = cfg.disc_width;
        let mut layers: Vec<(ConvP, Option<NormP>, usize)> = Vec::new();
        let mut ci = 3;
        let mut co = w;
        for i in 0..cfg.disc_layers {
            let norm = if i == 0 {
                None
            } else {
                Some(reg_norm(store, &format!("d.c{i}.norm"), co))
            };
            layers.push((reg_conv(store, &format!("d.c{i}.conv"), co, ci, 4, rng), norm, 2));
            ci = co;
            co = (co * 2).min(w * 8);
        }
        let i = cfg.disc_layers;
        layers.push((
            reg_conv(store, &format!("d.c{i}.conv"), co, ci, 4, rng),
            Some(reg_norm(store, &format!("d.c{i}.norm"), co)),
            1,
        ));
        let logit = reg_conv(store, &format!("d.c{}.conv", i + 1), 1, co, 4, rng);
        layers.push((logit, None, 1));

        let mut rf = 1usize;
        let mut jump = 1usize;
        for (_, _, stride) in &layers {
            rf += 3 * jump;
            jump *= stride;
        }
        Self {
            layers,
            receptive_field: rf,
        }
    }

    /// Logit map from a model-range image.
    pub fn forward(&self, b: &mut Bind, x: Id) -> Id {
        let n_layers = self.layers.len();
        let mut h = x;
        for (i, (c, norm, stride)) in self.layers.iter().enumerate() {
            let (w, bb) = (b.p(c.w), b.p(c.b));
            h = b.graph.conv2d(h, w, bb, *stride, 1);
            if let Some(n) = norm {
                let (gm, bt) = (b.p(n.gamma), b.p(n.beta));
                h = b.graph.instance_norm(h, gm, bt);
            }
            if i + 1 < n_layers {
                h = b.graph.leaky_relu(h, 0.2);
            }
        }
        h
    }

    /// Forward pass with every weight supplied as an existing graph node,
    /// in `params()` order. Gradient checks use this to drive the weights
    /// as differentiable leaves.
    pub fn forward_with_weights(&self, g: &mut Graph, weights: &[Id], x: Id) -> Id {
        let mut k = 0usize;
        let mut next = || {
            let id = weights[k];
            k += 1;
            id
        };
        let n_layers = self.layers.len();
        let mut h = x;
        for (i, (_, norm, stride)) in self.layers.iter().enumerate() {
            let (w, b) = (next(), next());
            h = g.conv2d(h, w, b, *stride, 1);
            if norm.is_some() {
                let (gm, bt) = (next(), next());
                h = g.instance_norm(h, gm, bt);
            }
            if i + 1 < n_layers {
                h = g.leaky_relu(h, 0.2);
            }
        }
        h
    }

    /// Smallest input size that still yields a 1x1 logit map.
    pub fn min_input(&self) -> usize {
        // walk the stack backwards from a 1x1 output
        let mut s = 1usize;
        for (_, _, stride) in self.layers.iter().rev() {
            s = (s - 1) * stride + 4 - 2; // kernel 4, pad 1
        }
        s
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (c, n, _) in &self.layers {
            out.push(c.w);
            out.push(c.b);
            if let Some(n) = n {
                out.push(n.gamma);
                out.push(n.beta);
            }
        }
        out
    }
}

/// Per-tap projection heads: two MLP layers with a ReLU between them,
/// followed by L2 normalization onto the unit hypersphere.
pub struct ProjectorNet {
    heads: Vec<(ParamId, ParamId, ParamId, ParamId)>, // (w1, b1, w2, b2)
    pub embed_dim: usize,
}

impl ProjectorNet {
    /// One head per feature tap; `tap_channels[t]` is the input width of
    /// head `t`.
    pub fn build(
        store: &mut ParamStore,
        tap_channels: &[usize],
        cfg: &NetConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut heads = Vec::new();
        for (t, &c) in tap_channels.iter().enumerate() {
            let w1 = store.register(
                format!("proj.t{t}.fc1.w"),
                randn(&[c, cfg.proj_hidden], 0.02, rng),
            );
            // small positive hidden bias plus noisy output bias: a patch
            // whose hidden units all die must still land off the origin,
            // or normalization would divide by zero
            let b1 = store.register(
                format!("proj.t{t}.fc1.b"),
                Arr::from_elem(IxDyn(&[cfg.proj_hidden]), 0.01),
            );
            let w2 = store.register(
                format!("proj.t{t}.fc2.w"),
                randn(&[cfg.proj_hidden, cfg.embed_dim], 0.02, rng),
            );
            let b2 = store.register(
                format!("proj.t{t}.fc2.b"),
                randn(&[cfg.embed_dim], 0.02, rng),
            );
            heads.push((w1, b1, w2, b2));
        }
        Self {
            heads,
            embed_dim: cfg.embed_dim,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Project raw (M, C_t) patch features through head `tap` onto the unit
    /// hypersphere. Errors with [`Error::DegenerateEmbedding`] if any
    /// pre-normalization row has vanishing norm.
    pub fn project(&self, b: &mut Bind, tap: usize, raw: Id) -> Result<Id> {
        let (w1, b1, w2, b2) = self.heads[tap];
        let (w1, b1, w2, b2) = (b.p(w1), b.p(b1), b.p(w2), b.p(b2));
        let h = b.graph.linear(raw, w1, b1);
        let h = b.graph.relu(h);
        let z = b.graph.linear(h, w2, b2);
        // inspect pre-normalization norms before dividing by them
        let pre = crate::tensor::kernels::row_norms(
            b.graph
                .value(z)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("projector output is a matrix"),
        );
        for (row, n) in pre.iter().enumerate() {
            if *n < 1e-12 {
                return Err(Error::DegenerateEmbedding { row, norm: *n });
            }
        }
        Ok(b.graph.l2_normalize_rows(z))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|&(a, b, c, d)| [a, b, c, d])
            .collect()
    }
}

/// Convert a `[0,1]` H×W×3 image into a model-range (3,H,W) array.
pub fn to_model_range(img: &StainedImage) -> Array3<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = 2.0 * img.pixels[[y, x, c]] - 1.0;
            }
        }
    }
    out
}

/// Convert a model-range (3,H,W) array back to a `[0,1]` H×W×3 image.
pub fn from_model_range(arr: &Array3<f64>, domain: StainDomain, source_id: &str) -> StainedImage {
    let (_, h, w) = arr.dim();
    let mut pixels = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pixels[[y, x, c]] = ((arr[[c, y, x]] + 1.0) / 2.0).clamp(0.0, 1.0);
            }
        }
    }
    StainedImage {
        pixels,
        domain,
        source_id: source_id.into(),
    }
}

fn no_trainable() -> HashSet<ParamId> {
    HashSet::new()
}

/// Translate an image and expose the encoder feature taps (inference mode).
///
/// The input must be H&E (translation) or a re-encoded virtual image; its
/// dims must be divisible by the encoder's total downsampling factor.
pub fn generator_forward(
    gen: &GeneratorNet,
    store: &ParamStore,
    image: &StainedImage,
) -> Result<(StainedImage, Vec<Array3<f64>>)> {
    if image.domain == StainDomain::IhcReal {
        return Err(Error::InvalidArgument(
            "generator translates HE or re-encodes virtual IHC, not real IHC".into(),
        ));
    }
    let factor = gen.downsample_factor();
    if image.height() % factor != 0 || image.width() % factor != 0 {
        return Err(Error::ShapeError(format!(
            "input {}x{} not divisible by downsampling factor {}",
            image.height(),
            image.width(),
            factor
        )));
    }
    let mut graph = Graph::new();
    let trainable = no_trainable();
    let mut bind = Bind::new(&mut graph, store, &trainable);
    let x = bind.graph.constant(to_model_range(image).into_dyn());
    let (out, taps) = gen.forward(&mut bind, x);
    let out_arr = graph
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("generator output rank")
        .to_owned();
    let features = taps
        .iter()
        .map(|&t| {
            graph
                .value(t)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("tap rank")
                .to_owned()
        })
        .collect();
    let virtual_ihc = from_model_range(&out_arr, StainDomain::IhcVirtual, &image.source_id);
    Ok((virtual_ihc, features))
}

/// Patch-level real/fake logit map for an image (inference mode).
pub fn discriminator_forward(
    disc: &DiscriminatorNet,
    store: &ParamStore,
    image: &StainedImage,
) -> Result<Array3<f64>> {
    let min = disc.min_input();
    if image.height() < min || image.width() < min {
        return Err(Error::ShapeError(format!(
            "discriminator needs at least {min}x{min} input, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let mut graph = Graph::new();
    let trainable = no_trainable();
    let mut bind = Bind::new(&mut graph, store, &trainable);
    let x = bind.graph.constant(to_model_range(image).into_dyn());
    let out = disc.forward(&mut bind, x);
    Ok(graph
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("logit rank")
        .to_owned())
}

/// Project raw patch features (M, C_t) from tap `tap_id` into unit-norm
/// embeddings (inference mode).
pub fn project_patches(
    proj: &ProjectorNet,
    store: &ParamStore,
    raw: &Array2<f64>,
    tap_id: usize,
) -> Result<Array2<f64>> {
    if raw.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one patch row".into()));
    }
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("raw patch features must be finite".into()));
    }
    let mut graph = Graph::new();
    let trainable = no_trainable();
    let mut bind = Bind::new(&mut graph, store, &trainable);
    let x = bind.graph.constant(raw.clone().into_dyn());
    let z = proj.project(&mut bind, tap_id, x)?;
    Ok(graph
        .value(z)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("embedding rank")
        .to_owned())
}

/// Encoder feature taps for an image without building a trainable graph.
/// Used by the ground-truth positive branch, which is treated as constant.
pub fn encoder_features(
    gen: &GeneratorNet,
    store: &ParamStore,
    image: &StainedImage,
) -> Result<Vec<Array3<f64>>> {
    let factor = gen.downsample_factor();
    if image.height() % factor != 0 || image.width() % factor != 0 {
        return Err(Error::ShapeError(format!(
            "input {}x{} not divisible by downsampling factor {}",
            image.height(),
            image.width(),
            factor
        )));
    }
    let mut graph = Graph::new();
    let trainable = no_trainable();
    let mut bind = Bind::new(&mut graph, store, &trainable);
    let x = bind.graph.constant(to_model_range(image).into_dyn());
    let taps = gen.encode(&mut bind, x);
    Ok(taps
        .iter()
        .map(|&t| {
            graph
                .value(t)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("tap rank")
                .to_owned()
        })
        .collect())
}

/// Logit map for a model-range (3,H,W) array; used where images exist only
/// as arrays (saves the `[0,1]` round trip).
pub fn discriminator_forward_raw(
    disc: &DiscriminatorNet,
    store: &ParamStore,
    x: &Array3<f64>,
) -> Array3<f64> {
    let mut graph = Graph::new();
    let trainable = no_trainable();
    let mut bind = Bind::new(&mut graph, store, &trainable);
    let xi = bind.graph.constant(x.clone().into_dyn());
    let out = disc.forward(&mut bind, xi);
    graph
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("logit rank")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_image(size: usize, seed: u64) -> StainedImage {
        let mut r = rng(seed);
        let px = Array3::from_shape_fn((size, size, 3), |_| r.gen::<f64>());
        StainedImage::new(px, StainDomain::He, "t").unwrap()
    }

    fn desk_nets() -> (ParamStore, GeneratorNet, DiscriminatorNet, ProjectorNet) {
        let mut store = ParamStore::new();
        let cfg = NetConfig {
            base_width: 8,
            n_res_blocks: 2,
            disc_width: 8,
            disc_layers: 3,
            embed_dim: 16,
            proj_hidden: 16,
        };
        let mut r = rng(0);
        let gen = GeneratorNet::build(&mut store, &cfg, &mut r);
        let disc = DiscriminatorNet::build(&mut store, &cfg, &mut r);
        let taps = gen.tap_channels();
        let proj = ProjectorNet::build(&mut store, &taps, &cfg, &mut r);
        (store, gen, disc, proj)
    }

    #[test]
    fn generator_preserves_shape_and_taps_report_factors() {
        let (store, gen, _, _) = desk_nets();
        let img = random_image(64, 1);
        let (out, taps) = generator_forward(&gen, &store, &img).unwrap();
        assert_eq!(out.height(), 64);
        assert_eq!(out.width(), 64);
        assert_eq!(out.domain, StainDomain::IhcVirtual);
        let factors = gen.tap_factors();
        assert_eq!(taps.len(), factors.len());
        for (tap, f) in taps.iter().zip(&factors) {
            assert_eq!(tap.dim().1, 64 / f);
            assert_eq!(tap.dim().2, 64 / f);
        }
        // tap at stage 2 of a 2-downsample encoder: 16x16 for 64 input
        assert_eq!(taps.last().unwrap().dim().1, 16);
    }

    #[test]
    fn generator_output_bounded_and_deterministic() {
        let (store, gen, _, _) = desk_nets();
        let img = random_image(32, 2);
        let (a, _) = generator_forward(&gen, &store, &img).unwrap();
        let (b, _) = generator_forward(&gen, &store, &img).unwrap();
        assert_eq!(a.pixels, b.pixels);
        for &v in a.pixels.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let (store, gen, _, _) = desk_nets();
        let img = random_image(30, 3);
        assert!(matches!(
            generator_forward(&gen, &store, &img),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn discriminator_map_smaller_than_input_and_finite_at_extremes() {
        let (store, _, disc, _) = desk_nets();
        let img = random_image(64, 4);
        let logits = discriminator_forward(&disc, &store, &img).unwrap();
        let (c, h, w) = logits.dim();
        assert_eq!(c, 1);
        assert!(h < 64 && w < 64);

        let ones = StainedImage::new(Array3::from_elem((64, 64, 3), 1.0), StainDomain::He, "x").unwrap();
        let zeros = StainedImage::new(Array3::from_elem((64, 64, 3), 0.0), StainDomain::He, "x").unwrap();
        for img in [ones, zeros] {
            let l = discriminator_forward(&disc, &store, &img).unwrap();
            assert!(l.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn discriminator_zero_weights_give_final_bias() {
        let (mut store, _, disc, _) = desk_nets();
        // zero every discriminator weight, set a recognizable final bias
        for pid in disc.params() {
            let name = store.name(pid).to_string();
            if name.ends_with(".w") || name.ends_with(".gamma") {
                store.get_mut(pid).fill(0.0);
            }
            if name.ends_with(".b") || name.ends_with(".beta") {
                store.get_mut(pid).fill(0.0);
            }
        }
        let last_bias = disc
            .params()
            .into_iter()
            .filter(|p| store.name(*p).ends_with(".b"))
            .next_back()
            .unwrap();
        store.get_mut(last_bias).fill(0.625);
        let img = random_image(64, 5);
        let logits = discriminator_forward(&disc, &store, &img).unwrap();
        for &v in logits.iter() {
            assert!((v - 0.625).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_rows_unit_norm_and_pure() {
        let (store, _, _, proj) = desk_nets();
        let mut r = rng(6);
        let mut raw = Array2::from_shape_fn((5, 8), |_| r.gen::<f64>() - 0.5);
        // duplicate a row; outputs must duplicate too
        let row0 = raw.row(0).to_owned();
        raw.row_mut(4).assign(&row0);
        let z = project_patches(&proj, &store, &raw, 0).unwrap();
        for row in z.outer_iter() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(z.row(0), z.row(4));
    }

    #[test]
    fn projector_flags_degenerate_rows() {
        let (mut store, _, _, proj) = desk_nets();
        // zero the head entirely: pre-normalization rows are all zero
        for pid in proj.params() {
            store.get_mut(pid).fill(0.0);
        }
        let raw = Array2::zeros((3, 8));
        assert!(matches!(
            project_patches(&proj, &store, &raw, 0),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn patchgan_receptive_field_is_70_for_standard_stack() {
        let mut store = ParamStore::new();
        let cfg = NetConfig::default();
        let disc = DiscriminatorNet::build(&mut store, &cfg, &mut rng(0));
        assert_eq!(disc.receptive_field, 70);
    }

    #[test]
    fn model_range_roundtrip() {
        let img = random_image(16, 7);
        let m = to_model_range(&img);
        assert!(m.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = from_model_range(&m, StainDomain::He, "t");
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

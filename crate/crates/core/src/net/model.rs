//! The angle regressor.
//!
//! Every beam is encoded on its own by a shared proximity encoder (one 2D
//! convolution across the beam width) and a spatial encoder (a stack of
//! strided 1D convolutions along the beam) into an `L`-vector. A directed
//! wheel graph then lets each beam read from its predecessor and a center
//! node read from every beam. After three such layers the center state is
//! added back onto the beams, a stacked LSTM reads the beams in index order
//! and a three-layer head maps its last hidden state to a unit vector.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Graph, NodeId};
use super::tensor::Tensor;
use crate::angles::Angle;
use crate::beams::{sample, BeamMask, BeamTensor};
use crate::imageops::{pad, Image, PadMode};
use crate::toeplitz::prior_distribution;
use crate::{Error, Result};

pub const GNN_LAYERS: usize = 3;
pub const LSTM_LAYERS: usize = 3;
pub const DEFAULT_EDGE_FACTOR: f64 = 0.5;

/// Everything that fixes the parameter shapes and the input pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct BicConfig {
    /// Side of the unpadded input images.
    pub image_size: usize,
    /// Border added before rotation and sampling.
    pub pad: usize,
    pub pad_mode: PadMode,
    pub channels: usize,
    pub num_beams: usize,
    pub beam_length: usize,
    pub thickness: usize,
    /// Latent width `L`, a multiple of 8.
    pub latent_dim: usize,
    /// Edge factor `λ ∈ (0, 1]`.
    pub edge_factor: f64,
}

impl BicConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size + 2 * self.pad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channel count must be positive".into());
        }
        if self.latent_dim < 8 || !self.latent_dim.is_multiple_of(8) {
            return bad(format!("latent_dim must be a positive multiple of 8, got {}", self.latent_dim));
        }
        if !(self.edge_factor > 0.0 && self.edge_factor <= 1.0) {
            return bad(format!("edge_factor must lie in (0, 1], got {}", self.edge_factor));
        }
        if self.beam_length < 3 {
            return bad(format!("beam_length must be at least 3, got {}", self.beam_length));
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<BeamMask> {
        BeamMask::build(self.grid_size(), self.num_beams, self.beam_length, self.thickness)
    }
}

/// One layer of the spatial encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

/// `(kernel, stride, L / maps)` for beam lengths with a fixed layout.
fn spatial_table(length: usize) -> Option<&'static [(usize, usize, usize)]> {
    match length {
        14 => Some(&[(4, 1, 4), (4, 1, 2), (4, 1, 2), (3, 1, 1)]),
        16 => Some(&[(4, 1, 4), (4, 1, 2), (4, 1, 2), (4, 1, 1), (2, 1, 1)]),
        64 => Some(&[(5, 2, 4), (4, 2, 4), (4, 1, 2), (4, 1, 2), (4, 1, 2), (3, 1, 1), (2, 1, 1)]),
        125 => Some(&[
            (4, 2, 4),
            (3, 2, 4),
            (4, 2, 4),
            (4, 1, 2),
            (4, 1, 2),
            (4, 1, 2),
            (3, 1, 1),
            (2, 1, 1),
        ]),
        _ => None,
    }
}

/// Spatial encoder layers for beams of `length` pixels. The stack consumes
/// the `length − 2` positions left by the proximity encoder and ends at
/// length 1.
///
/// Lengths without a table get a generated stack: stride-2 kernels of 4
/// while more than 16 positions remain, stride-1 kernels of 4 while more
/// than 5 remain, then one kernel spanning the rest.
pub fn spatial_plan(length: usize, latent: usize) -> Result<Vec<ConvSpec>> {
    if length < 3 {
        return Err(Error::Config(format!("beam length {length} is too short for the encoder")));
    }
    if let Some(t) = spatial_table(length) {
        return Ok(t
            .iter()
            .map(|&(kernel, stride, div)| ConvSpec {
                kernel,
                stride,
                out_channels: latent / div,
            })
            .collect());
    }
    let mut len = length - 2;
    let mut shape = Vec::new();
    while len > 16 {
        shape.push((4, 2));
        len = (len - 4) / 2 + 1;
    }
    while len > 5 {
        shape.push((4, 1));
        len -= 3;
    }
    shape.push((len, 1));
    let n = shape.len();
    Ok(shape
        .into_iter()
        .enumerate()
        .map(|(j, (kernel, stride))| {
            let out_channels = if j + 2 >= n {
                latent
            } else if j == 0 || stride == 2 {
                latent / 4
            } else {
                latent / 2
            };
            ConvSpec {
                kernel,
                stride,
                out_channels,
            }
        })
        .collect())
}

/// Binary adjacency of the directed wheel graph on `B + 1` nodes. Beam `i`
/// links to beam `i + 1 mod B` and to the center `B`; the center has no
/// outgoing links.
pub fn wheel_adjacency(num_beams: usize) -> Vec<Vec<u8>> {
    let v = num_beams + 1;
    let mut a = vec![vec![0u8; v]; v];
    for (i, row) in a.iter_mut().enumerate().take(num_beams) {
        row[(i + 1) % num_beams] = 1;
        row[num_beams] = 1;
    }
    a
}

/// Row-major `I + λAᵀ`: every node keeps its own state and receives its
/// in-neighbors' states scaled by `λ`. The center averages its `B` incoming
/// messages instead of summing them, so its scale does not grow with `B`.
pub fn wheel_mixing(num_beams: usize, edge_factor: f64) -> Vec<f64> {
    let a = wheel_adjacency(num_beams);
    let v = num_beams + 1;
    let mut m = vec![0.0; v * v];
    for i in 0..v {
        m[i * v + i] = 1.0;
        for j in 0..v {
            if a[j][i] == 1 {
                let fan_in = if i == num_beams { num_beams as f64 } else { 1.0 };
                m[i * v + j] += edge_factor / fan_in;
            }
        }
    }
    m
}

/// One context layer `leaky((I + λAᵀ) H W)` for `h: [N, V, F]`, `w: [F, F']`.
pub fn gnn_layer(g: &mut Graph, h: NodeId, w: NodeId, mixing: Rc<Vec<f64>>) -> Result<NodeId> {
    let s = g.value(h).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("graph layer input {s:?}")));
    }
    let mixed = g.node_mix(h, mixing)?;
    let flat = g.reshape(mixed, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    let out = g.value(w).shape()[1];
    let y = g.reshape(y, &[s[0], s[1], out])?;
    Ok(g.leaky_relu(y))
}

/// Standard LSTM cell. `x: [N, I]`, `h, c: [N, H]`, `wx: [I, 4H]`,
/// `wh: [H, 4H]`, `bias: [4H]`; gates are ordered input, forget, cell,
/// output. Returns the new `(h, c)`.
pub fn lstm_cell(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    wx: NodeId,
    wh: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hidden = g.value(h).shape()[1];
    let a = g.matmul(x, wx)?;
    let b = g.matmul(h, wh)?;
    let pre = g.add(a, b)?;
    let pre = g.add_bias(pre, bias)?;
    let i = g.slice_last(pre, 0, hidden)?;
    let f = g.slice_last(pre, hidden, hidden)?;
    let cand = g.slice_last(pre, 2 * hidden, hidden)?;
    let o = g.slice_last(pre, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Parameter node handles of one [`BicModel`] inside one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// Outputs of [`BicModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[N, 2]` unit rows `(re, im)`.
    pub z: NodeId,
    /// `[N, B, L]` beam embeddings before the context encoder.
    pub embeddings: NodeId,
}

/// Plain-value inference result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(re, im)`; unit length unless every head input was zero.
    pub z: [f64; 2],
    /// Distribution over the `B` discrete rotations, present only when a
    /// reference image was supplied.
    pub prior: Option<Vec<f64>>,
    /// `B × L` pre-context beam embeddings.
    pub embeddings: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn angle(&self) -> Angle {
        Angle::from_radians(self.z[1].atan2(self.z[0]))
    }
}

/// Anything that estimates the rotation of an image relative to its
/// canonical orientation.
pub trait AnglePredictor {
    fn predict(&self, img: &Image) -> Result<Angle>;

    fn predict_batch(&self, imgs: &[Image]) -> Result<Vec<Angle>> {
        imgs.iter().map(|i| self.predict(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicModel {
    config: BicConfig,
    plan: Vec<ConvSpec>,
    mask: BeamMask,
    mixing: Vec<f64>,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Images per forward pass in batched inference.
const INFER_CHUNK: usize = 32;

impl BicModel {
    /// He-initialized model: weights `N(0, 2 / fan_in)`, biases zero.
    pub fn new(config: BicConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mask = config.mask()?;
        let plan = spatial_plan(config.beam_length, config.latent_dim)?;
        let l = config.latent_dim;
        let width = 2 * config.thickness + 1;

        // (name, shape, fan_in); fan_in 0 marks a bias
        let mut layout: Vec<(String, Vec<usize>, usize)> = Vec::new();
        layout.push(("prox.w".into(), vec![l / 8, config.channels, width, 3], config.channels * width * 3));
        layout.push(("prox.b".into(), vec![l / 8], 0));
        let mut cin = l / 8;
        for (i, s) in plan.iter().enumerate() {
            layout.push((format!("spat.{i}.w"), vec![s.out_channels, cin, s.kernel], cin * s.kernel));
            layout.push((format!("spat.{i}.b"), vec![s.out_channels], 0));
            cin = s.out_channels;
        }
        for i in 0..GNN_LAYERS {
            layout.push((format!("gnn.{i}.w"), vec![l, l], l));
        }
        for i in 0..LSTM_LAYERS {
            layout.push((format!("lstm.{i}.wx"), vec![l, 4 * l], l));
            layout.push((format!("lstm.{i}.wh"), vec![l, 4 * l], l));
            layout.push((format!("lstm.{i}.b"), vec![4 * l], 0));
        }
        let head = [l, l / 2, l / 4, 2];
        for i in 0..3 {
            layout.push((format!("head.{i}.w"), vec![head[i], head[i + 1]], head[i]));
            layout.push((format!("head.{i}.b"), vec![head[i + 1]], 0));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape, fan_in) in layout {
            let mut t = Tensor::zeros(&shape);
            if fan_in > 0 {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                t.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            names.push(name);
            params.push(t);
        }
        let mixing = wheel_mixing(config.num_beams, config.edge_factor);
        Ok(Self {
            config,
            plan,
            mask,
            mixing,
            names,
            params,
        })
    }

    pub fn config(&self) -> &BicConfig {
        &self.config
    }

    pub fn mask(&self) -> &BeamMask {
        &self.mask
    }

    pub fn plan(&self) -> &[ConvSpec] {
        &self.plan
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces parameter `name`; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.params[i].shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: expected {:?}, found {:?}",
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    fn spat_index(&self, i: usize) -> usize {
        2 + 2 * i
    }

    fn gnn_index(&self, i: usize) -> usize {
        2 + 2 * self.plan.len() + i
    }

    fn lstm_index(&self, i: usize) -> usize {
        self.gnn_index(GNN_LAYERS) + 3 * i
    }

    fn head_index(&self, i: usize) -> usize {
        self.lstm_index(LSTM_LAYERS) + 2 * i
    }

    /// Puts every parameter on the tape, as trainable leaves or as
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Bound { ids }
    }

    /// `[N·B, C, 2ε+1, D]` → `[N, B, L]`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<NodeId> {
        let c = &self.config;
        let s = g.value(x).shape().to_vec();
        let (nb, width, d, l) = (c.num_beams, 2 * c.thickness + 1, c.beam_length, c.latent_dim);
        if s.len() != 4 || !s[0].is_multiple_of(nb) || s[1] != c.channels || s[2] != width || s[3] != d {
            return Err(Error::ShapeMismatch(format!(
                "beam batch {s:?}, model expects [N·{nb}, {}, {width}, {d}]",
                c.channels
            )));
        }
        let n = s[0] / nb;
        let h = g.conv2d(x, b.ids[0], b.ids[1])?;
        let h = g.leaky_relu(h);
        let mut h = g.reshape(h, &[n * nb, l / 8, d - 2])?;
        for (i, spec) in self.plan.iter().enumerate() {
            let k = self.spat_index(i);
            h = g.conv1d(h, b.ids[k], b.ids[k + 1], spec.stride)?;
            h = g.leaky_relu(h);
        }
        g.reshape(h, &[n, nb, l])
    }

    /// Wheel-graph layers on `[N, B, L]`, returning all `B + 1` node states
    /// `[N, B+1, L]` before the center is added back.
    pub fn context_graph(&self, g: &mut Graph, b: &Bound, emb: NodeId) -> Result<NodeId> {
        let mixing = Rc::new(self.mixing.clone());
        let mut h = g.append_mean(emb)?;
        for i in 0..GNN_LAYERS {
            h = gnn_layer(g, h, b.ids[self.gnn_index(i)], mixing.clone())?;
        }
        Ok(h)
    }

    /// `[N, B, L]` → `[N, B, L]` with the global context added to each beam.
    pub fn contextualize(&self, g: &mut Graph, b: &Bound, emb: NodeId) -> Result<NodeId> {
        let h = self.context_graph(g, b, emb)?;
        g.add_center(h)
    }

    /// Runs the stacked LSTM over the beams in index order; `[N, B, L]` →
    /// `[N, L]`.
    pub fn decode(&self, g: &mut Graph, b: &Bound, ctx: NodeId) -> Result<NodeId> {
        let s = g.value(ctx).shape().to_vec();
        let (n, l) = (s[0], self.config.latent_dim);
        let zero = g.constant(Tensor::zeros(&[n, l]));
        let mut hs = [zero; LSTM_LAYERS];
        let mut cs = [zero; LSTM_LAYERS];
        for t in 0..s[1] {
            let mut x = g.step(ctx, t)?;
            for layer in 0..LSTM_LAYERS {
                let k = self.lstm_index(layer);
                let (h, c) = lstm_cell(g, x, hs[layer], cs[layer], b.ids[k], b.ids[k + 1], b.ids[k + 2])?;
                hs[layer] = h;
                cs[layer] = c;
                x = h;
            }
        }
        Ok(hs[LSTM_LAYERS - 1])
    }

    /// `[N, L]` → `[N, 2]` unit rows.
    pub fn head(&self, g: &mut Graph, b: &Bound, h: NodeId) -> Result<NodeId> {
        let mut x = h;
        for i in 0..3 {
            let k = self.head_index(i);
            x = g.linear(x, b.ids[k], b.ids[k + 1])?;
            if i < 2 {
                x = g.leaky_relu(x);
            }
        }
        g.normalize_rows(x)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: NodeId) -> Result<Forward> {
        let emb = self.encode(g, b, x)?;
        let ctx = self.contextualize(g, b, emb)?;
        let h = self.decode(g, b, ctx)?;
        let z = self.head(g, b, h)?;
        if !g.value(z).all_finite() {
            return Err(Error::NonFiniteActivation("head output".into()));
        }
        Ok(Forward { z, embeddings: emb })
    }

    /// Logits over the `B` discrete rotations from reference and query
    /// embeddings `[N, B, L]`.
    pub fn prior_logits(&self, g: &mut Graph, reference: NodeId, query: NodeId) -> Result<NodeId> {
        let xi = g.similarity(reference, query)?;
        g.toeplitz_logits(xi)
    }

    /// Pads an unpadded image; accepts already padded images unchanged.
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        let c = &self.config;
        if img.channels() != c.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, model expects {}",
                img.channels(),
                c.channels
            )));
        }
        if !img.is_square() {
            return Err(Error::NonSquareImage {
                width: img.width(),
                height: img.height(),
            });
        }
        if img.width() == c.grid_size() {
            Ok(img.clone())
        } else if img.width() == c.image_size {
            Ok(pad(img, c.pad, c.pad_mode))
        } else {
            Err(Error::SizeMismatch {
                expected: c.image_size,
                found: img.width(),
            })
        }
    }

    pub fn beams_of(&self, img: &Image) -> Result<BeamTensor> {
        sample(&self.prepare(img)?, &self.mask)
    }

    /// Stacks sampled beams into the encoder layout `[N·B, C, 2ε+1, D]`.
    pub fn beams_input(&self, beams: &[&BeamTensor]) -> Result<Tensor> {
        let c = &self.config;
        let (nb, width, d, ch) = (c.num_beams, 2 * c.thickness + 1, c.beam_length, c.channels);
        let mut data = Vec::with_capacity(beams.len() * nb * ch * width * d);
        for bt in beams {
            if bt.shape() != [nb, width, d, ch] {
                return Err(Error::ShapeMismatch(format!(
                    "beam tensor {:?}, model expects {:?}",
                    bt.shape(),
                    [nb, width, d, ch]
                )));
            }
            for b in 0..nb {
                for chi in 0..ch {
                    for t in 0..width {
                        for s in 0..d {
                            data.push(bt.get(b, t, s, chi));
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[beams.len() * nb, ch, width, d], data)
    }

    /// Forward pass without gradients for one beam tensor, optionally with
    /// a reference (unrotated) beam tensor for the prior.
    pub fn infer(&self, beams: &BeamTensor, reference: Option<&BeamTensor>) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.beams_input(&[beams])?);
        let f = self.forward(&mut g, &b, x)?;
        let zv = g.value(f.z).data();
        let z = [zv[0], zv[1]];
        let l = self.config.latent_dim;
        let embeddings = g.value(f.embeddings).data().chunks_exact(l).map(<[f64]>::to_vec).collect();
        let prior = match reference {
            Some(r) => {
                let xr = g.constant(self.beams_input(&[r])?);
                let er = self.encode(&mut g, &b, xr)?;
                let logits = self.prior_logits(&mut g, er, f.embeddings)?;
                Some(prior_distribution(g.value(logits).data()))
            }
            None => None,
        };
        Ok(Prediction { z, prior, embeddings })
    }

    /// `B × L` pre-context embeddings of one image.
    pub fn embeddings(&self, img: &Image) -> Result<Vec<Vec<f64>>> {
        let beams = self.beams_of(img)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(self.beams_input(&[&beams])?);
        let e = self.encode(&mut g, &b, x)?;
        Ok(g.value(e)
            .data()
            .chunks_exact(self.config.latent_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Signed gradient of the circle loss towards `target` with respect to
    /// every pixel of the prepared (padded) image. Pixels outside all beams
    /// get exactly zero.
    pub fn input_gradient(&self, img: &Image, target: Angle) -> Result<Image> {
        let prepared = self.prepare(img)?;
        let beams = sample(&prepared, &self.mask)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.param(self.beams_input(&[&beams])?);
        let f = self.forward(&mut g, &b, x)?;
        let loss = g.circle_loss(f.z, &[target.radians()])?;
        g.backward(loss)?;

        let c = &self.config;
        let (width, d, ch) = (2 * c.thickness + 1, c.beam_length, c.channels);
        let n = prepared.width();
        let mut out = Image::zeros(n, n, ch).with_pad(prepared.pad());
        if let Some(grad) = g.grad(x) {
            let gd = grad.data();
            for beam in 0..c.num_beams {
                for chi in 0..ch {
                    for t in 0..width {
                        for s in 0..d {
                            let (r, col) = self.mask.coord(beam, t, s);
                            let v = gd[((beam * ch + chi) * width + t) * d + s];
                            out.set(r, col, chi, out.get(r, col, chi) + v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl AnglePredictor for BicModel {
    fn predict(&self, img: &Image) -> Result<Angle> {
        Ok(self.predict_batch(std::slice::from_ref(img))?[0])
    }

    fn predict_batch(&self, imgs: &[Image]) -> Result<Vec<Angle>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(INFER_CHUNK) {
            let beams = chunk.iter().map(|i| self.beams_of(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&BeamTensor> = beams.iter().collect();
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let x = g.constant(self.beams_input(&refs)?);
            let f = self.forward(&mut g, &b, x)?;
            out.extend(
                g.value(f.z)
                    .data()
                    .chunks_exact(2)
                    .map(|z| Angle::from_radians(z[1].atan2(z[0]))),
            );
        }
        Ok(out)
    }
}

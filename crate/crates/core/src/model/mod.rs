//! The segmentation network: a mini Xception-style encoder with output
//! stride 16, atrous spatial pyramid pooling, a Deeplab-v3+ decoder, and the
//! optional extra-skip ("Deep-U-Lab") variant.
//!
//! Layer layout for base width `C`:
//!
//! | stage    | layers                                              | stride |
//! |----------|-----------------------------------------------------|--------|
//! | stem     | 3x3 conv s2, `3 -> C/2`                              | 2      |
//! | entry1   | sep 3x3 `C/2 -> C`, sep 3x3 s2 `C -> C`              | 4      |
//! | entry2   | sep 3x3 `C -> 2C`, sep 3x3 s2                        | 8      |
//! | entry3   | sep 3x3 `2C -> 4C`, sep 3x3 s2                       | 16     |
//! | middle   | 3 residual blocks of two sep 3x3, the last dilated 2 | 16     |
//!
//! Every conv is followed by batch norm and ReLU unless noted otherwise. The
//! residual blocks apply the final ReLU after the addition.

mod checkpoint;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, spec_sidecar, CHECKPOINT_FORMAT};
pub use spec::{EncoderStage, NetworkSpec};

use image::RgbImage;

use crate::autodiff::norm::DEFAULT_EPS;
use crate::autodiff::{ConvSpec, Graph, Mode, Padding, RunningStats, Var};
use crate::dataset::SegmentationMask;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeedStream};
use crate::tensor::{Scalar, Tensor};

/// One conv unit: convolution, then optional batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub conv: ConvSpec,
    pub bias: bool,
    pub batch_norm: bool,
    pub relu: bool,
    /// Output stride of the layer's input.
    pub input_stride: usize,
}

impl Layer {
    fn new(name: impl Into<String>, conv: ConvSpec, input_stride: usize) -> Self {
        Self {
            name: name.into(),
            conv,
            bias: false,
            batch_norm: true,
            relu: true,
            input_stride,
        }
    }

    fn with_bias(mut self) -> Self {
        self.bias = true;
        self.batch_norm = false;
        self
    }

    fn linear(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn output_stride(&self) -> usize {
        self.input_stride * self.conv.stride
    }

    /// Learnable scalars of this unit.
    pub fn param_count(&self) -> usize {
        let c = self.conv.out_channels;
        self.conv.param_count() + if self.bias { c } else { 0 } + if self.batch_norm { 2 * c } else { 0 }
    }
}

fn sep(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, 3).separable(true)
}

fn pointwise(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, 1)
}

/// All conv units in execution order.
pub fn layer_table(spec: &NetworkSpec) -> Result<Vec<Layer>> {
    spec.validate()?;
    let c = spec.base_channels;
    let mut t = vec![Layer::new("stem", ConvSpec::new(3, c / 2, 3).stride(2), 1)];
    let entry = [("entry1", c / 2, c, 2), ("entry2", c, 2 * c, 4), ("entry3", 2 * c, 4 * c, 8)];
    for (name, cin, cout, os) in entry {
        t.push(Layer::new(format!("{name}.sep1"), sep(cin, cout), os));
        t.push(Layer::new(format!("{name}.sep2"), sep(cout, cout).stride(2), os));
    }
    let m = 4 * c;
    for (i, dilation) in [1, 1, 2].into_iter().enumerate() {
        let name = format!("middle{}", i + 1);
        t.push(Layer::new(format!("{name}.sep1"), sep(m, m).dilation(dilation), 16));
        t.push(Layer::new(format!("{name}.sep2"), sep(m, m).dilation(dilation), 16).linear());
    }
    if spec.deep_u_lab {
        for (j, stage) in spec.skip_taps.iter().enumerate() {
            t.push(Layer::new(
                format!("skip{}", j + 1),
                pointwise(spec.stage_channels(*stage), spec.skip_reduce_channels),
                stage.stride(),
            ));
        }
    }
    let a = spec.aspp_channels;
    let ain = spec.aspp_input_channels();
    t.push(Layer::new("aspp.conv1x1", pointwise(ain, a), 16));
    for &rate in &spec.atrous_rates {
        t.push(Layer::new(format!("aspp.rate{rate}"), sep(ain, a).dilation(rate), 16));
    }
    if spec.include_image_pooling_branch {
        t.push(Layer::new("aspp.pool", pointwise(ain, a), 16).with_bias());
    }
    t.push(Layer::new("aspp.project", pointwise(spec.aspp_branches() * a, a), 16));
    t.push(Layer::new("decoder.low_level", pointwise(c, spec.low_level_channels), 4));
    let d = spec.decoder_channels;
    t.push(Layer::new("decoder.sep1", sep(a + spec.low_level_channels, d), 4));
    t.push(Layer::new("decoder.sep2", sep(d, d), 4));
    t.push(Layer::new("classifier", pointwise(d, spec.num_classes), 4).with_bias().linear());
    for l in &t {
        l.conv.validate()?;
    }
    Ok(t)
}

/// Receptive-field extent and jump after each `(kernel, dilation, stride)`
/// layer of a chain, from a single input pixel (`RF = 1`, `J = 1`):
/// `RF' = RF + r (k - 1) J`, `J' = J s`.
pub fn compose_receptive_field(chain: &[(usize, usize, usize)]) -> Vec<(usize, usize)> {
    let (mut rf, mut jump) = (1, 1);
    chain
        .iter()
        .map(|&(k, r, s)| {
            rf += r * (k - 1) * jump;
            jump *= s;
            (rf, jump)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveField {
    pub layer: String,
    pub extent: usize,
    pub jump: usize,
}

/// Receptive field along the deepest path: stem, entry and middle stages,
/// then the widest ASPP branch.
pub fn receptive_field(spec: &NetworkSpec) -> Result<Vec<ReceptiveField>> {
    let table = layer_table(spec)?;
    let widest = format!("aspp.rate{}", spec.atrous_rates.last().unwrap());
    let path: Vec<&Layer> = table
        .iter()
        .filter(|l| {
            l.name == "stem"
                || l.name.starts_with("entry")
                || l.name.starts_with("middle")
                || l.name == widest
        })
        .collect();
    let chain: Vec<_> = path
        .iter()
        .map(|l| (l.conv.kernel_size, l.conv.dilation, l.conv.stride))
        .collect();
    Ok(path
        .iter()
        .zip(compose_receptive_field(&chain))
        .map(|(l, (extent, jump))| ReceptiveField {
            layer: l.name.clone(),
            extent,
            jump,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Slots {
    weight: Option<usize>,
    depthwise: Option<usize>,
    pointwise: Option<usize>,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    stats: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Learnable weights plus batch-norm running statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    slots: Vec<Slots>,
    params: Vec<NamedTensor<T>>,
    stats: Vec<(String, RunningStats)>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

enum Init {
    HeUniform(usize),
    Zeros,
    Ones,
}

impl<T: Scalar> ParameterSet<T> {
    /// Builds a freshly initialized network: He-uniform conv weights
    /// (`U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))`), zero biases, unit
    /// batch-norm scales.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let layers = layer_table(spec)?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut slots = Vec::new();
        let add = |params: &mut Vec<NamedTensor<T>>, name: String, shape: [usize; 4], init: Init| {
            let index = params.len();
            let mut rng = SeedStream::new(derive_seed(seed, index as u64));
            let value = match init {
                Init::HeUniform(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64(rng.range(-bound, bound)))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
            };
            params.push(NamedTensor { name, value });
            Some(index)
        };
        for l in &layers {
            let (cin, cout, k) = (l.conv.in_channels, l.conv.out_channels, l.conv.kernel_size);
            let n = &l.name;
            let mut s = Slots::default();
            if l.conv.separable {
                s.depthwise = add(&mut params, format!("{n}.depthwise"), [cin, 1, k, k], Init::HeUniform(k * k));
                s.pointwise = add(&mut params, format!("{n}.pointwise"), [cout, cin, 1, 1], Init::HeUniform(cin));
            } else {
                s.weight = add(&mut params, format!("{n}.weight"), [cout, cin, k, k], Init::HeUniform(cin * k * k));
            }
            if l.bias {
                s.bias = add(&mut params, format!("{n}.bias"), [cout, 1, 1, 1], Init::Zeros);
            }
            if l.batch_norm {
                s.gamma = add(&mut params, format!("{n}.bn.gamma"), [cout, 1, 1, 1], Init::Ones);
                s.beta = add(&mut params, format!("{n}.bn.beta"), [cout, 1, 1, 1], Init::Zeros);
                s.stats = Some(stats.len());
                stats.push((format!("{n}.bn"), RunningStats::new(cout)));
            }
            slots.push(s);
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            slots,
            params,
            stats,
            step: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) -> Result<()> {
        if stats.len() != self.stats.len() {
            return Err(Error::shape(
                "running statistics",
                &[stats.len()],
                &[self.stats.len()],
            ));
        }
        for ((_, old), new) in self.stats.iter_mut().zip(stats) {
            *old = new;
        }
        Ok(())
    }

    pub(crate) fn stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            slots: self.slots.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self.stats.clone(),
            step: self.step,
        }
    }

    /// Records every parameter on `g`, tracked for gradients if `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Records the network on `g`. Inputs whose sides are not multiples of 16
    /// are reflect-padded on the bottom/right and the logits cropped back.
    /// Batch-norm statistics updated in training mode are returned in
    /// [`ForwardPass::stats`], leaving `self` untouched.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], input: Var, mode: Mode) -> Result<ForwardPass> {
        if vars.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let [_, channels, h, w] = g.value(input).shape();
        if channels != 3 {
            return Err(Error::shape("model input (expected 3 channels)", &g.value(input).shape(), &[3]));
        }
        let pad = Padding::to_multiple(h, w, self.spec.output_stride);
        let x = if pad.is_zero() { input } else { g.reflect_pad(input, pad)? };
        let (ph, pw) = (h + pad.bottom, w + pad.right);

        let mut ctx = Ctx {
            params: self,
            g,
            vars,
            mode,
            stats: self.stats.iter().map(|(_, s)| s.clone()).collect(),
            next: 0,
        };
        let stem = ctx.unit("stem", x)?;
        let mut stages = vec![(EncoderStage::Stem, stem)];
        let mut h_ = stem;
        for stage in [EncoderStage::Entry1, EncoderStage::Entry2, EncoderStage::Entry3] {
            let name = stage.as_str();
            h_ = ctx.unit(&format!("{name}.sep1"), h_)?;
            h_ = ctx.unit(&format!("{name}.sep2"), h_)?;
            stages.push((stage, h_));
        }
        for stage in [EncoderStage::Middle1, EncoderStage::Middle2, EncoderStage::Middle3] {
            let name = stage.as_str();
            let r = ctx.unit(&format!("{name}.sep1"), h_)?;
            let r = ctx.unit(&format!("{name}.sep2"), r)?;
            let sum = ctx.g.add(h_, r)?;
            h_ = ctx.g.relu(sum)?;
            stages.push((stage, h_));
        }
        let encoder = h_;
        let [_, _, eh, ew] = ctx.g.value(encoder).shape();
        let low_level = stages[1].1;

        let mut aspp_in = encoder;
        if self.spec.deep_u_lab {
            let mut parts = vec![encoder];
            for (j, tap) in self.spec.skip_taps.iter().enumerate() {
                let src = stages.iter().find(|(s, _)| s == tap).unwrap().1;
                let reduced = ctx.unit(&format!("skip{}", j + 1), src)?;
                let [_, _, th, tw] = ctx.g.value(reduced).shape();
                parts.push(if (th, tw) == (eh, ew) {
                    reduced
                } else {
                    ctx.g.resize(reduced, eh, ew)?
                });
            }
            aspp_in = ctx.g.concat(&parts)?;
        }

        let mut branches = vec![ctx.unit("aspp.conv1x1", aspp_in)?];
        for rate in &self.spec.atrous_rates {
            branches.push(ctx.unit(&format!("aspp.rate{rate}"), aspp_in)?);
        }
        if self.spec.include_image_pooling_branch {
            let pooled = ctx.g.global_avg_pool(aspp_in)?;
            let pooled = ctx.unit("aspp.pool", pooled)?;
            branches.push(ctx.g.resize(pooled, eh, ew)?);
        }
        let aspp_branches = branches.clone();
        let cat = ctx.g.concat(&branches)?;
        let aspp = ctx.unit("aspp.project", cat)?;

        let [_, _, lh, lw] = ctx.g.value(low_level).shape();
        let up = ctx.g.resize(aspp, lh, lw)?;
        let low = ctx.unit("decoder.low_level", low_level)?;
        let dec = ctx.g.concat(&[up, low])?;
        let dec = ctx.unit("decoder.sep1", dec)?;
        let dec = ctx.unit("decoder.sep2", dec)?;
        let logits_os4 = ctx.unit("classifier", dec)?;
        let full = ctx.g.resize(logits_os4, ph, pw)?;
        let logits = if pad.is_zero() { full } else { ctx.g.crop(full, 0, 0, h, w)? };
        debug_assert_eq!(ctx.next, self.layers.len());
        Ok(ForwardPass {
            logits,
            encoder,
            aspp_input: aspp_in,
            aspp_branches,
            stats: ctx.stats,
        })
    }

    /// Eval-mode logits for a `B x 3 x H x W` batch, without gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Stacks RGB images of equal size into a `B x 3 x H x W` batch, scaled
/// to `[-1, 1]` (`v / 127.5 - 1`).
pub fn image_batch<T: Scalar>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("empty image batch".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut out = Tensor::zeros([images.len(), 3, h, w]);
    let plane = h * w;
    for (b, img) in images.iter().enumerate() {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::shape(
                "image batch",
                &[img.height() as usize, img.width() as usize],
                &[h, w],
            ));
        }
        let dst = &mut out.data_mut()[b * 3 * plane..(b + 1) * 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = T::from_f64(px.0[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax over classes of a `1 x K x H x W` map (ties to the
/// lower class id).
pub fn argmax_mask<T: Scalar>(scores: &Tensor<T>, item: usize) -> SegmentationMask {
    let [_, k, h, w] = scores.shape();
    let mut labels = vec![0u8; h * w];
    for (i, l) in labels.iter_mut().enumerate() {
        let mut best = scores.plane(item, 0)[i];
        for c in 1..k {
            let v = scores.plane(item, c)[i];
            if v > best {
                best = v;
                *l = c as u8;
            }
        }
    }
    SegmentationMask::from_vec(w, h, labels).expect("dims match")
}

/// Handles produced by [`ParameterSet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `B x K x H x W` class scores.
    pub logits: Var,
    /// Encoder output at output stride 16.
    pub encoder: Var,
    /// Tensor fed to ASPP (encoder output plus reduced extra skips).
    pub aspp_input: Var,
    pub aspp_branches: Vec<Var>,
    /// Running statistics after this pass, in layer order.
    pub stats: Vec<RunningStats>,
}

struct Ctx<'a, T: Scalar> {
    params: &'a ParameterSet<T>,
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    mode: Mode,
    stats: Vec<RunningStats>,
    next: usize,
}

impl<T: Scalar> Ctx<'_, T> {
    /// Applies the next layer of the table, which must be `name`.
    fn unit(&mut self, name: &str, x: Var) -> Result<Var> {
        let i = self
            .params
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Usage(format!("no layer named `{name}`")))?;
        self.next += 1;
        let layer = &self.params.layers[i];
        let s = self.params.slots[i];
        let v = |slot: Option<usize>| slot.map(|k| self.vars[k]);
        let (stride, dilation) = (layer.conv.stride, layer.conv.dilation);
        let mut y = if layer.conv.separable {
            self.g
                .separable_conv2d(x, v(s.depthwise).unwrap(), v(s.pointwise).unwrap(), stride, dilation)?
        } else {
            self.g.conv2d(x, v(s.weight).unwrap(), v(s.bias), stride, dilation)?
        };
        if let Some(si) = s.stats {
            y = self.g.batch_norm(
                y,
                v(s.gamma).unwrap(),
                v(s.beta).unwrap(),
                DEFAULT_EPS,
                self.mode,
                &mut self.stats[si],
            )?;
        }
        if layer.relu {
            y = self.g.relu(y)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = SeedStream::new(seed);
        Tensor::from_fn(shape, |_| rng.normal() as f32)
    }

    #[test]
    fn shapes_at_64() {
        let params = ParameterSet::<f32>::build(&NetworkSpec::default(), 1).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let x = g.constant(random_input([1, 3, 64, 64], 2));
        let out = params.forward(&mut g, &vars, x, Mode::Train).unwrap();
        assert_eq!(g.value(out.logits).shape(), [1, 5, 64, 64]);
        assert_eq!(g.value(out.encoder).shape(), [1, 128, 4, 4]);
        for b in &out.aspp_branches {
            assert_eq!(g.value(*b).shape(), [1, 64, 4, 4]);
        }
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let params = ParameterSet::<f32>::build(&NetworkSpec::with_classes(2), 1).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let x = g.constant(random_input([2, 3, 37, 50], 3));
        let out = params.forward(&mut g, &vars, x, Mode::Train).unwrap();
        assert_eq!(g.value(out.logits).shape(), [2, 2, 37, 50]);
        assert_eq!(g.value(out.encoder).shape(), [2, 128, 3, 4]);
    }

    #[test]
    fn wrong_channel_count() {
        let params = ParameterSet::<f32>::build(&NetworkSpec::default(), 1).unwrap();
        let err = params.predict(&Tensor::zeros([1, 4, 32, 32])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn eval_needs_statistics() {
        let params = ParameterSet::<f32>::build(&NetworkSpec::default(), 1).unwrap();
        assert!(matches!(
            params.predict(&Tensor::zeros([1, 3, 32, 32])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn deterministic_build() {
        let a = ParameterSet::<f32>::build(&NetworkSpec::default(), 9).unwrap();
        let b = ParameterSet::<f32>::build(&NetworkSpec::default(), 9).unwrap();
        let c = ParameterSet::<f32>::build(&NetworkSpec::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn counts_match_layer_table() {
        let spec = NetworkSpec::default();
        let params = ParameterSet::<f32>::build(&spec, 0).unwrap();
        let from_table: usize = params.layers().iter().map(Layer::param_count).sum();
        assert_eq!(params.param_count(), from_table);
    }

    #[test]
    fn receptive_field_composition() {
        assert_eq!(compose_receptive_field(&[(3, 6, 1)]), vec![(13, 1)]);
        assert_eq!(compose_receptive_field(&[(3, 1, 1)]), vec![(3, 1)]);
        assert_eq!(compose_receptive_field(&[(3, 1, 1), (3, 1, 1)]), vec![(3, 1), (5, 1)]);
        assert_eq!(compose_receptive_field(&[(3, 1, 2), (3, 1, 1)]), vec![(3, 2), (7, 2)]);
        let rf = receptive_field(&NetworkSpec::default()).unwrap();
        assert_eq!(rf.first().unwrap().extent, 3);
        assert_eq!(rf.last().unwrap().layer, "aspp.rate18");
        assert!(rf.windows(2).all(|w| w[0].extent < w[1].extent));
    }
}

//! The spiking U-Net: topology, sequence forward pass and BPTT backward pass.
//!
//! Layers are evaluated layer-major: each layer consumes the whole `[T, ...]`
//! output of its predecessor before the next layer runs. Because state only
//! flows forward in depth and forward in time, this computes exactly the same
//! values as stepping every layer once per timestep (see
//! [`EvSegSnn::forward_stepwise`]), while letting each convolution batch all
//! timesteps into one call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, SkipMode, Upsampling};
use crate::neuron::{leak_param_for, plif_backward, plif_forward, plif_step, PlifLayerState, PlifParams, SpikeTrace};
use crate::tensor::{
    concat_channels, conv2d_backward_with, conv2d_forward, maxpool2_backward, maxpool2_forward, split_channels,
    tconv2_backward, tconv2_forward, upsample_nearest2_backward, upsample_nearest2_forward, ConvPath, PoolIndices,
    Real, Tensor,
};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded convolution.
    Conv,
    /// 2x2 stride-2 transposed convolution.
    TransposedConv,
}

/// A weighted layer followed by a PLIF neuron layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingLayer<F> {
    pub kind: LayerKind,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    /// Leak parameter `w` of the neurons, shape `[1]`.
    pub leak: Tensor<F>,
}

/// Non-spiking 1x1 classifier whose outputs are summed over time.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel<F> {
    pub convs: [SpikingLayer<F>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel<F> {
    pub up: SpikingLayer<F>,
    pub convs: [SpikingLayer<F>; 2],
}

/// Structural description of one node of the built graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Conv { name: String, in_channels: usize, out_channels: usize, kernel: usize },
    TransposedConv { name: String, in_channels: usize, out_channels: usize },
    Plif { name: String },
    MaxPool { level: usize },
    UpsampleNearest { level: usize },
    Concat { level: usize },
    Add { level: usize },
    Head { in_channels: usize, classes: usize },
}

fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-bound..bound)))
}

/// Initial leak and spiking-bias bound shared by every spiking layer.
#[derive(Clone, Copy)]
struct LayerInit {
    leak: f64,
    bias_bound: f64,
}

impl LayerInit {
    /// Biases stay inside `±V_th (1 - λ)`: with no input the membrane then
    /// converges below threshold, while still sitting inside the surrogate
    /// support rather than on its zero-gradient edge.
    fn of(cfg: &ModelConfig) -> Self {
        Self {
            leak: cfg.leak_init,
            bias_bound: cfg.threshold * (1.0 - cfg.leak_init),
        }
    }
}

impl<F: Real> SpikingLayer<F> {
    fn conv(c_in: usize, c_out: usize, kernel: usize, init: LayerInit, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self {
            kind: LayerKind::Conv,
            weight: uniform(&[c_out, c_in, kernel, kernel], bound, rng),
            bias: uniform(&[c_out], init.bias_bound, rng),
            leak: Tensor::scalar(F::lit(leak_param_for(init.leak))),
        }
    }

    fn transposed(c_in: usize, c_out: usize, init: LayerInit, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((c_in * 4) as f64).sqrt();
        Self {
            kind: LayerKind::TransposedConv,
            weight: uniform(&[c_in, c_out, 2, 2], bound, rng),
            bias: uniform(&[c_out], init.bias_bound, rng),
            leak: Tensor::scalar(F::lit(leak_param_for(init.leak))),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            leak: self.leak.zeros_like(),
        }
    }

    pub fn plif(&self, cfg: &ModelConfig) -> PlifParams<F> {
        PlifParams::new(self.leak.data()[0], F::lit(cfg.threshold), F::lit(cfg.surrogate_alpha)).with_spike(cfg.spike)
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.weight.shape()[0],
            LayerKind::TransposedConv => self.weight.shape()[1],
        }
    }

    fn current(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(match self.kind {
            LayerKind::Conv => conv2d_forward(x, &self.weight, &self.bias)?,
            LayerKind::TransposedConv => tconv2_forward(x, &self.weight, &self.bias)?,
        })
    }

    fn forward(&self, x: &Tensor<F>, cfg: &ModelConfig) -> Result<SpikeTrace<F>> {
        Ok(plif_forward(&self.plif(cfg), &self.current(x)?)?)
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input` is set.
    fn backward(
        &self,
        x: &Tensor<F>,
        trace: &SpikeTrace<F>,
        grad_spikes: &Tensor<F>,
        need_input: bool,
        grads: &mut Self,
        cfg: &ModelConfig,
    ) -> Result<Option<Tensor<F>>> {
        let pg = plif_backward(&self.plif(cfg), trace, grad_spikes, None)?;
        grads.leak.data_mut()[0] += pg.leak_param;
        let grad_x = match self.kind {
            LayerKind::Conv => {
                let g = conv2d_backward_with(&pg.input, x, &self.weight, need_input, ConvPath::Auto)?;
                grads.weight.add_assign(&g.weight)?;
                grads.bias.add_assign(&g.bias)?;
                g.input
            }
            LayerKind::TransposedConv => {
                let g = tconv2_backward(&pg.input, Some(x), &self.weight)?;
                grads.weight.add_assign(&g.weight)?;
                grads.bias.add_assign(&g.bias)?;
                need_input.then_some(g.input)
            }
        };
        Ok(grad_x)
    }
}

/// The depth-`L` spiking U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct EvSegSnn<F = f32> {
    cfg: ModelConfig,
    pub encoder: Vec<EncoderLevel<F>>,
    /// Indexed by level; level `l` upsamples from level `l + 1`.
    pub decoder: Vec<DecoderLevel<F>>,
    pub head: Head<F>,
}

/// Saved activations of one sequence forward pass, consumed by
/// [`EvSegSnn::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    input: Tensor<F>,
    enc: Vec<EncoderCache<F>>,
    dec: Vec<DecoderCache<F>>,
}

#[derive(Clone, Debug)]
struct EncoderCache<F> {
    traces: [SpikeTrace<F>; 2],
    pooled: Option<(Tensor<F>, PoolIndices)>,
}

#[derive(Clone, Debug)]
struct DecoderCache<F> {
    up: SpikeTrace<F>,
    merged: Tensor<F>,
    traces: [SpikeTrace<F>; 2],
}

/// Spike activity of one spiking layer over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivity {
    pub name: String,
    /// `[C, H, W]` of the layer.
    pub dims: [usize; 3],
    pub counts_per_step: Vec<u64>,
}

impl LayerActivity {
    pub fn neurons(&self) -> usize {
        self.dims.iter().product()
    }
}

impl<F: Real> ForwardCache<F> {
    /// Every spiking layer's trace, in forward order.
    pub fn traces(&self) -> Vec<(String, &SpikeTrace<F>)> {
        let mut out = Vec::new();
        for (l, e) in self.enc.iter().enumerate() {
            for (i, t) in e.traces.iter().enumerate() {
                out.push((format!("enc{l}.conv{}", i + 1), t));
            }
        }
        for (l, d) in self.dec.iter().enumerate().rev() {
            out.push((format!("dec{l}.up"), &d.up));
            for (i, t) in d.traces.iter().enumerate() {
                out.push((format!("dec{l}.conv{}", i + 1), t));
            }
        }
        out
    }

    pub fn pooled_maps(&self) -> Vec<&Tensor<F>> {
        self.enc.iter().filter_map(|e| e.pooled.as_ref().map(|p| &p.0)).collect()
    }

    /// Decoder inputs after merging the skip connection.
    pub fn merged_maps(&self) -> Vec<&Tensor<F>> {
        self.dec.iter().map(|d| &d.merged).collect()
    }

    pub fn activity(&self) -> Vec<LayerActivity> {
        self.traces()
            .into_iter()
            .map(|(name, t)| {
                let s = t.spikes.shape();
                LayerActivity {
                    name,
                    dims: [s[1], s[2], s[3]],
                    counts_per_step: t.counts_per_step(),
                }
            })
            .collect()
    }

    fn level_output(&self, level: usize) -> &Tensor<F> {
        match self.dec.get(level) {
            Some(d) => &d.traces[1].spikes,
            None => &self.enc[level].traces[1].spikes,
        }
    }
}

impl<F: Real> EvSegSnn<F> {
    /// Build a model from `seed`: weights uniform in `±1/sqrt(fan_in)`,
    /// spiking-layer biases uniform in `±V_th (1 - λ)` (so a silent input keeps
    /// the network silent), head bias uniform like its weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = cfg.base_widths.clone();
        let init = LayerInit::of(&cfg);
        let mut encoder = Vec::with_capacity(widths.len());
        let mut c_in = cfg.in_channels;
        for &w in &widths {
            encoder.push(EncoderLevel {
                convs: [
                    SpikingLayer::conv(c_in, w, 3, init, &mut rng),
                    SpikingLayer::conv(w, w, 3, init, &mut rng),
                ],
            });
            c_in = w;
        }
        let mut decoder: Vec<DecoderLevel<F>> = Vec::with_capacity(widths.len().saturating_sub(1));
        for l in (0..widths.len().saturating_sub(1)).rev() {
            let (w, below) = (widths[l], widths[l + 1]);
            let up = match cfg.upsampling {
                Upsampling::NearestConv3x3 => SpikingLayer::conv(below, w, 3, init, &mut rng),
                Upsampling::TransposedConv2x2 => SpikingLayer::transposed(below, w, init, &mut rng),
            };
            let merged = match cfg.skip {
                SkipMode::Concat => 2 * w,
                SkipMode::Add => w,
            };
            decoder.push(DecoderLevel {
                up,
                convs: [
                    SpikingLayer::conv(merged, w, 3, init, &mut rng),
                    SpikingLayer::conv(w, w, 3, init, &mut rng),
                ],
            });
        }
        decoder.reverse();
        let bound = 1.0 / (widths[0] as f64).sqrt();
        let head = Head {
            weight: uniform(&[cfg.num_classes, widths[0], 1, 1], bound, &mut rng),
            bias: uniform(&[cfg.num_classes], bound, &mut rng),
        };
        Ok(Self {
            cfg,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Same structure with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|e| EncoderLevel {
                    convs: [e.convs[0].zeros_like(), e.convs[1].zeros_like()],
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderLevel {
                    up: d.up.zeros_like(),
                    convs: [d.convs[0].zeros_like(), d.convs[1].zeros_like()],
                })
                .collect(),
            head: Head {
                weight: self.head.weight.zeros_like(),
                bias: self.head.bias.zeros_like(),
            },
        }
    }

    /// Spiking layers in forward order.
    pub fn layers(&self) -> Vec<(String, &SpikingLayer<F>)> {
        self.layers_with_level().into_iter().map(|(n, l, _)| (n, l)).collect()
    }

    /// Like [`EvSegSnn::layers`], with the resolution level of each layer's output.
    fn layers_with_level(&self) -> Vec<(String, &SpikingLayer<F>, usize)> {
        let mut out = Vec::new();
        for (l, e) in self.encoder.iter().enumerate() {
            out.push((format!("enc{l}.conv1"), &e.convs[0], l));
            out.push((format!("enc{l}.conv2"), &e.convs[1], l));
        }
        for (l, d) in self.decoder.iter().enumerate().rev() {
            out.push((format!("dec{l}.up"), &d.up, l));
            out.push((format!("dec{l}.conv1"), &d.convs[0], l));
            out.push((format!("dec{l}.conv2"), &d.convs[1], l));
        }
        out
    }

    fn layers_mut<'a>(
        encoder: &'a mut [EncoderLevel<F>],
        decoder: &'a mut [DecoderLevel<F>],
    ) -> Vec<&'a mut SpikingLayer<F>> {
        let mut out = Vec::new();
        for e in encoder.iter_mut() {
            let [a, b] = &mut e.convs;
            out.push(a);
            out.push(b);
        }
        for d in decoder.iter_mut().rev() {
            out.push(&mut d.up);
            let [a, b] = &mut d.convs;
            out.push(a);
            out.push(b);
        }
        out
    }

    /// Every parameter tensor with its name, in a fixed order shared with
    /// [`EvSegSnn::params_mut`].
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
            out.push((format!("{name}.leak"), &layer.leak));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for layer in Self::layers_mut(&mut self.encoder, &mut self.decoder) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            out.push(&mut layer.leak);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Weights, biases and one leak scalar per spiking layer.
    pub fn count_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Node list of the built graph in forward order.
    pub fn graph(&self) -> Vec<Node> {
        let mut nodes = Vec::new();
        let conv_node = |name: &str, l: &SpikingLayer<F>| match l.kind {
            LayerKind::Conv => Node::Conv {
                name: name.to_string(),
                in_channels: l.weight.shape()[1],
                out_channels: l.weight.shape()[0],
                kernel: l.weight.shape()[2],
            },
            LayerKind::TransposedConv => Node::TransposedConv {
                name: name.to_string(),
                in_channels: l.weight.shape()[0],
                out_channels: l.weight.shape()[1],
            },
        };
        let depth = self.encoder.len();
        for (l, e) in self.encoder.iter().enumerate() {
            for (i, c) in e.convs.iter().enumerate() {
                let name = format!("enc{l}.conv{}", i + 1);
                nodes.push(conv_node(&name, c));
                nodes.push(Node::Plif { name });
            }
            if l + 1 < depth {
                nodes.push(Node::MaxPool { level: l });
            }
        }
        for (l, d) in self.decoder.iter().enumerate().rev() {
            if d.up.kind == LayerKind::Conv {
                nodes.push(Node::UpsampleNearest { level: l });
            }
            nodes.push(conv_node(&format!("dec{l}.up"), &d.up));
            nodes.push(Node::Plif { name: format!("dec{l}.up") });
            nodes.push(match self.cfg.skip {
                SkipMode::Concat => Node::Concat { level: l },
                SkipMode::Add => Node::Add { level: l },
            });
            for (i, c) in d.convs.iter().enumerate() {
                let name = format!("dec{l}.conv{}", i + 1);
                nodes.push(conv_node(&name, c));
                nodes.push(Node::Plif { name });
            }
        }
        nodes.push(Node::Head {
            in_channels: self.head.weight.shape()[1],
            classes: self.head.weight.shape()[0],
        });
        nodes
    }

    fn check_frame(&self, frame: &Tensor<F>) -> Result<()> {
        let want = [self.cfg.timesteps, self.cfg.in_channels, self.cfg.height(), self.cfg.width()];
        if frame.shape() != want {
            return Err(ModelError::FrameShape {
                expected: want.to_vec(),
                got: frame.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn merge(&self, skip: &Tensor<F>, up: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(match self.cfg.skip {
            SkipMode::Concat => concat_channels(skip, up)?,
            SkipMode::Add => {
                let mut m = skip.clone();
                m.add_assign(up)?;
                m
            }
        })
    }

    fn up_input(&self, level: &DecoderLevel<F>, below: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        Ok(match level.up.kind {
            LayerKind::Conv => Some(upsample_nearest2_forward(below)?),
            LayerKind::TransposedConv => None,
        })
    }

    /// Run a `[T, C_in, H, W]` frame through the network from zero membranes.
    ///
    /// Returns the head outputs summed over all timesteps (`[classes, H, W]`)
    /// and the activations needed for backpropagation through time.
    pub fn forward_sequence(&self, frame: &Tensor<F>) -> Result<(Tensor<F>, ForwardCache<F>)> {
        self.check_frame(frame)?;
        let cfg = &self.cfg;
        let depth = self.encoder.len();
        let mut enc: Vec<EncoderCache<F>> = Vec::with_capacity(depth);
        for (l, level) in self.encoder.iter().enumerate() {
            let x = match l {
                0 => frame,
                _ => &enc[l - 1].pooled.as_ref().expect("pooled below bottom").0,
            };
            let t1 = level.convs[0].forward(x, cfg)?;
            let t2 = level.convs[1].forward(&t1.spikes, cfg)?;
            let pooled = if l + 1 < depth {
                Some(maxpool2_forward(&t2.spikes)?)
            } else {
                None
            };
            enc.push(EncoderCache {
                traces: [t1, t2],
                pooled,
            });
        }

        let mut dec_rev: Vec<DecoderCache<F>> = Vec::with_capacity(depth.saturating_sub(1));
        for l in (0..depth.saturating_sub(1)).rev() {
            let level = &self.decoder[l];
            let below = match dec_rev.last() {
                Some(d) => &d.traces[1].spikes,
                None => &enc[depth - 1].traces[1].spikes,
            };
            let up = match self.up_input(level, below)? {
                Some(x) => level.up.forward(&x, cfg)?,
                None => level.up.forward(below, cfg)?,
            };
            let merged = self.merge(&enc[l].traces[1].spikes, &up.spikes)?;
            let t1 = level.convs[0].forward(&merged, cfg)?;
            let t2 = level.convs[1].forward(&t1.spikes, cfg)?;
            dec_rev.push(DecoderCache {
                up,
                merged,
                traces: [t1, t2],
            });
        }
        dec_rev.reverse();
        let cache = ForwardCache {
            input: frame.clone(),
            enc,
            dec: dec_rev,
        };

        let top = cache.level_output(0);
        let per_step = conv2d_forward(top, &self.head.weight, &self.head.bias)?;
        let mut logits = Tensor::zeros(&[cfg.num_classes, cfg.height(), cfg.width()]);
        for t in 0..cfg.timesteps {
            for (acc, &v) in logits.data_mut().iter_mut().zip(per_step.outer(t)) {
                *acc += v;
            }
        }
        Ok((logits, cache))
    }

    /// Backpropagate `grad_logits` (cotangent of the time-summed head output)
    /// through every layer and timestep, adding parameter gradients to `grads`.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &Tensor<F>, grads: &mut Self) -> Result<()> {
        let cfg = &self.cfg;
        let depth = self.encoder.len();
        let (h, w) = (cfg.height(), cfg.width());
        if grad_logits.shape() != [cfg.num_classes, h, w] {
            return Err(ModelError::FrameShape {
                expected: vec![cfg.num_classes, h, w],
                got: grad_logits.shape().to_vec(),
            });
        }
        if cache.enc.len() != depth {
            return Err(ModelError::InvalidConfig("forward cache does not match model depth".into()));
        }

        // every timestep's head output feeds the sum with weight one
        let mut grad_steps = Tensor::zeros(&[cfg.timesteps, cfg.num_classes, h, w]);
        for t in 0..cfg.timesteps {
            grad_steps.outer_mut(t).copy_from_slice(grad_logits.data());
        }
        let top = cache.level_output(0);
        let hg = conv2d_backward_with(&grad_steps, top, &self.head.weight, true, ConvPath::Auto)?;
        grads.head.weight.add_assign(&hg.weight)?;
        grads.head.bias.add_assign(&hg.bias)?;
        let mut grad_out = hg.input.expect("input gradient requested");

        let mut skip_grads: Vec<Option<Tensor<F>>> = vec![None; depth];
        for l in 0..depth.saturating_sub(1) {
            let level = &self.decoder[l];
            let dc = &cache.dec[l];
            let gl = &mut grads.decoder[l];
            let g1 = level.convs[1]
                .backward(&dc.traces[0].spikes, &dc.traces[1], &grad_out, true, &mut gl.convs[1], cfg)?
                .expect("input gradient requested");
            let g_merged = level.convs[0]
                .backward(&dc.merged, &dc.traces[0], &g1, true, &mut gl.convs[0], cfg)?
                .expect("input gradient requested");
            let (g_skip, g_up) = match cfg.skip {
                SkipMode::Concat => split_channels(&g_merged, cache.enc[l].traces[1].spikes.shape()[1])?,
                SkipMode::Add => (g_merged.clone(), g_merged),
            };
            skip_grads[l] = Some(g_skip);
            let below = cache.level_output(l + 1);
            grad_out = match self.up_input(level, below)? {
                Some(x) => {
                    let g = level
                        .up
                        .backward(&x, &dc.up, &g_up, true, &mut gl.up, cfg)?
                        .expect("input gradient requested");
                    upsample_nearest2_backward(&g)?
                }
                None => level
                    .up
                    .backward(below, &dc.up, &g_up, true, &mut gl.up, cfg)?
                    .expect("input gradient requested"),
            };
        }

        for l in (0..depth).rev() {
            let level = &self.encoder[l];
            let ec = &cache.enc[l];
            let gl = &mut grads.encoder[l];
            let mut g2 = if l + 1 < depth {
                let (_, idx) = ec.pooled.as_ref().expect("pooled below bottom");
                maxpool2_backward(&grad_out, idx)?
            } else {
                grad_out
            };
            if let Some(s) = skip_grads[l].take() {
                g2.add_assign(&s)?;
            }
            let g1 = level.convs[1]
                .backward(&ec.traces[0].spikes, &ec.traces[1], &g2, true, &mut gl.convs[1], cfg)?
                .expect("input gradient requested");
            let x = match l {
                0 => &cache.input,
                _ => &cache.enc[l - 1].pooled.as_ref().expect("pooled below bottom").0,
            };
            grad_out = match level.convs[0].backward(x, &ec.traces[0], &g1, l > 0, &mut gl.convs[0], cfg)? {
                Some(g) => g,
                None => Tensor::zeros(&[0]),
            };
        }
        Ok(())
    }

    /// Reference evaluation in timestep-major order using single-step neuron
    /// updates. When `reset_before` is `Some(t)`, every membrane is zeroed
    /// before step `t` is processed.
    pub fn forward_stepwise(&self, frame: &Tensor<F>, reset_before: Option<usize>) -> Result<Tensor<F>> {
        Ok(self.run_stepwise(frame, reset_before)?.0)
    }

    /// Memory-light inference: time-summed logits plus per-layer spike counts,
    /// without retaining the activations needed for training.
    pub fn infer(&self, frame: &Tensor<F>) -> Result<(Tensor<F>, Vec<LayerActivity>)> {
        self.run_stepwise(frame, None)
    }

    fn run_stepwise(&self, frame: &Tensor<F>, reset_before: Option<usize>) -> Result<(Tensor<F>, Vec<LayerActivity>)> {
        self.check_frame(frame)?;
        let cfg = &self.cfg;
        let depth = self.encoder.len();
        let (h, w) = (cfg.height(), cfg.width());
        let mut states: Vec<PlifLayerState<F>> = Vec::new();
        let mut activity = Vec::new();
        for (name, layer, level) in self.layers_with_level() {
            let dims = [layer.out_channels(), h >> level, w >> level];
            states.push(PlifLayerState::for_params(&dims, &layer.plif(cfg)));
            activity.push(LayerActivity {
                name,
                dims,
                counts_per_step: vec![0; cfg.timesteps],
            });
        }
        let mut logits = Tensor::zeros(&[cfg.num_classes, h, w]);
        for t in 0..cfg.timesteps {
            if reset_before == Some(t) {
                states.iter_mut().for_each(PlifLayerState::reset);
            }
            let mut k = 0;
            let mut fire = |layer: &SpikingLayer<F>, x: &Tensor<F>, states: &mut Vec<PlifLayerState<F>>| -> Result<Tensor<F>> {
                let s = plif_step(&mut states[k], &layer.current(x)?)?;
                activity[k].counts_per_step[t] = s.count_nonzero() as u64;
                k += 1;
                Ok(s)
            };
            let mut x = Tensor::new(frame.shape()[1..].to_vec(), frame.outer(t).to_vec())?;
            let mut skips = Vec::new();
            for (l, e) in self.encoder.iter().enumerate() {
                let s1 = fire(&e.convs[0], &x, &mut states)?;
                let s2 = fire(&e.convs[1], &s1, &mut states)?;
                if l + 1 < depth {
                    x = maxpool2_forward(&s2)?.0;
                    skips.push(s2);
                } else {
                    x = s2;
                }
            }
            for (l, d) in self.decoder.iter().enumerate().rev() {
                let up = match self.up_input(d, &x)? {
                    Some(u) => fire(&d.up, &u, &mut states)?,
                    None => fire(&d.up, &x, &mut states)?,
                };
                let merged = self.merge(&skips[l], &up)?;
                let s1 = fire(&d.convs[0], &merged, &mut states)?;
                x = fire(&d.convs[1], &s1, &mut states)?;
            }
            let out = conv2d_forward(&x, &self.head.weight, &self.head.bias)?;
            logits.add_assign(&out)?;
        }
        Ok((logits, activity))
    }

    /// Convert every parameter to another scalar type.
    pub fn cast<G: Real>(&self) -> EvSegSnn<G> {
        let layer = |l: &SpikingLayer<F>| SpikingLayer {
            kind: l.kind,
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            leak: l.leak.cast(),
        };
        EvSegSnn {
            cfg: self.cfg.clone(),
            encoder: self
                .encoder
                .iter()
                .map(|e| EncoderLevel {
                    convs: [layer(&e.convs[0]), layer(&e.convs[1])],
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderLevel {
                    up: layer(&d.up),
                    convs: [layer(&d.convs[0]), layer(&d.convs[1])],
                })
                .collect(),
            head: Head {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }
}

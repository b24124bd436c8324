//! Declarative desk-scale latency-coded networks and their T-step unroll.
//!
//! Stateless layers (conv, linear, batch-norm, pooling) are applied to the
//! whole time-major activation `[T·N, ...]` at once; LIF layers carry their
//! membrane potential across the `T` blocks of rows. Because every weight is
//! a single tape leaf, its gradient is the sum of the per-timestep
//! contributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{conv_output_size, BatchNormState, Graph, NodeId, NormMode};
use crate::encoder::{self, EncodeMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::lif::{self, LifConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        out_features: usize,
    },
    BatchNorm,
    Lif,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    /// `body(x) + x`, spike-element-wise ADD with an identity shortcut.
    SewResidual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MlpMini,
    VggMini,
    SewMini,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MlpMini => "mlp-mini",
            Preset::VggMini => "vgg-mini",
            Preset::SewMini => "sew-mini",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlp-mini" => Some(Preset::MlpMini),
            "vgg-mini" => Some(Preset::VggMini),
            "sew-mini" => Some(Preset::SewMini),
            _ => None,
        }
    }

    /// Hidden stack for this preset. `hidden` is the MLP width, `channels`
    /// the two convolution widths.
    pub fn layers(self, hidden: usize, channels: [usize; 2], num_classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let block = |c| vec![LayerSpec::conv3(c), BatchNorm, Lif, AvgPool { kernel: 2 }];
        let mut layers = Vec::new();
        match self {
            Preset::MlpMini => {
                layers.extend([Flatten, Linear { out_features: hidden }, Lif]);
            }
            Preset::VggMini => {
                layers.extend(block(channels[0]));
                layers.extend(block(channels[1]));
                layers.push(Flatten);
            }
            Preset::SewMini => {
                layers.extend(block(channels[0]));
                layers.push(SewResidual {
                    body: vec![LayerSpec::conv3(channels[0]), BatchNorm, Lif],
                });
                layers.extend(block(channels[1]));
                layers.push(Flatten);
            }
        }
        layers.push(Linear {
            out_features: num_classes,
        });
        layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per-sample input `[C_in, H, W]`.
    pub input_shape: [usize; 3],
    pub encoder: EncoderConfig,
    pub layers: Vec<LayerSpec>,
    pub timesteps: usize,
    pub lif: LifConfig,
    /// Output-layer neuron config; `None` reuses `lif`.
    pub output_lif: Option<LifConfig>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn preset(
        preset: Preset,
        input_shape: [usize; 3],
        num_classes: usize,
        timesteps: usize,
    ) -> Self {
        Self::preset_with(preset, input_shape, num_classes, timesteps, 256, [16, 32])
    }

    pub fn preset_with(
        preset: Preset,
        input_shape: [usize; 3],
        num_classes: usize,
        timesteps: usize,
        hidden: usize,
        channels: [usize; 2],
    ) -> Self {
        Self {
            input_shape,
            encoder: EncoderConfig {
                timesteps,
                ..EncoderConfig::default()
            },
            layers: preset.layers(hidden, channels, num_classes),
            timesteps,
            lif: LifConfig::default(),
            output_lif: None,
            num_classes,
        }
    }

    pub fn output_lif(&self) -> LifConfig {
        self.output_lif.unwrap_or(self.lif)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Spec("T must be >= 1".into()));
        }
        if self.encoder.timesteps != self.timesteps {
            return Err(Error::Spec(format!(
                "encoder T = {} disagrees with model T = {}",
                self.encoder.timesteps, self.timesteps
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least 2 classes".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Spec("input shape must be positive".into()));
        }
        self.encoder.validate().map_err(|e| Error::Spec(e.to_string()))?;
        self.lif.validate().map_err(|e| Error::Spec(e.to_string()))?;
        self.output_lif().validate().map_err(|e| Error::Spec(e.to_string()))?;
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features }) if *out_features == self.num_classes => Ok(()),
            _ => Err(Error::Spec(format!(
                "network must end with a linear readout of {} classes",
                self.num_classes
            ))),
        }
    }
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Geometry of a layer with synaptic weights, for operation counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynapseGeometry {
    Conv {
        h_out: usize,
        w_out: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLayer {
    pub name: String,
    pub geometry: SynapseGeometry,
}

#[derive(Debug, Clone)]
enum Stage {
    Conv {
        weight: usize,
        stride: usize,
        pad: usize,
        synapse: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
        synapse: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        state: usize,
    },
    Lif,
    AvgPool {
        kernel: usize,
    },
    Flatten {
        features: usize,
    },
    Sew {
        body: Vec<Stage>,
    },
}

#[derive(Debug, Clone)]
struct FeatureStage {
    weight: usize,
    gamma: usize,
    beta: usize,
    state: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
    bn_names: Vec<String>,
    bn_states: Vec<BatchNormState>,
    features: Option<FeatureStage>,
    stages: Vec<Stage>,
    synapses: Vec<WeightedLayer>,
    spiking_layers: Vec<(String, usize)>,
}

/// Spike activity of one spiking layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeLayerStats {
    pub name: String,
    /// Neurons per sample.
    pub neurons: usize,
    /// Spikes per `(t, n)`, time-major.
    pub counts: Vec<f64>,
}

/// Input activity of one weighted layer: summed input values per timestep
/// (over the batch) and the number of input slots per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapticActivity {
    pub per_step: Vec<f64>,
    pub slots_per_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// `O[t]`, shape `[T, N, C]`.
    pub output_currents: Tensor,
    pub output_spikes: Tensor,
    pub output_pre_reset_potentials: Tensor,
    pub spike_layers: Vec<SpikeLayerStats>,
    /// Aligned with [`Model::weighted_layers`]; the first layer sees the raw
    /// image and has no spike input, so its entry is `None`.
    pub synaptic_activity: Vec<Option<SynapticActivity>>,
    /// Spike maps `[T, N, D]` per spiking layer, when requested.
    pub spike_maps: Option<Vec<Tensor>>,
}

impl ForwardRecord {
    pub fn timesteps(&self) -> usize {
        self.output_currents.shape()[0]
    }

    pub fn batch_size(&self) -> usize {
        self.output_currents.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.output_currents.shape()[2]
    }

    pub fn total_spikes(&self) -> f64 {
        self.spike_layers.iter().map(|l| l.counts.iter().sum::<f64>()).sum()
    }

    pub fn total_slots(&self) -> f64 {
        let slots: usize = self.spike_layers.iter().map(|l| l.neurons * l.counts.len()).sum();
        slots as f64
    }
}

/// Tape and handles of one forward pass, for training.
pub struct ForwardPass {
    pub graph: Graph,
    pub param_nodes: Vec<NodeId>,
    /// Time-major readout currents `[T·N, C]`.
    pub currents: NodeId,
    pub record: ForwardRecord,
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    rng: ChaCha8Rng,
    params: Vec<Param>,
    bn_names: Vec<String>,
    synapses: Vec<WeightedLayer>,
    spiking: Vec<(String, usize)>,
}

impl Builder<'_> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn batchnorm(&mut self, prefix: &str, channels: usize) -> (usize, usize, usize) {
        let gamma = self.push(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        let beta = self.push(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.bn_names.push(prefix.to_string());
        (gamma, beta, self.bn_names.len() - 1)
    }

    fn stages(&mut self, layers: &[LayerSpec], shape: &mut Vec<usize>, prefix: &str) -> Result<Vec<Stage>> {
        let mut out = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let stage = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = spatial(shape, &name)?;
                    let ho = conv_output_size(h, *kernel, *stride, *pad).map_err(|e| spec_err(&name, e))?;
                    let wo = conv_output_size(w, *kernel, *stride, *pad).map_err(|e| spec_err(&name, e))?;
                    let weight = self.kaiming(
                        format!("{name}.conv.weight"),
                        &[*out_channels, c, *kernel, *kernel],
                        c * kernel * kernel,
                    );
                    self.synapses.push(WeightedLayer {
                        name: format!("{name}.conv"),
                        geometry: SynapseGeometry::Conv {
                            h_out: ho,
                            w_out: wo,
                            c_in: c,
                            c_out: *out_channels,
                            k: *kernel,
                        },
                    });
                    *shape = vec![*out_channels, ho, wo];
                    Stage::Conv {
                        weight,
                        stride: *stride,
                        pad: *pad,
                        synapse: self.synapses.len() - 1,
                    }
                }
                LayerSpec::Linear { out_features } => {
                    let [inputs] = shape[..] else {
                        return Err(Error::Spec(format!(
                            "{name}: linear needs a flat input, got {shape:?} (missing flatten?)"
                        )));
                    };
                    let weight = self.kaiming(format!("{name}.linear.weight"), &[inputs, *out_features], inputs);
                    let bias = self.push(format!("{name}.linear.bias"), Tensor::zeros(&[*out_features]));
                    self.synapses.push(WeightedLayer {
                        name: format!("{name}.linear"),
                        geometry: SynapseGeometry::Fc {
                            inputs,
                            outputs: *out_features,
                        },
                    });
                    *shape = vec![*out_features];
                    Stage::Linear {
                        weight,
                        bias,
                        synapse: self.synapses.len() - 1,
                    }
                }
                LayerSpec::BatchNorm => {
                    let (gamma, beta, state) = self.batchnorm(&format!("{name}.bn"), shape[0]);
                    Stage::BatchNorm { gamma, beta, state }
                }
                LayerSpec::Lif => {
                    self.spiking.push((format!("{name}.lif"), shape.iter().product()));
                    Stage::Lif
                }
                LayerSpec::AvgPool { kernel } => {
                    let [c, h, w] = spatial(shape, &name)?;
                    if *kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                        return Err(Error::Spec(format!("{name}: pool {kernel} does not tile {h}×{w}")));
                    }
                    *shape = vec![c, h / kernel, w / kernel];
                    Stage::AvgPool { kernel: *kernel }
                }
                LayerSpec::Flatten => {
                    let features = shape.iter().product();
                    *shape = vec![features];
                    Stage::Flatten { features }
                }
                LayerSpec::SewResidual { body } => {
                    let before = shape.clone();
                    let body = self.stages(body, shape, &format!("{name}.body"))?;
                    if *shape != before {
                        return Err(Error::Spec(format!(
                            "{name}: residual body maps {before:?} to {shape:?}"
                        )));
                    }
                    Stage::Sew { body }
                }
            };
            out.push(stage);
        }
        Ok(out)
    }
}

fn spatial(shape: &[usize], name: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Spec(format!("{name}: expected C×H×W activation, got {shape:?}"))),
    }
}

fn spec_err(name: &str, e: Error) -> Error {
    Error::Spec(format!("{name}: {e}"))
}

/// Instantiates parameters with fan-in scaled normal weights drawn from
/// `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn_names: Vec::new(),
        synapses: Vec::new(),
        spiking: Vec::new(),
    };
    let [c_in, h, w] = b.spec.input_shape;
    let enc = &spec.encoder;
    let (features, mut shape) = match enc.mode {
        EncodeMode::Features => {
            let ho = conv_output_size(h, enc.kernel, enc.stride, enc.pad).map_err(|e| spec_err("encoder", e))?;
            let wo = conv_output_size(w, enc.kernel, enc.stride, enc.pad).map_err(|e| spec_err("encoder", e))?;
            let weight = b.kaiming(
                "encoder.conv.weight".into(),
                &[enc.channels, c_in, enc.kernel, enc.kernel],
                c_in * enc.kernel * enc.kernel,
            );
            let (gamma, beta, state) = b.batchnorm("encoder.bn", enc.channels);
            b.synapses.push(WeightedLayer {
                name: "encoder.conv".into(),
                geometry: SynapseGeometry::Conv {
                    h_out: ho,
                    w_out: wo,
                    c_in,
                    c_out: enc.channels,
                    k: enc.kernel,
                },
            });
            let stage = FeatureStage {
                weight,
                gamma,
                beta,
                state,
                stride: enc.stride,
                pad: enc.pad,
            };
            (Some(stage), vec![enc.channels, ho, wo])
        }
        EncodeMode::Raw => (None, vec![c_in, h, w]),
    };
    b.spiking.push(("encoder.spikes".into(), shape.iter().product()));
    let stages = b.stages(&spec.layers, &mut shape, "layers")?;
    b.spiking.push(("output.lif".into(), spec.num_classes));
    let bn_states = b.bn_names.iter().zip(bn_channels(&b.params, &b.bn_names)).map(|(_, c)| BatchNormState::new(c)).collect();
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        bn_names: b.bn_names,
        bn_states,
        features,
        stages,
        synapses: b.synapses,
        spiking_layers: b.spiking,
    })
}

fn bn_channels(params: &[Param], names: &[String]) -> Vec<usize> {
    names
        .iter()
        .map(|n| {
            let gamma = format!("{n}.gamma");
            params.iter().find(|p| p.name == gamma).map(|p| p.value.len()).unwrap_or(0)
        })
        .collect()
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Conv/linear layers in forward order, the encoder conv first.
    pub fn weighted_layers(&self) -> &[WeightedLayer] {
        &self.synapses
    }

    /// `(name, neurons per sample)` for every spiking layer in order: the
    /// encoder raster, hidden LIF layers, then the output neurons.
    pub fn spiking_layers(&self) -> &[(String, usize)] {
        &self.spiking_layers
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn_states
    }

    /// Parameters followed by batch-norm running statistics, by name.
    pub fn state_dict(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, st) in self.bn_names.iter().zip(&self.bn_states) {
            let c = st.running_mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], st.running_mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], st.running_var.clone()).expect("channel vector"),
            ));
        }
        out
    }

    /// Replaces every named tensor. All names must be present with matching
    /// shapes.
    pub fn load_state_dict(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let (_, t) = state
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Spec(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Spec(format!(
                    "tensor {name}: shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let expected = self.state_dict();
        if state.len() != expected.len() {
            return Err(Error::Spec(format!(
                "state has {} tensors, model has {}",
                state.len(),
                expected.len()
            )));
        }
        for p in &mut self.params {
            p.value = lookup(&p.name, p.value.shape())?;
        }
        for (name, st) in self.bn_names.iter().zip(&mut self.bn_states) {
            let c = [st.running_mean.len()];
            st.running_mean = lookup(&format!("{name}.running_mean"), &c)?.into_data();
            st.running_var = lookup(&format!("{name}.running_var"), &c)?.into_data();
        }
        Ok(())
    }

    /// Copy with every parameter and running statistic rounded through f32.
    pub fn quantized_f32(&self) -> Model {
        let mut m = self.clone();
        for p in &mut m.params {
            p.value = p.value.quantized_f32();
        }
        for st in &mut m.bn_states {
            st.running_mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
            st.running_var.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        m
    }

    /// Builds the tape for one forward pass over `batch[N×C_in×H×W]`.
    /// Train mode updates batch-norm running statistics.
    pub fn forward_graph(&mut self, batch: &Tensor, mode: NormMode, record_spikes: bool) -> Result<ForwardPass> {
        let mut states = std::mem::take(&mut self.bn_states);
        let out = self.forward_with(batch, mode, record_spikes, &mut states);
        self.bn_states = states;
        out
    }

    /// Evaluation-mode forward that leaves the model untouched.
    pub fn forward_eval(&self, batch: &Tensor, record_spikes: bool) -> Result<ForwardRecord> {
        let mut states = self.bn_states.clone();
        Ok(self.forward_with(batch, NormMode::Eval, record_spikes, &mut states)?.record)
    }

    /// Eval-mode latency code of `batch`: features (or raw pixels) and a
    /// spike raster `[T, N, ...]`.
    pub fn encode(&self, batch: &Tensor) -> Result<encoder::EncodedInput> {
        let [c, h, w] = self.spec.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        let features = match &self.features {
            Some(f) => {
                let mut g = Graph::new();
                let image = g.leaf(batch.clone());
                let k = g.leaf(self.params[f.weight].value.clone());
                let gamma = g.leaf(self.params[f.gamma].value.clone());
                let beta = g.leaf(self.params[f.beta].value.clone());
                let mut st = self.bn_states[f.state].clone();
                let out =
                    encoder::feature_nodes(&mut g, image, k, gamma, beta, &mut st, f.stride, f.pad, NormMode::Eval)?;
                g.value(out).clone()
            }
            None => batch.clone(),
        };
        encoder::latency_encode(&features, self.spec.timesteps)
    }

    /// `forward_unroll` in eval mode; see [`Model::forward_eval`].
    pub fn forward_unroll(&self, batch: &Tensor) -> Result<ForwardRecord> {
        self.forward_eval(batch, false)
    }

    fn forward_with(
        &self,
        batch: &Tensor,
        mode: NormMode,
        record_spikes: bool,
        states: &mut [BatchNormState],
    ) -> Result<ForwardPass> {
        let [c, h, w] = self.spec.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        let steps = self.spec.timesteps;
        let n = batch.shape()[0];
        let mut run = Run {
            graph: Graph::new(),
            param_nodes: Vec::new(),
            states,
            mode,
            steps,
            batch: n,
            spike_layers: Vec::new(),
            activity: vec![None; self.synapses.len()],
            maps: record_spikes.then(Vec::new),
        };
        run.param_nodes = self.params.iter().map(|p| run.graph.leaf(p.value.clone())).collect();
        let image = run.graph.leaf(batch.clone());
        let encoded = match &self.features {
            Some(f) => {
                let p = &run.param_nodes;
                let (k, g, b) = (p[f.weight], p[f.gamma], p[f.beta]);
                let feats = encoder::feature_nodes(
                    &mut run.graph,
                    image,
                    k,
                    g,
                    b,
                    &mut run.states[f.state],
                    f.stride,
                    f.pad,
                    mode,
                )?;
                run.graph.latency_encode(feats, steps)?
            }
            None => run.graph.latency_encode(image, steps)?,
        };
        run.record_spikes(&self.spiking_layers[0].0, encoded);
        let mut lif_names = self.spiking_layers[1..self.spiking_layers.len() - 1].iter().map(|(n, _)| n.as_str());
        let currents = run.apply(&self.stages, encoded, &self.spec.lif, &mut lif_names)?;

        let c = self.spec.num_classes;
        let current_values = run.graph.value(currents).reshape(&[steps, n, c])?;
        let trace = lif::lif_unroll(&current_values, &self.spec.output_lif(), None)?;
        run.spike_layers.push(SpikeLayerStats {
            name: "output.lif".into(),
            neurons: c,
            counts: trace.spikes.data().chunks_exact(c).map(|r| r.iter().sum()).collect(),
        });
        if let Some(maps) = &mut run.maps {
            maps.push(trace.spikes.clone());
        }
        let record = ForwardRecord {
            output_currents: current_values,
            output_spikes: trace.spikes,
            output_pre_reset_potentials: trace.pre_reset_potentials,
            spike_layers: run.spike_layers,
            synaptic_activity: run.activity,
            spike_maps: run.maps,
        };
        Ok(ForwardPass {
            graph: run.graph,
            param_nodes: run.param_nodes,
            currents,
            record,
        })
    }
}

struct Run<'s> {
    graph: Graph,
    param_nodes: Vec<NodeId>,
    states: &'s mut [BatchNormState],
    mode: NormMode,
    steps: usize,
    batch: usize,
    spike_layers: Vec<SpikeLayerStats>,
    activity: Vec<Option<SynapticActivity>>,
    maps: Option<Vec<Tensor>>,
}

impl Run<'_> {
    fn record_spikes(&mut self, name: &str, node: NodeId) {
        let v = self.graph.value(node);
        let rows = self.steps * self.batch;
        let neurons = v.len() / rows;
        self.spike_layers.push(SpikeLayerStats {
            name: name.to_string(),
            neurons,
            counts: v.data().chunks_exact(neurons).map(|r| r.iter().sum()).collect(),
        });
        if let Some(maps) = &mut self.maps {
            maps.push(Tensor::new(&[self.steps, self.batch, neurons], v.data().to_vec()).expect("spike map shape"));
        }
    }

    fn record_activity(&mut self, synapse: usize, input: NodeId) {
        let v = self.graph.value(input);
        let per_step = v.len() / self.steps;
        self.activity[synapse] = Some(SynapticActivity {
            per_step: v.data().chunks_exact(per_step).map(|c| c.iter().sum()).collect(),
            slots_per_step: per_step as u64,
        });
    }

    fn apply<'n>(
        &mut self,
        stages: &[Stage],
        mut h: NodeId,
        lif_cfg: &LifConfig,
        lif_names: &mut impl Iterator<Item = &'n str>,
    ) -> Result<NodeId> {
        for stage in stages {
            h = match stage {
                Stage::Conv {
                    weight,
                    stride,
                    pad,
                    synapse,
                } => {
                    self.record_activity(*synapse, h);
                    self.graph.conv2d(h, self.param_nodes[*weight], None, *stride, *pad)?
                }
                Stage::Linear { weight, bias, synapse } => {
                    self.record_activity(*synapse, h);
                    let (w, b) = (self.param_nodes[*weight], self.param_nodes[*bias]);
                    self.graph.linear(h, w, Some(b))?
                }
                Stage::BatchNorm { gamma, beta, state } => {
                    let (g, b) = (self.param_nodes[*gamma], self.param_nodes[*beta]);
                    self.graph.batchnorm2d(h, g, b, &mut self.states[*state], self.mode)?
                }
                Stage::Lif => {
                    let s = self.graph.lif_unroll(h, self.steps, lif_cfg)?;
                    let name = lif_names.next().expect("one name per LIF layer");
                    self.record_spikes(name, s);
                    s
                }
                Stage::AvgPool { kernel } => self.graph.avg_pool2d(h, *kernel)?,
                Stage::Flatten { features } => {
                    let rows = self.graph.value(h).shape()[0];
                    self.graph.reshape(h, &[rows, *features])?
                }
                Stage::Sew { body } => {
                    let main = self.apply(body, h, lif_cfg, lif_names)?;
                    self.graph.sew_residual(main, h)?
                }
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(t: usize) -> ModelSpec {
        ModelSpec::preset_with(Preset::MlpMini, [1, 4, 4], 3, t, 8, [4, 4])
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&mlp(4), 7).unwrap();
        let b = build_model(&mlp(4), 7).unwrap();
        let c = build_model(&mlp(4), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn linear_shapes() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 3 }],
            encoder: EncoderConfig {
                channels: 1,
                kernel: 1,
                pad: 0,
                mode: EncodeMode::Raw,
                ..EncoderConfig::default()
            },
            ..ModelSpec::preset(Preset::MlpMini, [1, 2, 2], 3, 4)
        };
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(m.param("layers.1.linear.weight").unwrap().value.shape(), &[4, 3]);
        assert_eq!(m.param("layers.1.linear.bias").unwrap().value.shape(), &[3]);
    }

    #[test]
    fn fan_in_scaled_init() {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 1000 },
                LayerSpec::Lif,
                LayerSpec::Linear { out_features: 2 },
            ],
            encoder: EncoderConfig {
                mode: EncodeMode::Raw,
                ..EncoderConfig::default()
            },
            ..ModelSpec::preset(Preset::MlpMini, [10, 10, 10], 2, 4)
        };
        let m = build_model(&spec, 3).unwrap();
        let w = &m.param("layers.1.linear.weight").unwrap().value;
        assert_eq!(w.shape(), &[1000, 1000]);
        let mean = w.mean();
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 1000.0).sqrt();
        assert!((std - target).abs() / target < 0.1, "{std} vs {target}");
    }

    #[test]
    fn rejects_incompatible_specs() {
        let mut spec = mlp(4);
        spec.layers.pop();
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
        let mut spec = mlp(4);
        spec.layers.remove(0); // linear on a C×H×W activation
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
        let mut spec = ModelSpec::preset(Preset::VggMini, [1, 6, 6], 3, 2);
        spec.layers[3] = LayerSpec::AvgPool { kernel: 4 };
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
        let mut spec = mlp(4);
        spec.encoder.timesteps = 3;
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn single_step_forward() {
        let m = build_model(&mlp(1), 1).unwrap();
        let rec = m.forward_unroll(&Tensor::full(&[2, 1, 4, 4], 0.3)).unwrap();
        assert_eq!(rec.output_currents.shape(), &[1, 2, 3]);
        assert_eq!(rec.output_spikes.shape(), &[1, 2, 3]);
    }

    #[test]
    fn zero_image_spikes_at_half_time() {
        for t in [1usize, 2, 3, 4, 8] {
            let m = build_model(&mlp(t), 5).unwrap();
            let rec = m.forward_eval(&Tensor::zeros(&[2, 1, 4, 4]), true).unwrap();
            let enc = &rec.spike_maps.as_ref().unwrap()[0];
            let fire_at = t.div_ceil(2);
            for step in 0..t {
                let row = enc.rows(step, 1);
                let want = if step + 1 == fire_at { row.len() as f64 } else { 0.0 };
                assert_eq!(row.sum(), want, "T={t} step={step}");
            }
        }
    }

    #[test]
    fn spike_counts_match_recount() {
        let spec = ModelSpec::preset_with(Preset::SewMini, [1, 8, 8], 4, 3, 8, [4, 6]);
        let m = build_model(&spec, 2).unwrap();
        let img = Tensor::new(&[2, 1, 8, 8], (0..128).map(|i| ((i * 37) % 17) as f64 / 17.0).collect()).unwrap();
        let rec = m.forward_eval(&img, true).unwrap();
        let maps = rec.spike_maps.as_ref().unwrap();
        assert_eq!(maps.len(), rec.spike_layers.len());
        assert_eq!(rec.spike_layers.len(), m.spiking_layers().len());
        for (layer, map) in rec.spike_layers.iter().zip(maps) {
            assert_eq!(layer.counts.iter().sum::<f64>(), map.sum());
            assert!(map.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn deterministic_forward() {
        let spec = ModelSpec::preset_with(Preset::VggMini, [1, 8, 8], 3, 4, 8, [4, 4]);
        let mut a = build_model(&spec, 11).unwrap();
        let mut b = build_model(&spec, 11).unwrap();
        let img = Tensor::new(&[3, 1, 8, 8], (0..192).map(|i| ((i * 13) % 29) as f64 / 29.0).collect()).unwrap();
        let ra = a.forward_graph(&img, NormMode::Train, true).unwrap().record;
        let rb = b.forward_graph(&img, NormMode::Train, true).unwrap().record;
        assert_eq!(ra, rb);
        assert_eq!(a.bn_states(), b.bn_states());
    }

    #[test]
    fn encode_matches_recorded_input_layer() {
        let spec = ModelSpec::preset_with(Preset::VggMini, [1, 8, 8], 3, 4, 8, [4, 4]);
        let m = build_model(&spec, 3).unwrap();
        let img = Tensor::new(&[2, 1, 8, 8], (0..128).map(|i| ((i * 7) % 17) as f64 / 17.0).collect()).unwrap();
        let enc = m.encode(&img).unwrap();
        let rec = m.forward_eval(&img, true).unwrap();
        let map = &rec.spike_maps.unwrap()[0];
        assert_eq!(enc.spikes.data(), map.data());
        assert_eq!(enc.spikes.shape()[..2], [4, 2]);
    }
}

//! Small encoder plus two-layer projection head with explicit forward and
//! backward passes. Outputs are renormalized to the unit sphere; the
//! normalization Jacobian (I - yy^T)/||z|| is applied per row on the way
//! back. SGD-with-momentum and LARS optimizers share a cosine-with-warmup
//! schedule.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::error::{OrcoError, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Pass-through.
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `act(x W^T + b)`. Weight shape is (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Encoder plus exactly-two-layer projection head; the final operation
/// renormalizes every output row to the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Bumped on every optimizer step; caches check it to detect staleness.
    pub version: u64,
}

impl ProjectionModel {
    /// Fan-in uniform initialization, deterministic per seed. The encoder
    /// gets one ReLU layer per listed width; the head is hidden-ReLU then a
    /// linear output layer.
    pub fn new(
        input_dim: usize,
        encoder_widths: &[usize],
        hidden_dim: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(OrcoError::InvalidArgument("model dims must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut init = |out: usize, inp: usize, act: Activation| -> Layer {
            let bound = 1.0 / (inp as f64).sqrt();
            let mut weight = Array2::<f64>::zeros((out, inp));
            for v in weight.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            let mut bias = Array1::<f64>::zeros(out);
            for v in bias.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            Layer { weight, bias, activation: act }
        };
        let mut encoder = Vec::with_capacity(encoder_widths.len());
        let mut prev = input_dim;
        for &w in encoder_widths {
            if w == 0 {
                return Err(OrcoError::InvalidArgument("encoder width must be positive".into()));
            }
            encoder.push(init(w, prev, Activation::Relu));
            prev = w;
        }
        let head = vec![
            init(hidden_dim, prev, Activation::Relu),
            init(output_dim, hidden_dim, Activation::Identity),
        ];
        Ok(Self { encoder, head, input_dim, hidden_dim, output_dim, version: 0 })
    }

    /// Assemble a model from explicit layers, checking that shapes chain.
    pub fn from_layers(encoder: Vec<Layer>, head: Vec<Layer>, input_dim: usize) -> Result<Self> {
        if head.len() != 2 {
            return Err(OrcoError::InvalidArgument(format!(
                "head must have exactly 2 layers, got {}",
                head.len()
            )));
        }
        let mut prev = input_dim;
        for (i, layer) in encoder.iter().chain(head.iter()).enumerate() {
            if layer.in_dim() != prev {
                return Err(OrcoError::InvalidArgument(format!(
                    "layer {i} expects input dim {}, previous layer provides {prev}",
                    layer.in_dim()
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(OrcoError::InvalidArgument(format!(
                    "layer {i} bias length {} does not match out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            prev = layer.out_dim();
        }
        let hidden_dim = head[0].out_dim();
        let output_dim = head[1].out_dim();
        Ok(Self { encoder, head, input_dim, hidden_dim, output_dim, version: 0 })
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(self.head.iter())
    }

    /// Forward pass. Returns unit-norm output rows and the activation cache
    /// needed for [`backward`].
    pub fn forward(&self, inputs: &Array2<f64>, freeze: &FreezePlan) -> Result<(Array2<f64>, ForwardCache)> {
        if inputs.ncols() != self.input_dim {
            return Err(OrcoError::InvalidArgument(format!(
                "inputs have {} columns, model expects {}",
                inputs.ncols(),
                self.input_dim
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.encoder.len() + 2);
        let mut pre_activations = Vec::with_capacity(self.encoder.len() + 2);
        let mut current = inputs.clone();
        for layer in self.layers() {
            layer_inputs.push(current.clone());
            let mut pre = current.dot(&layer.weight.t());
            for mut row in pre.rows_mut() {
                row += &layer.bias;
            }
            pre_activations.push(pre.clone());
            pre.mapv_inplace(|v| layer.activation.apply(v));
            current = pre;
        }
        let pre_norm = current;
        let mut output = pre_norm.clone();
        let mut norms = Array1::<f64>::zeros(output.nrows());
        for (i, mut row) in output.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm <= 1e-12 {
                return Err(OrcoError::NumericalFailure {
                    epoch: 0,
                    context: format!("output row {i} collapsed to zero norm"),
                });
            }
            norms[i] = norm;
            row.mapv_inplace(|v| v / norm);
        }
        let cache = ForwardCache {
            layer_inputs,
            pre_activations,
            pre_norm,
            output: output.clone(),
            norms,
            version: self.version,
            freeze: *freeze,
        };
        Ok((output, cache))
    }

    /// Backpropagate `grad_output` (gradient of the loss with respect to the
    /// normalized outputs). Frozen components receive exactly zero gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> Result<ModelGrads> {
        if cache.version != self.version {
            return Err(OrcoError::InvalidState(format!(
                "stale activation cache: model version {}, cache version {}",
                self.version, cache.version
            )));
        }
        if grad_output.raw_dim() != cache.output.raw_dim() {
            return Err(OrcoError::InvalidArgument("grad_output shape mismatch".into()));
        }

        // through the row normalization: g = (g_out - y (y . g_out)) / ||z||
        let mut grad = Array2::<f64>::zeros(grad_output.raw_dim());
        for i in 0..grad_output.nrows() {
            let y = cache.output.row(i);
            let g = grad_output.row(i);
            let proj = y.dot(&g);
            for j in 0..grad_output.ncols() {
                grad[[i, j]] = (g[j] - y[j] * proj) / cache.norms[i];
            }
        }

        let n_layers = self.encoder.len() + self.head.len();
        let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(n_layers);
        let all_layers: Vec<&Layer> = self.layers().collect();
        for l in (0..n_layers).rev() {
            let layer = all_layers[l];
            let pre = &cache.pre_activations[l];
            let mut delta = grad;
            for (d, p) in delta.iter_mut().zip(pre.iter()) {
                *d *= layer.activation.derivative(*p);
            }
            let grad_w = delta.t().dot(&cache.layer_inputs[l]);
            let grad_b = delta.sum_axis(ndarray::Axis(0));
            grad = delta.dot(&layer.weight);
            layer_grads.push(LayerGrads { weight: grad_w, bias: grad_b });
        }
        layer_grads.reverse();
        let mut head = layer_grads.split_off(self.encoder.len());
        let mut encoder = layer_grads;
        if cache.freeze.encoder_frozen {
            for g in &mut encoder {
                g.weight.fill(0.0);
                g.bias.fill(0.0);
            }
        }
        if cache.freeze.head_frozen {
            for g in &mut head {
                g.weight.fill(0.0);
                g.bias.fill(0.0);
            }
        }
        Ok(ModelGrads { encoder, head, inputs: grad })
    }

    /// Serialize to the checkpoint text format (exact round-trip).
    pub fn write_checkpoint(&self) -> String {
        let mut out = String::from("orco-model v1\n");
        out.push_str(&format!(
            "input_dim={} hidden_dim={} output_dim={} version={}\n",
            self.input_dim, self.hidden_dim, self.output_dim, self.version
        ));
        out.push_str(&format!(
            "encoder_layers={} head_layers={}\n",
            self.encoder.len(),
            self.head.len()
        ));
        let sections: [(&str, &Vec<Layer>); 2] = [("encoder", &self.encoder), ("head", &self.head)];
        for (name, layers) in sections {
            for (i, layer) in layers.iter().enumerate() {
                let act = match layer.activation {
                    Activation::Relu => "relu",
                    Activation::Identity => "identity",
                };
                out.push_str(&format!(
                    "layer {name} {i} {act} {} {}\n",
                    layer.out_dim(),
                    layer.in_dim()
                ));
                for row in layer.weight.rows() {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                    out.push_str(&cells.join(" "));
                    out.push('\n');
                }
                let cells: Vec<String> = layer.bias.iter().map(|v| format!("{v:.16e}")).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }

    /// Parse the [`write_checkpoint`](Self::write_checkpoint) format.
    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, m: String| OrcoError::Parse { line, message: m };
        if lines.is_empty() || lines[0].trim() != "orco-model v1" {
            return Err(bad(1, "expected header `orco-model v1`".into()));
        }
        let dims = parse_kv_line(lines.get(1).copied().unwrap_or(""), 2)?;
        let input_dim = get_usize(&dims, "input_dim", 2)?;
        let hidden_dim = get_usize(&dims, "hidden_dim", 2)?;
        let output_dim = get_usize(&dims, "output_dim", 2)?;
        let version = get_usize(&dims, "version", 2)? as u64;
        let counts = parse_kv_line(lines.get(2).copied().unwrap_or(""), 3)?;
        let n_encoder = get_usize(&counts, "encoder_layers", 3)?;
        let n_head = get_usize(&counts, "head_layers", 3)?;

        let mut cursor = 3usize;
        let read_layer = |cursor: &mut usize| -> Result<Layer> {
            let lineno = *cursor + 1;
            let header = lines
                .get(*cursor)
                .ok_or_else(|| bad(lineno, "unexpected end of checkpoint".into()))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 6 || parts[0] != "layer" {
                return Err(bad(lineno, format!("expected layer header, got `{header}`")));
            }
            let activation = match parts[3] {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => return Err(bad(lineno, format!("unknown activation `{other}`"))),
            };
            let out: usize = parts[4].parse().map_err(|_| bad(lineno, "bad out dim".into()))?;
            let inp: usize = parts[5].parse().map_err(|_| bad(lineno, "bad in dim".into()))?;
            *cursor += 1;
            let mut weight = Array2::<f64>::zeros((out, inp));
            for r in 0..out {
                let lineno = *cursor + 1;
                let row = lines
                    .get(*cursor)
                    .ok_or_else(|| bad(lineno, "unexpected end of checkpoint".into()))?;
                let vals = crate::geometry::parse_float_row(row, lineno)?;
                if vals.len() != inp {
                    return Err(bad(lineno, format!("expected {inp} columns, got {}", vals.len())));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    weight[[r, c]] = v;
                }
                *cursor += 1;
            }
            let lineno = *cursor + 1;
            let brow = lines
                .get(*cursor)
                .ok_or_else(|| bad(lineno, "unexpected end of checkpoint".into()))?;
            let bias_vals = crate::geometry::parse_float_row(brow, lineno)?;
            if bias_vals.len() != out {
                return Err(bad(lineno, format!("expected {out} bias values")));
            }
            *cursor += 1;
            Ok(Layer { weight, bias: Array1::from(bias_vals), activation })
        };
        let mut encoder = Vec::with_capacity(n_encoder);
        for _ in 0..n_encoder {
            encoder.push(read_layer(&mut cursor)?);
        }
        let mut head = Vec::with_capacity(n_head);
        for _ in 0..n_head {
            head.push(read_layer(&mut cursor)?);
        }
        let mut model = Self::from_layers(encoder, head, input_dim)?;
        if model.hidden_dim != hidden_dim || model.output_dim != output_dim {
            return Err(bad(2, "declared dims do not match layer shapes".into()));
        }
        model.version = version;
        Ok(model)
    }
}

fn parse_kv_line(line: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or(OrcoError::Parse {
            line: lineno,
            message: format!("expected key=value, got `{tok}`"),
        })?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn get_usize(kv: &[(String, String)], key: &str, lineno: usize) -> Result<usize> {
    kv.iter()
        .find(|(k, _)| k == key)
        .ok_or(OrcoError::Parse { line: lineno, message: format!("missing `{key}`") })?
        .1
        .parse()
        .map_err(|_| OrcoError::Parse { line: lineno, message: format!("bad `{key}`") })
}

/// Activations recorded by [`ProjectionModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    #[allow(dead_code)]
    pre_norm: Array2<f64>,
    output: Array2<f64>,
    norms: Array1<f64>,
    version: u64,
    freeze: FreezePlan,
}

/// Per-layer parameter gradients plus the gradient reaching the raw inputs.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<LayerGrads>,
    pub head: Vec<LayerGrads>,
    pub inputs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Which parts of the model train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePlan {
    pub encoder_frozen: bool,
    pub head_frozen: bool,
}

impl FreezePlan {
    pub const ALL_TRAINABLE: FreezePlan =
        FreezePlan { encoder_frozen: false, head_frozen: false };
    pub const HEAD_ONLY: FreezePlan = FreezePlan { encoder_frozen: true, head_frozen: false };

    /// Training with everything frozen is a configuration error.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.encoder_frozen && self.head_frozen {
            return Err(OrcoError::Configuration(
                "at least one of encoder and head must be trainable".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

/// Linear warmup to `lr_max`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CosineWarmup {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineWarmup {
    /// Learning-rate factor at 1-based step `t` (the t-th update).
    pub fn lr(&self, t: usize, lr_max: f64) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return lr_max * t as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == self.warmup_steps {
            return lr_max;
        }
        let progress =
            (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

const LARS_EPSILON: f64 = 1e-9;

/// Velocity buffers plus schedule position for one training phase.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr_max: f64,
    pub momentum: f64,
    pub schedule: CosineWarmup,
    pub step_count: usize,
    velocity_encoder: Vec<LayerGrads>,
    velocity_head: Vec<LayerGrads>,
}

impl OptimizerState {
    pub fn new(
        kind: OptimizerKind,
        lr_max: f64,
        momentum: f64,
        schedule: CosineWarmup,
        model: &ProjectionModel,
    ) -> Result<Self> {
        if lr_max <= 0.0 {
            return Err(OrcoError::InvalidArgument(format!("lr_max must be positive, got {lr_max}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OrcoError::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if schedule.total_steps == 0 || schedule.warmup_steps > schedule.total_steps {
            return Err(OrcoError::InvalidArgument(format!(
                "bad schedule: warmup {} of total {}",
                schedule.warmup_steps, schedule.total_steps
            )));
        }
        let zero = |layers: &[Layer]| -> Vec<LayerGrads> {
            layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect()
        };
        Ok(Self {
            kind,
            lr_max,
            momentum,
            schedule,
            step_count: 0,
            velocity_encoder: zero(&model.encoder),
            velocity_head: zero(&model.head),
        })
    }

    /// Current learning rate for the *next* update.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.step_count + 1, self.lr_max)
    }
}

/// One update: `v <- m v + g; w <- w - lr(t) * trust * v`, where the trust
/// ratio is `||w|| / (||g|| + eps)` per tensor for LARS and 1 otherwise.
/// Frozen components are skipped entirely (bit-identical parameters).
pub fn optimizer_step(
    opt: &mut OptimizerState,
    model: &mut ProjectionModel,
    grads: &ModelGrads,
    freeze: &FreezePlan,
) -> Result<f64> {
    if opt.step_count >= opt.schedule.total_steps {
        return Err(OrcoError::ScheduleExhausted {
            step: opt.step_count + 1,
            total: opt.schedule.total_steps,
        });
    }
    if grads.encoder.len() != model.encoder.len() || grads.head.len() != model.head.len() {
        return Err(OrcoError::InvalidArgument("gradient layout does not match model".into()));
    }
    let lr = opt.schedule.lr(opt.step_count + 1, opt.lr_max);
    let kind = opt.kind;
    let momentum = opt.momentum;

    let update = |layers: &mut [Layer], vels: &mut [LayerGrads], grads: &[LayerGrads]| {
        for ((layer, vel), grad) in layers.iter_mut().zip(vels.iter_mut()).zip(grads.iter()) {
            for (tensor, v, g) in [
                (
                    layer.weight.as_slice_mut().unwrap(),
                    vel.weight.as_slice_mut().unwrap(),
                    grad.weight.as_slice().unwrap(),
                ),
                (
                    layer.bias.as_slice_mut().unwrap(),
                    vel.bias.as_slice_mut().unwrap(),
                    grad.bias.as_slice().unwrap(),
                ),
            ] {
                let trust = match kind {
                    OptimizerKind::SgdMomentum => 1.0,
                    OptimizerKind::Lars => {
                        let wn = tensor.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                        wn / (gn + LARS_EPSILON)
                    }
                };
                for i in 0..tensor.len() {
                    v[i] = momentum * v[i] + g[i];
                    tensor[i] -= lr * trust * v[i];
                }
            }
        }
    };
    if !freeze.encoder_frozen {
        update(&mut model.encoder, &mut opt.velocity_encoder, &grads.encoder);
    }
    if !freeze.head_frozen {
        update(&mut model.head, &mut opt.velocity_head, &grads.head);
    }
    opt.step_count += 1;
    model.version += 1;
    Ok(lr)
}

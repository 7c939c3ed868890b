//! PilotNet-style frame encoder followed by an LSTM temporal head.
//!
//! Per frame: fixed pixel normalization, five valid-padding convolutions
//! (5x5/2, 5x5/2, 5x5/2, 3x3/1, 3x3/1 with 24/36/48/64/64 channels, ReLU),
//! flatten, one fully connected layer of width 1024 (ReLU). The per-frame
//! vectors of a window are fed through the LSTM and the last hidden state is
//! read out linearly to a single steering angle.
//!
//! Orientation maps enter either as input channels 3 and 4 (`InjectAt::Input`)
//! or as two extra feature channels appended after convolution `k`
//! (`InjectAt::Conv(k)`).

pub mod layers;
pub mod lstm;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::camera_geometry::{resize_maps_to, orientation_maps, CameraIntrinsics};
use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use layers::ConvGeometry;
use lstm::{LayerTape, LstmGrads, LstmWeights};

pub const INPUT_ROWS: usize = 66;
pub const INPUT_COLS: usize = 200;
pub const DEFAULT_FC_DIM: usize = 1024;

/// `(kernel, stride, out_channels)` of the five convolutions.
pub const CONV_LAYERS: [(usize, usize, usize); 5] =
    [(5, 2, 24), (5, 2, 36), (5, 2, 48), (3, 1, 64), (3, 1, 64)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InjectAt {
    None,
    Input,
    /// After convolution `k`, `1..=5`.
    Conv(usize),
}

impl InjectAt {
    pub const FUSION_POINTS: [InjectAt; 6] = [
        InjectAt::Input,
        InjectAt::Conv(1),
        InjectAt::Conv(2),
        InjectAt::Conv(3),
        InjectAt::Conv(4),
        InjectAt::Conv(5),
    ];
}

impl fmt::Display for InjectAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectAt::None => f.write_str("NONE"),
            InjectAt::Input => f.write_str("INPUT"),
            InjectAt::Conv(k) => write!(f, "CONV{k}"),
        }
    }
}

impl FromStr for InjectAt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        match up.as_str() {
            "NONE" => Ok(InjectAt::None),
            "INPUT" => Ok(InjectAt::Input),
            _ => match up.strip_prefix("CONV").and_then(|d| d.parse::<usize>().ok()) {
                Some(k) if (1..=5).contains(&k) => Ok(InjectAt::Conv(k)),
                _ => Err(invalid(format!(
                    "unknown injection point {s:?} (NONE, INPUT, CONV1..CONV5)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub seq_len: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub inject_at: InjectAt,
    pub fc_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            seq_len: 8,
            lstm_hidden: 128,
            lstm_layers: 1,
            inject_at: InjectAt::None,
            fc_dim: DEFAULT_FC_DIM,
        }
    }
}

impl ModelConfig {
    pub fn rgb() -> Self {
        Self::default()
    }

    /// Five-channel input with the orientation maps at the input layer.
    pub fn with_orientation_input() -> Self {
        Self {
            in_channels: 5,
            inject_at: InjectAt::Input,
            ..Self::default()
        }
    }

    pub fn with_fusion(inject_at: InjectAt) -> Self {
        match inject_at {
            InjectAt::Input => Self::with_orientation_input(),
            other => Self {
                inject_at: other,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.in_channels, self.inject_at) {
            (5, InjectAt::Input) | (3, InjectAt::None) | (3, InjectAt::Conv(1..=5)) => {}
            (c @ (3 | 5), at) => {
                return Err(invalid(format!(
                    "inject_at={at} is incompatible with in_channels={c}"
                )))
            }
            (c, _) => return Err(invalid(format!("in_channels must be 3 or 5 (got {c})"))),
        }
        if self.seq_len == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 || self.fc_dim == 0 {
            return Err(invalid(
                "seq_len, lstm_hidden, lstm_layers and fc_dim must be positive",
            ));
        }
        Ok(())
    }

    /// Whether frames need [`FusionMaps`] alongside their pixels.
    pub fn needs_fusion_maps(&self) -> bool {
        matches!(self.inject_at, InjectAt::Conv(_))
    }

    /// Geometry of each convolution, including the two extra channels at the injection point.
    pub fn conv_geometries(&self) -> [ConvGeometry; 5] {
        let mut rows = INPUT_ROWS;
        let mut cols = INPUT_COLS;
        let mut channels = self.in_channels;
        let mut out = [ConvGeometry {
            in_channels: 0,
            out_channels: 0,
            kernel: 0,
            stride: 0,
            in_rows: 0,
            in_cols: 0,
        }; 5];
        for (l, &(kernel, stride, width)) in CONV_LAYERS.iter().enumerate() {
            if self.inject_at == InjectAt::Conv(l) {
                channels += 2;
            }
            out[l] = ConvGeometry {
                in_channels: channels,
                out_channels: width,
                kernel,
                stride,
                in_rows: rows,
                in_cols: cols,
            };
            rows = out[l].out_rows();
            cols = out[l].out_cols();
            channels = width;
        }
        out
    }

    /// Spatial `(rows, cols)` of the maps injected after a convolution, if any.
    pub fn fusion_size(&self) -> Option<(usize, usize)> {
        match self.inject_at {
            InjectAt::Conv(k) => {
                let g = self.conv_geometries()[k - 1];
                Some((g.out_rows(), g.out_cols()))
            }
            _ => None,
        }
    }

    /// Width of the flattened encoder output entering the fully connected layer.
    pub fn flat_dim(&self) -> usize {
        let last = self.conv_geometries()[4];
        let extra = if self.inject_at == InjectAt::Conv(5) { 2 } else { 0 };
        (last.out_channels + extra) * last.out_pixels()
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("model.in_channels", self.in_channels);
        kv.set("model.seq_len", self.seq_len);
        kv.set("model.lstm_hidden", self.lstm_hidden);
        kv.set("model.lstm_layers", self.lstm_layers);
        kv.set("model.inject_at", self.inject_at);
        kv.set("model.fc_dim", self.fc_dim);
    }

    /// Reads `model.*` keys, starting from defaults; `inject_at` follows `in_channels` when absent.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let in_channels = kv.parsed("model.in_channels")?.unwrap_or(d.in_channels);
        let inject_at = match kv.parsed::<InjectAt>("model.inject_at")? {
            Some(at) => at,
            None if in_channels == 5 => InjectAt::Input,
            None => InjectAt::None,
        };
        let cfg = Self {
            in_channels,
            seq_len: kv.parsed("model.seq_len")?.unwrap_or(d.seq_len),
            lstm_hidden: kv.parsed("model.lstm_hidden")?.unwrap_or(d.lstm_hidden),
            lstm_layers: kv.parsed("model.lstm_layers")?.unwrap_or(d.lstm_layers),
            inject_at,
            fc_dim: kv.parsed("model.fc_dim")?.unwrap_or(d.fc_dim),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Orientation maps normalized to (-1, 1) at the spatial size of an injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionMaps<T> {
    pub rows: usize,
    pub cols: usize,
    pub horizontal: Vec<T>,
    pub vertical: Vec<T>,
}

impl<T: Scalar> FusionMaps<T> {
    /// Maps for a camera described at network input resolution, resized to `rows x cols`.
    pub fn for_camera(k: &CameraIntrinsics<f64>, rows: usize, cols: usize) -> Result<Self> {
        let full = orientation_maps(k)?;
        let resized = resize_maps_to(&full, k, cols, rows)?;
        let (horizontal, vertical) = resized.normalized();
        Ok(Self {
            rows,
            cols,
            horizontal,
            vertical,
        })
    }
}

/// One preprocessed frame: `[channels x 66 x 200]` with RGB in `[0, 255]` and,
/// for five-channel models, normalized orientation channels.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a, T> {
    pub pixels: &'a [T],
    pub fusion: Option<&'a FusionMaps<T>>,
}

impl<'a, T> FrameInput<'a, T> {
    pub fn new(pixels: &'a [T]) -> Self {
        Self {
            pixels,
            fusion: None,
        }
    }

    pub fn with_fusion(pixels: &'a [T], fusion: &'a FusionMaps<T>) -> Self {
        Self {
            pixels,
            fusion: Some(fusion),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); n],
        }
    }
}

/// Named parameter (or gradient) tensors in a fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn global_norm(&self) -> T {
        let sq: f64 = self
            .tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&x| {
                let x = x.as_f64();
                x * x
            })
            .sum();
        T::from_f64_lossy(sq.sqrt())
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Parameter tensor indices.
mod slot {
    pub const fn conv_w(l: usize) -> usize {
        2 * l
    }
    pub const fn conv_b(l: usize) -> usize {
        2 * l + 1
    }
    pub const FC_W: usize = 10;
    pub const FC_B: usize = 11;
    pub const fn lstm_ih(l: usize) -> usize {
        12 + 3 * l
    }
    pub const fn lstm_hh(l: usize) -> usize {
        13 + 3 * l
    }
    pub const fn lstm_b(l: usize) -> usize {
        14 + 3 * l
    }
    pub const fn readout_w(layers: usize) -> usize {
        12 + 3 * layers
    }
    pub const fn readout_b(layers: usize) -> usize {
        13 + 3 * layers
    }
}

/// Input/output shape of one convolution, recorded while encoding a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_channels: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringModel<T> {
    config: ModelConfig,
    params: Parameters<T>,
}

/// Builds a model with seeded initialization (He-uniform convolutions and FC,
/// uniform ±1/√h LSTM weights with forget-gate bias 1).
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<SteeringModel<T>> {
    cfg.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut uniform = |n: usize, bound: f64| -> Vec<T> {
        (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect()
    };
    let mut tensors = Vec::new();
    for (l, g) in cfg.conv_geometries().iter().enumerate() {
        let fan_in = g.patch_len();
        let bound = (6.0 / fan_in as f64).sqrt();
        tensors.push(Tensor {
            name: format!("conv{}.weight", l + 1),
            shape: vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            data: uniform(g.out_channels * fan_in, bound),
        });
        tensors.push(Tensor::zeros(format!("conv{}.bias", l + 1), vec![g.out_channels]));
    }
    let flat = cfg.flat_dim();
    tensors.push(Tensor {
        name: "fc.weight".into(),
        shape: vec![flat, cfg.fc_dim],
        data: uniform(cfg.fc_dim * flat, (6.0 / flat as f64).sqrt()),
    });
    tensors.push(Tensor::zeros("fc.bias", vec![cfg.fc_dim]));
    let h = cfg.lstm_hidden;
    let bound = 1.0 / (h as f64).sqrt();
    for l in 0..cfg.lstm_layers {
        let input = if l == 0 { cfg.fc_dim } else { h };
        tensors.push(Tensor {
            name: format!("lstm{l}.w_ih"),
            shape: vec![input, 4 * h],
            data: uniform(4 * h * input, bound),
        });
        tensors.push(Tensor {
            name: format!("lstm{l}.w_hh"),
            shape: vec![h, 4 * h],
            data: uniform(4 * h * h, bound),
        });
        let mut bias = Tensor::zeros(format!("lstm{l}.bias"), vec![4 * h]);
        bias.data[h..2 * h].iter_mut().for_each(|b| *b = T::one());
        tensors.push(bias);
    }
    tensors.push(Tensor {
        name: "readout.weight".into(),
        shape: vec![h, 1],
        data: uniform(h, bound),
    });
    tensors.push(Tensor::zeros("readout.bias", vec![1]));
    Ok(SteeringModel {
        config: *cfg,
        params: Parameters { tensors },
    })
}

struct EncoderTape<T> {
    cols: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
}

/// Everything the backward pass needs from one batched forward.
pub struct ForwardTape<T> {
    batch: usize,
    windows: Vec<Vec<usize>>,
    encoders: Vec<EncoderTape<T>>,
    flat: Vec<T>,
    fc_out: Vec<T>,
    lstm: Vec<LayerTape<T>>,
}

impl<T: Scalar> SteeringModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Replaces all parameters; names and shapes must match this model's layout.
    pub fn set_parameters(&mut self, params: Parameters<T>) -> Result<()> {
        if params.tensors.len() != self.params.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.tensors.len(),
                params.tensors.len()
            )));
        }
        for (mine, theirs) in self.params.tensors.iter().zip(&params.tensors) {
            if mine.name != theirs.name || mine.shape != theirs.shape || theirs.data.len() != mine.data.len()
            {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name, theirs.shape, mine.name, mine.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Sets the linear readout to zero, so every prediction is exactly 0.
    pub fn zero_readout(&mut self) {
        let layers = self.config.lstm_layers;
        for idx in [slot::readout_w(layers), slot::readout_b(layers)] {
            self.params.tensors[idx].data.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    fn data(&self, idx: usize) -> &[T] {
        &self.params.tensors[idx].data
    }

    fn check_frame(&self, frame: &FrameInput<'_, T>) -> Result<()> {
        let want = self.config.in_channels * INPUT_ROWS * INPUT_COLS;
        if frame.pixels.len() != want {
            return Err(Error::Shape(format!(
                "frame has {} values, model expects {}x{INPUT_ROWS}x{INPUT_COLS} = {want}",
                frame.pixels.len(),
                self.config.in_channels
            )));
        }
        match (self.config.fusion_size(), frame.fusion) {
            (Some(_), None) => Err(invalid(format!(
                "inject_at={} requires orientation maps",
                self.config.inject_at
            ))),
            (Some((r, c)), Some(m)) if m.rows != r || m.cols != c => Err(Error::Shape(format!(
                "fusion maps are {}x{}, layer output is {r}x{c}",
                m.rows, m.cols
            ))),
            (Some((r, c)), Some(m)) if m.horizontal.len() != r * c || m.vertical.len() != r * c => {
                Err(Error::Shape("fusion map buffers do not match their size".into()))
            }
            _ => Ok(()),
        }
    }

    /// Convolutional part of the encoder; returns the flattened conv output.
    fn encode_conv(
        &self,
        frame: &FrameInput<'_, T>,
        mut tape: Option<&mut EncoderTape<T>>,
        mut shapes: Option<&mut Vec<LayerShape>>,
    ) -> Vec<T> {
        let plane = INPUT_ROWS * INPUT_COLS;
        let scale = T::from_f64_lossy(1.0 / 127.5);
        let mut x: Vec<T> = frame.pixels.to_vec();
        for v in &mut x[..3 * plane] {
            *v = *v * scale - T::one();
        }
        let geoms = self.config.conv_geometries();
        let mut cols = Vec::new();
        for (l, g) in geoms.iter().enumerate() {
            layers::im2col(g, &x, &mut cols);
            let mut act = Vec::new();
            layers::conv_forward(g, self.data(slot::conv_w(l)), self.data(slot::conv_b(l)), &cols, &mut act);
            if self.config.inject_at == InjectAt::Conv(l + 1) {
                let maps = frame.fusion.expect("checked by check_frame");
                act.extend_from_slice(&maps.horizontal);
                act.extend_from_slice(&maps.vertical);
            }
            if let Some(s) = shapes.as_deref_mut() {
                s.push(LayerShape {
                    in_channels: g.in_channels,
                    in_rows: g.in_rows,
                    in_cols: g.in_cols,
                    out_channels: g.out_channels,
                    out_rows: g.out_rows(),
                    out_cols: g.out_cols(),
                });
            }
            match tape.as_deref_mut() {
                Some(t) => {
                    t.cols.push(std::mem::take(&mut cols));
                    t.acts.push(act.clone());
                }
                None => {}
            }
            x = act;
        }
        x
    }

    fn fc_forward(&self, rows: usize, flat: &[T]) -> Vec<T> {
        let mut out = layers::dense_forward(
            rows,
            self.config.flat_dim(),
            self.config.fc_dim,
            self.data(slot::FC_W),
            self.data(slot::FC_B),
            flat,
        );
        layers::relu_in_place(&mut out);
        out
    }

    /// Per-frame feature vector of width `fc_dim`.
    pub fn encode_frame(&self, frame: &FrameInput<'_, T>) -> Result<Vec<T>> {
        self.check_frame(frame)?;
        let flat = self.encode_conv(frame, None, None);
        Ok(self.fc_forward(1, &flat))
    }

    /// Like [`Self::encode_frame`] but also returns the shape of every convolution as executed.
    pub fn encode_frame_traced(&self, frame: &FrameInput<'_, T>) -> Result<(Vec<T>, Vec<LayerShape>)> {
        self.check_frame(frame)?;
        let mut shapes = Vec::new();
        let flat = self.encode_conv(frame, None, Some(&mut shapes));
        if flat.len() != self.config.flat_dim() {
            return Err(Error::Shape(format!(
                "encoder produced {} values, FC expects {}",
                flat.len(),
                self.config.flat_dim()
            )));
        }
        Ok((self.fc_forward(1, &flat), shapes))
    }

    fn lstm_weights(&self, l: usize) -> LstmWeights<'_, T> {
        LstmWeights {
            input: if l == 0 { self.config.fc_dim } else { self.config.lstm_hidden },
            hidden: self.config.lstm_hidden,
            w_ih: self.data(slot::lstm_ih(l)),
            w_hh: self.data(slot::lstm_hh(l)),
            bias: self.data(slot::lstm_b(l)),
        }
    }

    fn check_windows(&self, frames: usize, windows: &[Vec<usize>]) -> Result<()> {
        for w in windows {
            if w.len() != self.config.seq_len {
                return Err(Error::Shape(format!(
                    "window has {} frames, model expects seq_len={}",
                    w.len(),
                    self.config.seq_len
                )));
            }
            if let Some(&bad) = w.iter().find(|&&i| i >= frames) {
                return Err(invalid(format!("window references frame {bad} of {frames}")));
            }
        }
        Ok(())
    }

    fn head_forward(&self, encoded: &[T], windows: &[Vec<usize>]) -> (Vec<T>, Vec<LayerTape<T>>) {
        let batch = windows.len();
        let fc = self.config.fc_dim;
        let hdim = self.config.lstm_hidden;
        let steps = self.config.seq_len;
        let mut inputs = Vec::with_capacity(steps * batch * fc);
        for t in 0..steps {
            for w in windows {
                inputs.extend_from_slice(&encoded[w[t] * fc..(w[t] + 1) * fc]);
            }
        }
        let mut tapes: Vec<LayerTape<T>> = Vec::with_capacity(self.config.lstm_layers);
        for l in 0..self.config.lstm_layers {
            let tape = lstm::layer_forward(&self.lstm_weights(l), batch, steps, inputs);
            inputs = tape.outputs().to_vec();
            tapes.push(tape);
        }
        let last = tapes.last().expect("lstm_layers >= 1").last_output();
        let layers = self.config.lstm_layers;
        let preds = layers::dense_forward(
            batch,
            hdim,
            1,
            self.data(slot::readout_w(layers)),
            self.data(slot::readout_b(layers)),
            last,
        );
        (preds, tapes)
    }

    /// Predictions for `windows`, each a list of `seq_len` indices into `frames`.
    /// Each distinct frame is encoded once.
    pub fn forward_batch(&self, frames: &[FrameInput<'_, T>], windows: &[Vec<usize>]) -> Result<Vec<T>> {
        self.check_windows(frames.len(), windows)?;
        let mut used = vec![false; frames.len()];
        windows.iter().flatten().for_each(|&i| used[i] = true);
        let flat_dim = self.config.flat_dim();
        let mut flat = vec![T::zero(); frames.len() * flat_dim];
        for (i, f) in frames.iter().enumerate() {
            if used[i] {
                self.check_frame(f)?;
                flat[i * flat_dim..(i + 1) * flat_dim].copy_from_slice(&self.encode_conv(f, None, None));
            }
        }
        let encoded = self.fc_forward(frames.len(), &flat);
        Ok(self.head_forward(&encoded, windows).0)
    }

    /// Prediction for one window (its frames in temporal order); targets the last frame.
    pub fn forward_window(&self, frames: &[FrameInput<'_, T>]) -> Result<T> {
        if frames.len() != self.config.seq_len {
            return Err(Error::Shape(format!(
                "window has {} frames, model expects seq_len={}",
                frames.len(),
                self.config.seq_len
            )));
        }
        let idx: Vec<usize> = (0..frames.len()).collect();
        Ok(self.forward_batch(frames, &[idx])?[0])
    }

    /// Batched forward keeping activations for [`Self::backward`].
    pub fn forward_train(
        &self,
        frames: &[FrameInput<'_, T>],
        windows: &[Vec<usize>],
    ) -> Result<(Vec<T>, ForwardTape<T>)> {
        self.check_windows(frames.len(), windows)?;
        let mut used = vec![false; frames.len()];
        windows.iter().flatten().for_each(|&i| used[i] = true);
        // compact the used frames so the tape holds no holes
        let mut remap = vec![usize::MAX; frames.len()];
        let mut order = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = order.len();
                order.push(i);
            }
        }
        let flat_dim = self.config.flat_dim();
        let mut flat = Vec::with_capacity(order.len() * flat_dim);
        let mut encoders = Vec::with_capacity(order.len());
        for &i in &order {
            self.check_frame(&frames[i])?;
            let mut tape = EncoderTape {
                cols: Vec::with_capacity(5),
                acts: Vec::with_capacity(5),
            };
            flat.extend(self.encode_conv(&frames[i], Some(&mut tape), None));
            encoders.push(tape);
        }
        let fc_out = self.fc_forward(order.len(), &flat);
        let local: Vec<Vec<usize>> = windows
            .iter()
            .map(|w| w.iter().map(|&i| remap[i]).collect())
            .collect();
        let (preds, lstm) = self.head_forward(&fc_out, &local);
        Ok((
            preds,
            ForwardTape {
                batch: windows.len(),
                windows: local,
                encoders,
                flat,
                fc_out,
                lstm,
            },
        ))
    }

    /// Gradients of `Σ_b grad_pred[b] · pred[b]` with respect to every parameter.
    pub fn backward(&self, tape: ForwardTape<T>, grad_pred: &[T]) -> Result<Parameters<T>> {
        if grad_pred.len() != tape.batch {
            return Err(Error::Shape(format!(
                "{} prediction gradients for a batch of {}",
                grad_pred.len(),
                tape.batch
            )));
        }
        let cfg = &self.config;
        let mut grads = self.params.zeros_like();
        let layers_n = cfg.lstm_layers;
        let h = cfg.lstm_hidden;
        let batch = tape.batch;
        let steps = cfg.seq_len;

        // readout
        let last_h = tape.lstm.last().unwrap().last_output().to_vec();
        let dlast = {
            let (head, tail) = grads.tensors.split_at_mut(slot::readout_b(layers_n));
            layers::dense_backward(
                batch,
                h,
                1,
                self.data(slot::readout_w(layers_n)),
                &last_h,
                grad_pred,
                &mut head[slot::readout_w(layers_n)].data,
                &mut tail[0].data,
                true,
            )
            .unwrap()
        };

        // LSTM stack, top to bottom
        let mut grad_hidden = vec![T::zero(); steps * batch * h];
        grad_hidden[(steps - 1) * batch * h..].copy_from_slice(&dlast);
        for l in (0..layers_n).rev() {
            let w = self.lstm_weights(l);
            let (a, rest) = grads.tensors.split_at_mut(slot::lstm_hh(l));
            let (b, c) = rest.split_at_mut(1);
            let mut g = LstmGrads {
                w_ih: &mut a[slot::lstm_ih(l)].data,
                w_hh: &mut b[0].data,
                bias: &mut c[0].data,
            };
            grad_hidden = lstm::layer_backward(&w, &mut g, &tape.lstm[l], &grad_hidden);
        }

        // scatter per-step input gradients onto the encoded frames
        let fc = cfg.fc_dim;
        let frames_n = tape.encoders.len();
        let mut d_fc = vec![T::zero(); frames_n * fc];
        for t in 0..steps {
            for (b, w) in tape.windows.iter().enumerate() {
                let dst = &mut d_fc[w[t] * fc..(w[t] + 1) * fc];
                let row = (t * batch + b) * fc;
                for (d, &s) in dst.iter_mut().zip(&grad_hidden[row..row + fc]) {
                    *d += s;
                }
            }
        }
        layers::relu_backward(&tape.fc_out, &mut d_fc);
        let flat_dim = cfg.flat_dim();
        let d_flat = {
            let (a, b) = grads.tensors.split_at_mut(slot::FC_B);
            layers::dense_backward(
                frames_n,
                flat_dim,
                fc,
                self.data(slot::FC_W),
                &tape.flat,
                &d_fc,
                &mut a[slot::FC_W].data,
                &mut b[0].data,
                true,
            )
            .unwrap()
        };

        // convolutions, per frame
        let geoms = cfg.conv_geometries();
        for (f, enc) in tape.encoders.iter().enumerate() {
            let mut grad = d_flat[f * flat_dim..(f + 1) * flat_dim].to_vec();
            for l in (0..5).rev() {
                let g = &geoms[l];
                let out_len = g.out_channels * g.out_pixels();
                // gradient w.r.t. appended map channels is discarded
                grad.truncate(out_len);
                let act = &enc.acts[l][..out_len];
                let (a, b) = grads.tensors.split_at_mut(slot::conv_b(l));
                let dcols = layers::conv_backward(
                    g,
                    self.data(slot::conv_w(l)),
                    &enc.cols[l],
                    act,
                    &mut grad,
                    &mut a[slot::conv_w(l)].data,
                    &mut b[0].data,
                    l > 0,
                );
                if let Some(dcols) = dcols {
                    let mut dx = vec![T::zero(); g.in_channels * g.in_rows * g.in_cols];
                    layers::col2im(g, &dcols, &mut dx);
                    grad = dx;
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(channels: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let plane = INPUT_ROWS * INPUT_COLS;
        (0..channels * plane)
            .map(|i| {
                if i < 3 * plane {
                    rng.random_range(0.0..255.0)
                } else {
                    rng.random_range(-0.9..0.9)
                }
            })
            .collect()
    }

    #[test]
    fn inject_at_parsing() {
        assert_eq!("conv3".parse::<InjectAt>().unwrap(), InjectAt::Conv(3));
        assert_eq!("INPUT".parse::<InjectAt>().unwrap(), InjectAt::Input);
        assert!("CONV6".parse::<InjectAt>().is_err());
        assert_eq!(InjectAt::Conv(2).to_string(), "CONV2");
    }

    #[test]
    fn config_invariants() {
        let mut c = ModelConfig::with_orientation_input();
        c.inject_at = InjectAt::Conv(3);
        assert!(c.validate().is_err());
        assert!(build_model::<f32>(&c, 0).is_err());
        let mut c = ModelConfig::rgb();
        c.inject_at = InjectAt::Input;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::rgb();
        c.seq_len = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::with_fusion(InjectAt::Conv(5)).validate().is_ok());
    }

    #[test]
    fn conv_chain_sizes() {
        let g = ModelConfig::rgb().conv_geometries();
        let sizes: Vec<_> = g.iter().map(|g| (g.out_rows(), g.out_cols())).collect();
        assert_eq!(sizes, vec![(31, 98), (14, 47), (5, 22), (3, 20), (1, 18)]);
        assert_eq!(ModelConfig::rgb().flat_dim(), 1152);
        assert_eq!(ModelConfig::with_fusion(InjectAt::Conv(5)).flat_dim(), 66 * 18);
        let g3 = ModelConfig::with_fusion(InjectAt::Conv(3)).conv_geometries();
        assert_eq!(g3[3].in_channels, 50);
        assert_eq!(ModelConfig::with_fusion(InjectAt::Conv(3)).fusion_size(), Some((5, 22)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = ModelConfig::rgb();
        let a = build_model::<f32>(&c, 11).unwrap();
        let b = build_model::<f32>(&c, 11).unwrap();
        let d = build_model::<f32>(&c, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn zero_frame_and_zero_readout() {
        let mut c = ModelConfig::rgb();
        c.seq_len = 2;
        let mut m = build_model::<f64>(&c, 1).unwrap();
        let zeros = vec![0.0; 3 * INPUT_ROWS * INPUT_COLS];
        let e = m.encode_frame(&FrameInput::new(&zeros)).unwrap();
        assert_eq!(e.len(), 1024);
        assert!(e.iter().all(|x| x.is_finite()));
        m.zero_readout();
        let f = frame(3, 4);
        let p = m.forward_window(&[FrameInput::new(&f), FrameInput::new(&zeros)]).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut c = ModelConfig::rgb();
        c.seq_len = 2;
        let m = build_model::<f64>(&c, 1).unwrap();
        let short = vec![0.0; 10];
        assert!(matches!(m.encode_frame(&FrameInput::new(&short)), Err(Error::Shape(_))));
        let f = frame(3, 1);
        assert!(matches!(m.forward_window(&[FrameInput::new(&f)]), Err(Error::Shape(_))));

        let fused = build_model::<f64>(&ModelConfig::with_fusion(InjectAt::Conv(2)), 1).unwrap();
        assert!(matches!(
            fused.encode_frame(&FrameInput::new(&f)),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Gradient of a weighted prediction sum against central differences, in f64.
    #[test]
    fn backward_matches_finite_differences() {
        let mut c = ModelConfig::with_fusion(InjectAt::Conv(2));
        c.seq_len = 2;
        c.lstm_hidden = 6;
        c.fc_dim = 16;
        c.lstm_layers = 2;
        let model = build_model::<f64>(&c, 5).unwrap();
        let k = CameraIntrinsics::centered(120.0, 120.0, INPUT_COLS, INPUT_ROWS).unwrap();
        let (r, cc) = c.fusion_size().unwrap();
        let maps = FusionMaps::<f64>::for_camera(&k, r, cc).unwrap();
        let frames_raw: Vec<Vec<f64>> = (0..3).map(|s| frame(3, s)).collect();
        let frames: Vec<FrameInput<f64>> =
            frames_raw.iter().map(|f| FrameInput::with_fusion(f, &maps)).collect();
        let windows = vec![vec![0, 1], vec![1, 2]];
        let coef = [0.7, -1.3];
        let objective = |m: &SteeringModel<f64>| -> f64 {
            m.forward_batch(&frames, &windows)
                .unwrap()
                .iter()
                .zip(&coef)
                .map(|(p, c)| p * c)
                .sum()
        };
        let (_, tape) = model.forward_train(&frames, &windows).unwrap();
        let grads = model.backward(tape, &coef).unwrap();
        assert!(grads.all_finite());

        let mut rng = SplitMix64::seed_from_u64(99);
        let h = 1e-6;
        let mut checked = 0;
        for (ti, t) in model.parameters().tensors.iter().enumerate() {
            for _ in 0..4 {
                let j = rng.random_range(0..t.data.len());
                let mut plus = model.clone();
                plus.parameters_mut().tensors[ti].data[j] += h;
                let mut minus = model.clone();
                minus.parameters_mut().tensors[ti].data[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads.tensors[ti].data[j];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                    "{}[{j}]: finite difference {fd} vs analytic {an}",
                    t.name
                );
                checked += 1;
            }
        }
        assert!(checked > 40);
    }
}

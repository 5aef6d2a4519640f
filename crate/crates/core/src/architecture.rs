//! Model assembly for the proposed CNN-QoE stack and the original TCN
//! baseline, forward/backward passes, and complexity accounting.
//!
//! Proposed variant:
//!
//! ```text
//! window -> causal conv (d=1, n filters) -> SeLU
//!        -> L x [ x + SeLU(dilated conv_d(x)) ]   d = 1, 2, 4, ...
//!        -> 1x1 head (n -> 1), read at the last time index
//! ```
//!
//! Original TCN variant: `L x ReLU(skip(x) + F(x))` where `F` is two
//! weight-normalized dilated convs, each followed by ReLU and spatial
//! dropout, and `skip` is a 1x1 projection when channel counts differ.

use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{QoeError, Result, Violation};
use crate::numerics::{
    conv1d_backward, conv1d_dilated_causal, relu_backward, relu_series, selu_backward,
    selu_series, spatial_dropout, weight_norm_apply, weight_norm_backward, DropoutMask, Kernel,
    Series,
};

/// Receptive fields beyond this many seconds reach past the recency effect.
pub const RECENCY_LIMIT: usize = 20;

pub const GRID_KERNEL_SIZES: [usize; 2] = [2, 3];
pub const GRID_BLOCKS: [usize; 3] = [2, 3, 4];
pub const GRID_FILTERS: [usize; 3] = [16, 32, 64];

/// Number of per-second input features (STSQ, PI, NR, TR).
pub const FEATURE_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Initial causal conv plus one-conv SeLU residual blocks.
    Proposed,
    /// Two weight-normalized convs per block with ReLU and spatial dropout.
    OriginalTcn,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::OriginalTcn => "original_tcn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = QoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" | "cnn_qoe" => Ok(Variant::Proposed),
            "original_tcn" | "tcn" => Ok(Variant::OriginalTcn),
            other => Err(QoeError::Parameter(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Filter width `k`.
    pub kernel_size: usize,
    /// Number of residual blocks `L`.
    pub blocks: usize,
    /// Filters per conv layer `n`.
    pub filters: usize,
    pub in_channels: usize,
    pub variant: Variant,
    /// Spatial dropout probability; only the original TCN variant uses it.
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    /// Best configuration from the hyperparameter search: k=2, L=3, n=32.
    fn default() -> Self {
        Self {
            kernel_size: 2,
            blocks: 3,
            filters: 32,
            in_channels: FEATURE_COUNT,
            variant: Variant::Proposed,
            dropout_p: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

/// `[1, 2, 4, ..., 2^(blocks-1)]`.
pub fn dilation_schedule(blocks: usize) -> Result<Vec<usize>> {
    if blocks < 1 {
        return Err(QoeError::Parameter("need at least one block".into()));
    }
    if blocks > 40 {
        return Err(QoeError::Parameter(format!("{blocks} blocks overflow the dilation")));
    }
    Ok((0..blocks).map(|l| 1usize << l).collect())
}

/// Receptive field of a chain of convs of width `k` at the given dilations.
pub fn receptive_field_of(kernel_size: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| d * kernel_size.saturating_sub(1)).sum::<usize>()
}

/// Receptive field of a plain stack of `blocks` dilated convs, one per
/// dilation. Equals `2^L` for k=2 and `2^(L+1) - 1` for k=3.
pub fn pure_dilated_receptive_field(kernel_size: usize, blocks: usize) -> Result<usize> {
    Ok(receptive_field_of(kernel_size, &dilation_schedule(blocks)?))
}

/// Dilations of every time-mixing conv on the main path, in order.
fn main_path_dilations(config: &ModelConfig) -> Vec<usize> {
    let schedule: Vec<usize> = (0..config.blocks.min(40)).map(|l| 1usize << l).collect();
    match config.variant {
        Variant::Proposed => std::iter::once(1).chain(schedule).collect(),
        Variant::OriginalTcn => schedule.iter().flat_map(|&d| [d, d]).collect(),
    }
}

/// Exact receptive field of the layer stack `config` assembles.
pub fn receptive_field(config: &ModelConfig) -> usize {
    receptive_field_of(config.kernel_size, &main_path_dilations(config))
}

/// Checks `config` against the search space and the recency bound. Hard
/// violations make the config unbuildable; soft ones can be overridden.
pub fn validate_config(config: &ModelConfig) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut push = |field, message: String, hard| {
        v.push(Violation {
            field,
            message,
            hard,
        })
    };
    if config.kernel_size < 1 {
        push("k", "filter width must be >= 1".into(), true);
    } else if !GRID_KERNEL_SIZES.contains(&config.kernel_size) {
        push("k", format!("{} outside {{2, 3}}", config.kernel_size), false);
    }
    if config.blocks < 1 || config.blocks > 16 {
        push("L", format!("{} blocks outside 1..=16", config.blocks), true);
    } else if !GRID_BLOCKS.contains(&config.blocks) && config.blocks != 1 {
        push("L", format!("{} outside {{2, 3, 4}}", config.blocks), false);
    }
    if config.filters < 1 {
        push("n", "filter count must be >= 1".into(), true);
    } else if !GRID_FILTERS.contains(&config.filters) {
        push("n", format!("{} outside {{16, 32, 64}}", config.filters), false);
    }
    if config.in_channels < 1 {
        push("in_channels", "need at least one input channel".into(), true);
    }
    if !(0.0..1.0).contains(&config.dropout_p) {
        push("dropout_p", format!("{} outside [0, 1)", config.dropout_p), true);
    }
    if config.kernel_size >= 1 && (1..=16).contains(&config.blocks) {
        let r = receptive_field(config);
        if r > RECENCY_LIMIT {
            push(
                "receptive_field",
                format!("{r} exceeds the {RECENCY_LIMIT}-step recency bound"),
                false,
            );
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Like [`validate_config`], but with `override_limits` soft violations
/// are logged and accepted.
pub fn check_config(config: &ModelConfig, override_limits: bool) -> Result<()> {
    match validate_config(config) {
        Ok(()) => Ok(()),
        Err(v) if override_limits && v.iter().all(|x| !x.hard) => {
            for x in &v {
                log::warn!("config override: {x}");
            }
            Ok(())
        }
        Err(v) => Err(QoeError::Config(v)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Kernel,
    pub dilation: usize,
}

impl ConvLayer {
    fn forward(&self, x: &Series) -> Result<Series> {
        conv1d_dilated_causal(x, &self.kernel, self.dilation)
    }

    fn macs(&self) -> usize {
        self.kernel.out_channels() * self.kernel.in_channels() * self.kernel.width()
    }
}

/// Conv whose effective weights are `gain * direction / ||direction||`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormedConv {
    /// Direction weights plus the (unnormalized) bias.
    pub direction: Kernel,
    pub gain: Vec<f64>,
    pub dilation: usize,
}

impl NormedConv {
    pub fn effective_kernel(&self) -> Result<Kernel> {
        let w = weight_norm_apply(self.direction.weights(), &self.gain)?;
        Kernel::new(
            self.direction.out_channels(),
            self.direction.in_channels(),
            self.direction.width(),
            w,
            self.direction.bias().to_vec(),
        )
    }

    fn param_count(&self) -> usize {
        self.direction.param_count() + self.gain.len()
    }

    fn macs(&self) -> usize {
        self.direction.out_channels() * self.direction.in_channels() * self.direction.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualBlock {
    /// `skip(x) + SeLU(conv_d(x))`.
    Simplified {
        conv: ConvLayer,
        projection: Option<ConvLayer>,
    },
    /// `ReLU(skip(x) + drop(ReLU(wn_conv2(drop(ReLU(wn_conv1(x)))))))`.
    Tcn {
        first: NormedConv,
        second: NormedConv,
        projection: Option<ConvLayer>,
        dropout_p: f64,
    },
}

impl ResidualBlock {
    fn in_channels(&self) -> usize {
        match self {
            ResidualBlock::Simplified { conv, .. } => conv.kernel.in_channels(),
            ResidualBlock::Tcn { first, .. } => first.direction.in_channels(),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            ResidualBlock::Simplified { conv, .. } => conv.kernel.out_channels(),
            ResidualBlock::Tcn { second, .. } => second.direction.out_channels(),
        }
    }

    fn projection(&self) -> Option<&ConvLayer> {
        match self {
            ResidualBlock::Simplified { projection, .. } | ResidualBlock::Tcn { projection, .. } => {
                projection.as_ref()
            }
        }
    }

    fn check(&self) -> Result<()> {
        let (cin, cout) = (self.in_channels(), self.out_channels());
        if let ResidualBlock::Tcn { first, second, .. } = self {
            if second.direction.in_channels() != first.direction.out_channels() {
                return Err(QoeError::Shape("TCN block convs do not chain".into()));
            }
            if first.gain.len() != first.direction.out_channels()
                || second.gain.len() != second.direction.out_channels()
            {
                return Err(QoeError::Shape("weight-norm gain length".into()));
            }
        }
        match self.projection() {
            None if cin != cout => Err(QoeError::Shape(format!(
                "block maps {cin} -> {cout} channels without a projection"
            ))),
            Some(p)
                if p.kernel.in_channels() != cin
                    || p.kernel.out_channels() != cout
                    || p.kernel.width() != 1 =>
            {
                Err(QoeError::Shape("projection must be a 1x1 conv from block input to output".into()))
            }
            _ => Ok(()),
        }
    }

    /// Forward pass without caching.
    pub fn forward(&self, x: &Series) -> Result<Series> {
        if x.channels() != self.in_channels() {
            return Err(QoeError::Shape(format!(
                "block expects {} channels, got {}",
                self.in_channels(),
                x.channels()
            )));
        }
        let skip = match self.projection() {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        match self {
            ResidualBlock::Simplified { conv, .. } => {
                let pre = conv.forward(x)?;
                skip.add(&selu_series(&pre))
            }
            ResidualBlock::Tcn { first, second, .. } => {
                let h1 = conv1d_dilated_causal(x, &first.effective_kernel()?, first.dilation)?;
                let h2 = conv1d_dilated_causal(
                    &relu_series(&h1),
                    &second.effective_kernel()?,
                    second.dilation,
                )?;
                Ok(relu_series(&skip.add(&relu_series(&h2))?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    stem: Option<ConvLayer>,
    blocks: Vec<ResidualBlock>,
    head: ConvLayer,
}

/// One row of [`Model::layer_summary`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub dilation: usize,
    pub params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub param_count: usize,
    pub flops_per_step: usize,
    pub receptive_field: usize,
    pub model_size_bytes: usize,
}

/// Per-parameter-tensor gradients, in [`Model::param_slices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

enum BlockCache {
    Simplified {
        input: Series,
        pre: Series,
    },
    Tcn {
        input: Series,
        w1: Kernel,
        h1: Series,
        m1: DropoutMask,
        a1: Series,
        w2: Kernel,
        h2: Series,
        m2: DropoutMask,
        sum: Series,
    },
}

/// Intermediate activations kept by [`Model::forward_train`].
pub struct ForwardCache {
    stem: Option<(Series, Series)>,
    blocks: Vec<BlockCache>,
    head_input: Series,
}

fn init_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    width: usize,
) -> Kernel {
    let fan_in = (in_channels * width) as f64;
    let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
    let weights = (0..out_channels * in_channels * width)
        .map(|_| normal.sample(rng))
        .collect();
    Kernel::new(out_channels, in_channels, width, weights, vec![0.0; out_channels])
        .expect("shape is consistent")
}

fn init_conv<R: Rng + ?Sized>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    width: usize,
    dilation: usize,
) -> ConvLayer {
    ConvLayer {
        kernel: init_kernel(rng, out_channels, in_channels, width),
        dilation,
    }
}

fn init_normed<R: Rng + ?Sized>(
    rng: &mut R,
    out_channels: usize,
    in_channels: usize,
    width: usize,
    dilation: usize,
) -> NormedConv {
    let direction = init_kernel(rng, out_channels, in_channels, width);
    let per = in_channels * width;
    // gain = ||v|| so the effective weights start equal to v.
    let gain = direction
        .weights()
        .chunks(per)
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    NormedConv {
        direction,
        gain,
        dilation,
    }
}

/// Builds the layer stack `config` describes with weights drawn from
/// `N(0, 1/fan_in)` and zero biases.
pub fn build_model<R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
    override_limits: bool,
) -> Result<Model> {
    check_config(config, override_limits)?;
    let k = config.kernel_size;
    let n = config.filters;
    let dilations = dilation_schedule(config.blocks)?;
    let model = match config.variant {
        Variant::Proposed => {
            let stem = init_conv(rng, n, config.in_channels, k, 1);
            let blocks = dilations
                .iter()
                .map(|&d| ResidualBlock::Simplified {
                    conv: init_conv(rng, n, n, k, d),
                    projection: None,
                })
                .collect();
            Model {
                config: config.clone(),
                stem: Some(stem),
                blocks,
                head: init_conv(rng, 1, n, 1, 1),
            }
        }
        Variant::OriginalTcn => {
            let mut cin = config.in_channels;
            let mut blocks = Vec::with_capacity(dilations.len());
            for &d in &dilations {
                let first = init_normed(rng, n, cin, k, d);
                let second = init_normed(rng, n, n, k, d);
                let projection = (cin != n).then(|| init_conv(rng, n, cin, 1, 1));
                blocks.push(ResidualBlock::Tcn {
                    first,
                    second,
                    projection,
                    dropout_p: config.dropout_p,
                });
                cin = n;
            }
            Model {
                config: config.clone(),
                stem: None,
                blocks,
                head: init_conv(rng, 1, n, 1, 1),
            }
        }
    };
    Ok(model)
}

impl Model {
    /// Assembles a model from explicit layers. The chain of channel counts
    /// must be consistent; `config` is carried along as metadata.
    pub fn from_parts(
        config: ModelConfig,
        stem: Option<ConvLayer>,
        blocks: Vec<ResidualBlock>,
        head: ConvLayer,
    ) -> Result<Self> {
        let mut channels = config.in_channels;
        if let Some(s) = &stem {
            if s.kernel.in_channels() != channels {
                return Err(QoeError::Shape("stem input channels".into()));
            }
            channels = s.kernel.out_channels();
        }
        for b in &blocks {
            b.check()?;
            if b.in_channels() != channels {
                return Err(QoeError::Shape("block input channels do not chain".into()));
            }
            channels = b.out_channels();
        }
        if head.kernel.in_channels() != channels || head.kernel.out_channels() != 1 {
            return Err(QoeError::Shape(format!(
                "head must map {channels} channels to 1"
            )));
        }
        Ok(Self {
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stem(&self) -> Option<&ConvLayer> {
        self.stem.as_ref()
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &ConvLayer {
        &self.head
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    /// Main-path convs as `(name, dilation)`: stem, block convs, head.
    /// Skip projections are not listed.
    pub fn conv_layers(&self) -> Vec<(String, usize)> {
        self.layer_summary()
            .into_iter()
            .filter(|l| !l.name.ends_with(".projection"))
            .map(|l| (l.name, l.dilation))
            .collect()
    }

    pub fn layer_summary(&self) -> Vec<LayerInfo> {
        let conv_info = |name: String, k: &Kernel, dilation, params| LayerInfo {
            name,
            in_channels: k.in_channels(),
            out_channels: k.out_channels(),
            width: k.width(),
            dilation,
            params,
        };
        let mut out = Vec::new();
        if let Some(s) = &self.stem {
            out.push(conv_info("stem".into(), &s.kernel, s.dilation, s.kernel.param_count()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                ResidualBlock::Simplified { conv, .. } => out.push(conv_info(
                    format!("block{i}.conv"),
                    &conv.kernel,
                    conv.dilation,
                    conv.kernel.param_count(),
                )),
                ResidualBlock::Tcn { first, second, .. } => {
                    for (tag, c) in [("conv1", first), ("conv2", second)] {
                        out.push(conv_info(
                            format!("block{i}.{tag}"),
                            &c.direction,
                            c.dilation,
                            c.param_count(),
                        ));
                    }
                }
            }
            if let Some(p) = b.projection() {
                out.push(conv_info(
                    format!("block{i}.projection"),
                    &p.kernel,
                    p.dilation,
                    p.kernel.param_count(),
                ));
            }
        }
        out.push(conv_info(
            "head".into(),
            &self.head.kernel,
            self.head.dilation,
            self.head.kernel.param_count(),
        ));
        out
    }

    /// Receptive field of the assembled layers (skip paths do not widen it).
    pub fn receptive_field(&self) -> usize {
        1 + self
            .layer_summary()
            .iter()
            .map(|l| l.dilation * (l.width - 1))
            .sum::<usize>()
    }

    /// Parameter tensors in serialization order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        if let Some(s) = &self.stem {
            v.push(s.kernel.weights());
            v.push(s.kernel.bias());
        }
        for b in &self.blocks {
            match b {
                ResidualBlock::Simplified { conv, .. } => {
                    v.push(conv.kernel.weights());
                    v.push(conv.kernel.bias());
                }
                ResidualBlock::Tcn { first, second, .. } => {
                    for c in [first, second] {
                        v.push(c.direction.weights());
                        v.push(&c.gain);
                        v.push(c.direction.bias());
                    }
                }
            }
            if let Some(p) = b.projection() {
                v.push(p.kernel.weights());
                v.push(p.kernel.bias());
            }
        }
        v.push(self.head.kernel.weights());
        v.push(self.head.kernel.bias());
        v
    }

    /// Mutable view of the same tensors as [`Model::param_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        if let Some(s) = &mut self.stem {
            let (w, b) = s.kernel.parts_mut();
            v.push(w);
            v.push(b);
        }
        for blk in &mut self.blocks {
            match blk {
                ResidualBlock::Simplified { conv, projection } => {
                    let (w, b) = conv.kernel.parts_mut();
                    v.push(w);
                    v.push(b);
                    if let Some(p) = projection {
                        let (w, b) = p.kernel.parts_mut();
                        v.push(w);
                        v.push(b);
                    }
                }
                ResidualBlock::Tcn {
                    first,
                    second,
                    projection,
                    ..
                } => {
                    for c in [first, second] {
                        let (w, b) = c.direction.parts_mut();
                        v.push(w);
                        v.push(&mut c.gain);
                        v.push(b);
                    }
                    if let Some(p) = projection {
                        let (w, b) = p.kernel.parts_mut();
                        v.push(w);
                        v.push(b);
                    }
                }
            }
        }
        let (w, b) = self.head.kernel.parts_mut();
        v.push(w);
        v.push(b);
        v
    }

    /// Names for [`Model::param_slices`], used in diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.stem.is_some() {
            v.extend(["stem.weight".to_string(), "stem.bias".to_string()]);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                ResidualBlock::Simplified { .. } => {
                    v.push(format!("block{i}.conv.weight"));
                    v.push(format!("block{i}.conv.bias"));
                }
                ResidualBlock::Tcn { .. } => {
                    for c in ["conv1", "conv2"] {
                        v.push(format!("block{i}.{c}.direction"));
                        v.push(format!("block{i}.{c}.gain"));
                        v.push(format!("block{i}.{c}.bias"));
                    }
                }
            }
            if b.projection().is_some() {
                v.push(format!("block{i}.projection.weight"));
                v.push(format!("block{i}.projection.bias"));
            }
        }
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    fn check_window(&self, window: &Series) -> Result<()> {
        if window.channels() != self.config.in_channels {
            return Err(QoeError::Shape(format!(
                "model expects {} input channels, window has {}",
                self.config.in_channels,
                window.channels()
            )));
        }
        Ok(())
    }

    /// Head output at every time index of `window` (inference mode).
    pub fn forward_sequence(&self, window: &Series) -> Result<Series> {
        self.check_window(window)?;
        let mut h = match &self.stem {
            Some(s) => selu_series(&s.forward(window)?),
            None => window.clone(),
        };
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.head.forward(&h)
    }

    /// Predicted QoE for the most recent time step of `window`.
    pub fn forward(&self, window: &Series) -> Result<f64> {
        let y = self.forward_sequence(window)?;
        Ok(y.get(0, y.len() - 1))
    }

    /// Training-mode forward pass. Spatial dropout is active in TCN blocks
    /// when `dropout_rng` is given.
    pub fn forward_train(
        &self,
        window: &Series,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(f64, ForwardCache)> {
        self.check_window(window)?;
        let (mut h, stem) = match &self.stem {
            Some(s) => {
                let pre = s.forward(window)?;
                (selu_series(&pre), Some((window.clone(), pre)))
            }
            None => (window.clone(), None),
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let skip = match b.projection() {
                Some(p) => p.forward(&h)?,
                None => h.clone(),
            };
            match b {
                ResidualBlock::Simplified { conv, .. } => {
                    let pre = conv.forward(&h)?;
                    let out = skip.add(&selu_series(&pre))?;
                    caches.push(BlockCache::Simplified { input: h, pre });
                    h = out;
                }
                ResidualBlock::Tcn {
                    first,
                    second,
                    dropout_p,
                    ..
                } => {
                    let mut drop = |x: &Series| -> Result<(Series, DropoutMask)> {
                        match dropout_rng.as_deref_mut() {
                            Some(rng) => spatial_dropout(x, *dropout_p, true, rng),
                            None => Ok((x.clone(), DropoutMask::identity(x.channels()))),
                        }
                    };
                    let w1 = first.effective_kernel()?;
                    let h1 = conv1d_dilated_causal(&h, &w1, first.dilation)?;
                    let (a1, m1) = drop(&relu_series(&h1))?;
                    let w2 = second.effective_kernel()?;
                    let h2 = conv1d_dilated_causal(&a1, &w2, second.dilation)?;
                    let (a2, m2) = drop(&relu_series(&h2))?;
                    let sum = skip.add(&a2)?;
                    let out = relu_series(&sum);
                    caches.push(BlockCache::Tcn {
                        input: h,
                        w1,
                        h1,
                        m1,
                        a1,
                        w2,
                        h2,
                        m2,
                        sum,
                    });
                    h = out;
                }
            }
        }
        let y = self.head.forward(&h)?;
        let yhat = y.get(0, y.len() - 1);
        Ok((
            yhat,
            ForwardCache {
                stem,
                blocks: caches,
                head_input: h,
            },
        ))
    }

    /// Gradients of `dyhat * yhat` for the prediction cached in `cache`.
    pub fn backward(&self, cache: &ForwardCache, dyhat: f64) -> Result<Gradients> {
        let len = cache.head_input.len();
        let mut dy = Series::zeros(1, len);
        dy.set(0, len - 1, dyhat);
        let head_g = conv1d_backward(&cache.head_input, &self.head.kernel, 1, &dy)?;
        let mut dh = head_g.dx;

        let mut block_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut tensors = Vec::new();
            let (dx, proj_grads) = match (b, c) {
                (ResidualBlock::Simplified { conv, projection }, BlockCache::Simplified { input, pre }) => {
                    let dpre = selu_backward(pre, &dh)?;
                    let g = conv1d_backward(input, &conv.kernel, conv.dilation, &dpre)?;
                    tensors.push(g.dkernel.weights().to_vec());
                    tensors.push(g.dkernel.bias().to_vec());
                    let mut dx = g.dx;
                    let pg = skip_backward(projection.as_ref(), input, &dh, &mut dx)?;
                    (dx, pg)
                }
                (
                    ResidualBlock::Tcn {
                        first,
                        second,
                        projection,
                        ..
                    },
                    BlockCache::Tcn {
                        input,
                        w1,
                        h1,
                        m1,
                        a1,
                        w2,
                        h2,
                        m2,
                        sum,
                    },
                ) => {
                    let dsum = relu_backward(sum, &dh)?;
                    let dh2 = relu_backward(h2, &m2.apply(&dsum))?;
                    let g2 = conv1d_backward(a1, w2, second.dilation, &dh2)?;
                    let dh1 = relu_backward(h1, &m1.apply(&g2.dx))?;
                    let g1 = conv1d_backward(input, w1, first.dilation, &dh1)?;
                    for (layer, g) in [(first, &g1), (second, &g2)] {
                        let (dv, dg) = weight_norm_backward(
                            layer.direction.weights(),
                            &layer.gain,
                            g.dkernel.weights(),
                        )?;
                        tensors.push(dv);
                        tensors.push(dg);
                        tensors.push(g.dkernel.bias().to_vec());
                    }
                    let mut dx = g1.dx;
                    let pg = skip_backward(projection.as_ref(), input, &dsum, &mut dx)?;
                    (dx, pg)
                }
                _ => return Err(QoeError::Shape("cache does not match model".into())),
            };
            tensors.extend(proj_grads);
            block_grads.push(tensors);
            dh = dx;
        }
        block_grads.reverse();

        let mut out = Vec::new();
        if let (Some(s), Some((input, pre))) = (&self.stem, &cache.stem) {
            let dpre = selu_backward(pre, &dh)?;
            let g = conv1d_backward(input, &s.kernel, s.dilation, &dpre)?;
            out.push(g.dkernel.weights().to_vec());
            out.push(g.dkernel.bias().to_vec());
        }
        out.extend(block_grads.into_iter().flatten());
        out.push(head_g.dkernel.weights().to_vec());
        out.push(head_g.dkernel.bias().to_vec());
        Ok(Gradients { tensors: out })
    }
}

/// Adds the skip-path gradient of `dout` into `dx` and returns the
/// projection's parameter gradients, if any.
fn skip_backward(
    projection: Option<&ConvLayer>,
    input: &Series,
    dout: &Series,
    dx: &mut Series,
) -> Result<Vec<Vec<f64>>> {
    match projection {
        Some(p) => {
            let g = conv1d_backward(input, &p.kernel, p.dilation, dout)?;
            dx.add_assign(&g.dx);
            Ok(vec![g.dkernel.weights().to_vec(), g.dkernel.bias().to_vec()])
        }
        None => {
            dx.add_assign(dout);
            Ok(Vec::new())
        }
    }
}

/// Learnable scalars: conv weights and biases, weight-norm gains and skip
/// projections.
pub fn count_params(model: &Model) -> usize {
    model.layer_summary().iter().map(|l| l.params).sum()
}

/// Floating-point operations to produce one new streaming output: two per
/// multiply-accumulate over every conv (projections included), bias and
/// activations excluded.
pub fn count_flops(model: &Model) -> usize {
    let mut macs = model.stem.as_ref().map_or(0, ConvLayer::macs);
    for b in &model.blocks {
        macs += match b {
            ResidualBlock::Simplified { conv, .. } => conv.macs(),
            ResidualBlock::Tcn { first, second, .. } => first.macs() + second.macs(),
        };
        macs += b.projection().map_or(0, ConvLayer::macs);
    }
    macs += model.head.macs();
    2 * macs
}

pub fn complexity(model: &Model) -> ComplexityReport {
    let params = count_params(model);
    ComplexityReport {
        param_count: params,
        flops_per_step: count_flops(model),
        receptive_field: model.receptive_field(),
        model_size_bytes: crate::model_file::file_size_for(params),
    }
}

//! The convolutional selector network: eight 3x3 convolution blocks
//! (convolution, group normalization, ReLU) with channel widths
//! (32,32,64,64,128,128,256,256), strides (1,2,1,2,1,2,1,1) and dilations
//! (1,1,2,2,3,3,1,1), followed by global average pooling, 25% dropout, and a
//! two-way linear head with softmax. Training uses Adam on mean cross-entropy
//! over mini-batches of eight.
//!
//! The implementation is from scratch (see [`ops`]) and generic over f32/f64;
//! training runs in single precision, the finite-difference gradient checks
//! run the same code in double precision. Unstated details are fixed as:
//! same-padding with pad = dilation, GroupNorm eps 1e-5, He fan-in
//! initialization, Adam (1e-3, 0.9, 0.999, 1e-8).

pub mod ops;

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::render::ImageTensor;
use crate::scoring::{ParScores, SelectorReport, Solver};
use crate::selection::{
    assemble_report, tune_threshold, FoldAssignment, FoldOutcome, ThresholdPolicy, TunedOn,
};
use crate::Result;
use ops::{c, ConvSpec, GroupNormCache, Scalar, Tensor2, Tensor4};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Network architecture: convolution blocks plus pooling/dropout/linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvSpec>,
    pub groups: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl NetworkConfig {
    /// The standard image-selector architecture for a given input channel
    /// count (1 for single representations, 2-3 for stacked ones).
    pub fn standard(in_channels: usize) -> Self {
        let widths = [32, 32, 64, 64, 128, 128, 256, 256];
        let strides = [1, 2, 1, 2, 1, 2, 1, 1];
        let dilations = [1, 1, 2, 2, 3, 3, 1, 1];
        let mut blocks = Vec::with_capacity(8);
        let mut prev = in_channels;
        for i in 0..8 {
            blocks.push(ConvSpec::new(prev, widths[i], strides[i], dilations[i]));
            prev = widths[i];
        }
        NetworkConfig {
            in_channels,
            blocks,
            groups: 8,
            dropout_rate: 0.25,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("network needs at least one block"));
        }
        let mut prev = self.in_channels;
        for (i, spec) in self.blocks.iter().enumerate() {
            if spec.in_channels != prev {
                return Err(Error::invalid(format!(
                    "block {i} expects {} input channels, previous stage emits {prev}",
                    spec.in_channels
                )));
            }
            if spec.out_channels % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "group count {} does not divide block {i} output channels {}",
                    self.groups, spec.out_channels
                )));
            }
            if spec.stride == 0 || spec.dilation == 0 {
                return Err(Error::invalid("stride and dilation must be positive"));
            }
            prev = spec.out_channels;
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("network needs at least two classes"));
        }
        Ok(())
    }

    /// Feature dimension entering the linear head.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map(|b| b.out_channels).unwrap_or(0)
    }

    /// Spatial size after each block for a given input size.
    pub fn spatial_schedule(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.blocks.len());
        let (mut h, mut w) = (h, w);
        for spec in &self.blocks {
            let (oh, ow) = spec.out_hw(h, w);
            sizes.push((oh, ow));
            h = oh;
            w = ow;
        }
        sizes
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .blocks
            .iter()
            .map(|b| b.param_count() + 2 * b.out_channels)
            .sum();
        conv + self.n_classes * self.feature_dim() + self.n_classes
    }
}

/// One block's parameters: convolution weight/bias plus the normalization
/// affine.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub gn_scale: Vec<F>,
    pub gn_shift: Vec<F>,
}

/// All trainable parameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<F> {
    pub config: NetworkConfig,
    pub seed: u64,
    pub blocks: Vec<BlockParams<F>>,
    pub linear_w: Vec<F>,
    pub linear_b: Vec<F>,
}

impl<F: Scalar> NetworkParams<F> {
    /// He fan-in initialization for convolution and linear weights, unit
    /// scale / zero shift for the normalization affines, zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for spec in &config.blocks {
            let fan_in = spec.in_channels * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..spec.out_channels * fan_in)
                .map(|_| c(normal.sample(&mut rng)))
                .collect();
            blocks.push(BlockParams {
                weight,
                bias: vec![F::zero(); spec.out_channels],
                gn_scale: vec![F::one(); spec.out_channels],
                gn_shift: vec![F::zero(); spec.out_channels],
            });
        }
        let feat = config.feature_dim();
        let std = (2.0 / feat as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let linear_w = (0..config.n_classes * feat)
            .map(|_| c(normal.sample(&mut rng)))
            .collect();
        let linear_b = vec![F::zero(); config.n_classes];
        Ok(NetworkParams {
            config,
            seed,
            blocks,
            linear_w,
            linear_b,
        })
    }

    /// Parameter tensors in a fixed order (per block: conv weight, conv bias,
    /// normalization scale, normalization shift; then the linear head).
    /// Gradients and optimizer state use the same ordering.
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            out.push(&b.gn_scale);
            out.push(&b.gn_shift);
        }
        out.push(&self.linear_w);
        out.push(&self.linear_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.gn_scale);
            out.push(&mut b.gn_shift);
        }
        out.push(&mut self.linear_w);
        out.push(&mut self.linear_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Forward state kept for the backward pass.
pub struct BackwardCache<F> {
    /// `activations[0]` is the input batch; `activations[i+1]` is block i's
    /// ReLU output.
    activations: Vec<Tensor4<F>>,
    gn_caches: Vec<GroupNormCache<F>>,
    dropout_mask: Option<Vec<bool>>,
    /// Input of the linear head (pooled, after dropout when training).
    linear_in: Tensor2<F>,
}

/// Output of a forward pass.
pub struct ForwardOutput<F> {
    pub logits: Tensor2<F>,
    pub probs: Tensor2<F>,
    pub cache: Option<BackwardCache<F>>,
}

/// Runs the network. In training mode dropout is active (seeded) and the
/// cache for the backward pass is retained; at inference dropout is the
/// identity and no cache is kept.
pub fn forward<F: Scalar>(
    params: &NetworkParams<F>,
    batch: &Tensor4<F>,
    training: bool,
    dropout_seed: u64,
) -> Result<ForwardOutput<F>> {
    let config = &params.config;
    if batch.c != config.in_channels {
        return Err(Error::mismatch(format!(
            "network expects {} input channels, batch has {}",
            config.in_channels, batch.c
        )));
    }

    let mut activations: Vec<Tensor4<F>> = Vec::with_capacity(config.blocks.len() + 1);
    let mut gn_caches = Vec::with_capacity(config.blocks.len());
    activations.push(batch.clone());
    for (spec, block) in config.blocks.iter().zip(&params.blocks) {
        let conv = ops::conv2d_forward(activations.last().unwrap(), spec, &block.weight, &block.bias)?;
        let (mut normed, gn_cache) =
            ops::group_norm_forward(&conv, config.groups, &block.gn_scale, &block.gn_shift, GROUP_NORM_EPS)?;
        ops::relu_forward(&mut normed);
        gn_caches.push(gn_cache);
        activations.push(normed);
    }

    let pooled = ops::global_avg_pool_forward(activations.last().unwrap());
    let (linear_in, dropout_mask) = if training && config.dropout_rate > 0.0 {
        let mask = ops::dropout_mask(pooled.data.len(), config.dropout_rate, dropout_seed);
        (ops::dropout_forward(&pooled, config.dropout_rate, &mask), Some(mask))
    } else {
        (pooled, None)
    };
    let logits = ops::linear_forward(&linear_in, &params.linear_w, &params.linear_b, config.n_classes)?;
    let probs = ops::softmax(&logits);

    let cache = training.then(|| BackwardCache {
        activations,
        gn_caches,
        dropout_mask,
        linear_in,
    });
    Ok(ForwardOutput { logits, probs, cache })
}

/// Exact gradients of the mean cross-entropy over the batch with respect to
/// every parameter, in [`NetworkParams::tensors`] order. Returns the loss and
/// the batch probabilities as well.
pub fn backward<F: Scalar>(
    params: &NetworkParams<F>,
    batch: &Tensor4<F>,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<(F, Vec<Vec<F>>, Tensor2<F>)> {
    if labels.len() != batch.b {
        return Err(Error::mismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.b
        )));
    }
    let config = &params.config;
    let out = forward(params, batch, true, dropout_seed)?;
    let cache = out.cache.expect("training forward keeps the cache");
    let loss = ops::cross_entropy_loss(&out.probs, labels);

    let dlogits = ops::softmax_cross_entropy_backward(&out.probs, labels);
    let (dlinear_in, grad_lw, grad_lb) =
        ops::linear_backward(&cache.linear_in, &params.linear_w, config.n_classes, &dlogits);
    let dpooled = match &cache.dropout_mask {
        Some(mask) => ops::dropout_backward(&dlinear_in, config.dropout_rate, mask),
        None => dlinear_in,
    };
    let last = cache.activations.last().unwrap();
    let mut dact = ops::global_avg_pool_backward(&dpooled, last.h, last.w);

    let n_blocks = config.blocks.len();
    let mut block_grads: Vec<(Vec<F>, Vec<F>, Vec<F>, Vec<F>)> = Vec::with_capacity(n_blocks);
    for i in (0..n_blocks).rev() {
        let spec = &config.blocks[i];
        let block = &params.blocks[i];
        let relu_out = &cache.activations[i + 1];
        // ReLU gate: the retained activation is max(0, pre), whose positive
        // set equals the pre-activation's.
        let gated = Tensor4 {
            b: dact.b,
            c: dact.c,
            h: dact.h,
            w: dact.w,
            data: ops::relu_backward(&relu_out.data, &dact.data),
        };
        let (dgn, grad_scale, grad_shift) =
            ops::group_norm_backward(&cache.gn_caches[i], config.groups, &block.gn_scale, &gated)?;
        let (dx, grad_w, grad_b) =
            ops::conv2d_backward(&cache.activations[i], spec, &block.weight, &dgn)?;
        block_grads.push((grad_w, grad_b, grad_scale, grad_shift));
        dact = dx;
    }
    block_grads.reverse();

    let mut grads = Vec::with_capacity(n_blocks * 4 + 2);
    for (gw, gb, gs, gsh) in block_grads {
        grads.push(gw);
        grads.push(gb);
        grads.push(gs);
        grads.push(gsh);
    }
    grads.push(grad_lw);
    grads.push(grad_lb);
    Ok((loss, grads, out.probs))
}

/// Adam optimizer state over the parameter tensors.
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &NetworkParams<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut NetworkParams<F>, grads: &[Vec<F>]) {
        self.t += 1;
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let one = F::one();
        let corr1 = c::<F>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = c::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr = c::<F>(self.lr);
        let eps = c::<F>(self.eps);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..tensor.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                tensor[i] = tensor[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Early stopping on validation loss: stop after this many epochs without
    /// improvement and restore the best parameters. Ignored without a
    /// validation set.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            patience: Some(10),
            seed: 0,
        }
    }
}

/// Per-epoch running metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

pub fn class_index(solver: Solver) -> usize {
    match solver {
        Solver::Eax => 0,
        Solver::Lkh => 1,
    }
}

fn batch_from_images<F: Scalar>(images: &[(&ImageTensor, Solver)], indices: &[usize]) -> (Tensor4<F>, Vec<usize>) {
    let (first, _) = images[indices[0]];
    let (ch, h, w) = (first.channels(), first.height, first.width);
    let mut batch = Tensor4::zeros(indices.len(), ch, h, w);
    let size = ch * h * w;
    let mut labels = Vec::with_capacity(indices.len());
    for (bi, &idx) in indices.iter().enumerate() {
        let (img, label) = images[idx];
        for (dst, &src) in batch.data[bi * size..(bi + 1) * size]
            .iter_mut()
            .zip(&img.data)
        {
            *dst = c(src as f64);
        }
        labels.push(class_index(label));
    }
    (batch, labels)
}

fn check_images<F: Scalar>(
    params: &NetworkParams<F>,
    images: &[(&ImageTensor, Solver)],
) -> Result<(usize, usize)> {
    let Some((first, _)) = images.first() else {
        return Err(Error::invalid("empty image set"));
    };
    if first.channels() != params.config.in_channels {
        return Err(Error::mismatch(format!(
            "network expects {} channels, images have {}",
            params.config.in_channels,
            first.channels()
        )));
    }
    for (img, _) in images {
        if img.channels() != first.channels() || img.height != first.height || img.width != first.width
        {
            return Err(Error::mismatch("images have inconsistent shapes"));
        }
    }
    Ok((first.height, first.width))
}

/// Mean loss and accuracy of the current parameters on a labeled set
/// (inference mode).
pub fn evaluate_metrics<F: Scalar>(
    params: &NetworkParams<F>,
    images: &[(&ImageTensor, Solver)],
) -> Result<(f64, f64)> {
    check_images(params, images)?;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(8) {
        let (batch, labels) = batch_from_images::<F>(images, chunk);
        let out = forward(params, &batch, false, 0)?;
        for (bi, &label) in labels.iter().enumerate() {
            let row = out.probs.row(bi);
            loss_sum += -row[label].to_f64().unwrap().max(1e-300).ln();
            let pred = if row[0] >= row[1] { 0 } else { 1 };
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((
        loss_sum / images.len() as f64,
        correct as f64 / images.len() as f64,
    ))
}

/// Trains the network in place with Adam over shuffled mini-batches, with
/// optional early stopping on validation loss. Deterministic for a fixed
/// seed.
pub fn train<F: Scalar>(
    params: &mut NetworkParams<F>,
    train_set: &[(&ImageTensor, Solver)],
    val_set: Option<&[(&ImageTensor, Solver)]>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    check_images(params, train_set)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !train_set.iter().any(|(_, l)| *l == Solver::Eax)
        || !train_set.iter().any(|(_, l)| *l == Solver::Lkh)
    {
        return Err(Error::invalid("training set needs both classes"));
    }

    let mut adam = AdamState::new(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, NetworkParams<F>)> = None;
    let mut epochs_since_best = 0usize;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = batch_from_images::<F>(train_set, chunk);
            let dropout_seed = mix(cfg.seed ^ 0x00d0_77a7, step);
            let (loss, grads, probs) = backward(params, &batch, &labels, dropout_seed)?;
            adam.step(params, &grads);
            step += 1;
            loss_sum += loss.to_f64().unwrap() * labels.len() as f64;
            for (bi, &label) in labels.iter().enumerate() {
                let row = probs.row(bi);
                let pred = if row[0] >= row[1] { 0 } else { 1 };
                if pred == label {
                    correct += 1;
                }
            }
        }

        let (val_loss, val_acc) = match val_set {
            Some(val) => {
                let (l, a) = evaluate_metrics(params, val)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
        });

        if let (Some(patience), Some(vl)) = (cfg.patience, val_loss) {
            let improved = best.as_ref().is_none_or(|(b, _)| vl < *b);
            if improved {
                best = Some((vl, params.clone()));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best > patience {
                    break;
                }
            }
        }
    }

    if let Some((_, best_params)) = best {
        *params = best_params;
    }
    Ok(metrics)
}

fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0xA24B_AED4_963E_E407);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Probability that the instance favors EAX, from a single image (inference
/// mode).
pub fn predict_p_eax<F: Scalar>(params: &NetworkParams<F>, img: &ImageTensor) -> Result<f64> {
    let set = [(img, Solver::Eax)];
    check_images(params, &set)?;
    let (batch, _) = batch_from_images::<F>(&set, &[0]);
    let out = forward(params, &batch, false, 0)?;
    Ok(out.probs.row(0)[0].to_f64().unwrap())
}

/// Training-log CSV: `epoch,train_loss,train_acc,val_loss,val_acc`; the
/// validation fields stay empty without a validation set.
pub fn write_training_log<W: Write>(metrics: &[EpochMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            format!("{}", m.train_loss),
            format!("{}", m.train_acc),
            m.val_loss.map(|v| format!("{v}")).unwrap_or_default(),
            m.val_acc.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "TSPCNN 1";

/// Checkpoint format: a text header (architecture, seed, parameter count)
/// followed by every parameter tensor as little-endian 32-bit floats in
/// [`NetworkParams::tensors`] order.
pub fn write_checkpoint<W: Write>(params: &NetworkParams<f32>, mut writer: W) -> Result<()> {
    let config = &params.config;
    writeln!(writer, "{CHECKPOINT_MAGIC}")?;
    writeln!(writer, "seed {}", params.seed)?;
    writeln!(writer, "in_channels {}", config.in_channels)?;
    writeln!(writer, "classes {}", config.n_classes)?;
    writeln!(writer, "groups {}", config.groups)?;
    writeln!(writer, "dropout {}", config.dropout_rate)?;
    writeln!(writer, "blocks {}", config.blocks.len())?;
    for spec in &config.blocks {
        writeln!(writer, "block {} {} {}", spec.out_channels, spec.stride, spec.dilation)?;
    }
    writeln!(writer, "params {}", params.param_count())?;
    writeln!(writer, "DATA")?;
    for tensor in params.tensors() {
        for &v in tensor {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(reader: R, path: &str) -> Result<NetworkParams<f32>> {
    let mut reader = std::io::BufReader::new(reader);
    let bad = |reason: String| Error::BadFileFormat {
        path: path.to_string(),
        reason,
    };
    let mut line = String::new();
    let next_line = |reader: &mut std::io::BufReader<R>, line: &mut String| -> Result<String> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(Error::BadFileFormat {
                path: path.to_string(),
                reason: "truncated header".into(),
            });
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(&mut reader, &mut line)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let field = |reader: &mut std::io::BufReader<R>, line: &mut String, key: &str| -> Result<String> {
        let text = next_line(reader, line)?;
        text.strip_prefix(&format!("{key} "))
            .map(str::to_string)
            .ok_or_else(|| Error::BadFileFormat {
                path: path.to_string(),
                reason: format!("expected `{key}`, got `{text}`"),
            })
    };
    let seed: u64 = field(&mut reader, &mut line, "seed")?
        .parse()
        .map_err(|_| bad("bad seed".into()))?;
    let in_channels: usize = field(&mut reader, &mut line, "in_channels")?
        .parse()
        .map_err(|_| bad("bad in_channels".into()))?;
    let n_classes: usize = field(&mut reader, &mut line, "classes")?
        .parse()
        .map_err(|_| bad("bad classes".into()))?;
    let groups: usize = field(&mut reader, &mut line, "groups")?
        .parse()
        .map_err(|_| bad("bad groups".into()))?;
    let dropout_rate: f64 = field(&mut reader, &mut line, "dropout")?
        .parse()
        .map_err(|_| bad("bad dropout".into()))?;
    let n_blocks: usize = field(&mut reader, &mut line, "blocks")?
        .parse()
        .map_err(|_| bad("bad block count".into()))?;
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut prev = in_channels;
    for _ in 0..n_blocks {
        let text = field(&mut reader, &mut line, "block")?;
        let parts: Vec<usize> = text
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("bad block line `{text}`")))?;
        let [out, stride, dilation] = parts[..] else {
            return Err(bad(format!("bad block line `{text}`")));
        };
        blocks.push(ConvSpec::new(prev, out, stride, dilation));
        prev = out;
    }
    let declared: usize = field(&mut reader, &mut line, "params")?
        .parse()
        .map_err(|_| bad("bad param count".into()))?;
    if next_line(&mut reader, &mut line)? != "DATA" {
        return Err(bad("missing DATA marker".into()));
    }

    let config = NetworkConfig {
        in_channels,
        blocks,
        groups,
        dropout_rate,
        n_classes,
    };
    let mut params = NetworkParams::<f32>::init(config, seed)?;
    if params.param_count() != declared {
        return Err(bad(format!(
            "declared {declared} parameters, architecture has {}",
            params.param_count()
        )));
    }
    let mut buf = vec![0u8; declared * 4];
    reader.read_exact(&mut buf)?;
    let mut offset = 0;
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = f32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    Ok(params)
}

/// CNN experiment configuration for cross-validated evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub grid_step: f64,
    /// Fraction of the training folds (the last ids in sorted order) held
    /// out per fold for threshold tuning and validation.
    pub tuning_fraction: f64,
}

/// Per-fold training artifacts.
pub struct FoldArtifacts {
    pub fold_id: usize,
    pub params: NetworkParams<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub threshold: ThresholdPolicy,
}

/// Splits the training ids into a fit set and a threshold-tuning holdout:
/// the last `fraction` share of each class's sorted ids. Stratifying keeps
/// both solvers represented in the tuning set, which the PAR10 grid search
/// needs to pick a meaningful cutoff.
fn split_tuning(
    train_ids: &[String],
    scores: &ParScores,
    fraction: f64,
) -> (Vec<String>, Vec<String>) {
    let mut by_class: BTreeMap<Solver, Vec<&String>> = BTreeMap::new();
    for id in train_ids {
        let class = scores
            .index_of(id)
            .map(|i| scores.best(i))
            .unwrap_or(Solver::Eax);
        by_class.entry(class).or_default().push(id);
    }
    let mut fit = Vec::new();
    let mut tune = Vec::new();
    for members in by_class.values() {
        let holdout = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * fraction).floor() as usize)
                .max(1)
                .min(members.len() - 1)
        };
        let cut = members.len() - holdout;
        fit.extend(members[..cut].iter().map(|id| (*id).clone()));
        tune.extend(members[cut..].iter().map(|id| (*id).clone()));
    }
    fit.sort();
    tune.sort();
    (fit, tune)
}

/// Trains one network per fold and evaluates the cross-validated selector.
/// Image generation cost is not charged to the selector (include_cost is
/// false throughout). `jobs` bounds the number of folds trained in parallel;
/// per-fold training is single-threaded and seeded, so the report is
/// identical for any job count.
pub fn run_cv_cnn(
    images: &BTreeMap<String, ImageTensor>,
    scores: &ParScores,
    folds: &FoldAssignment,
    cfg: &CnnExperimentConfig,
    jobs: usize,
) -> Result<(SelectorReport, Vec<FoldArtifacts>)> {
    if folds.ids() != scores.ids {
        return Err(Error::mismatch(
            "fold assignment covers different instances than the performance records",
        ));
    }
    for id in &scores.ids {
        if !images.contains_key(id) {
            return Err(Error::mismatch(format!("missing image for instance `{id}`")));
        }
    }

    let fold_ids: Vec<usize> = (0..folds.n_folds).collect();
    let run_fold = |&fold_id: &usize| -> Result<(FoldArtifacts, FoldOutcome)> {
        let train_ids = folds.train_ids(fold_id);
        let test_ids = folds.test_ids(fold_id);
        let (fit_ids, tune_ids) = split_tuning(&train_ids, scores, cfg.tuning_fraction);

        let labeled = |ids: &[String]| -> Vec<(&ImageTensor, Solver)> {
            ids.iter()
                .map(|id| {
                    let i = scores.index_of(id).expect("checked above");
                    (&images[id], scores.best(i))
                })
                .collect()
        };
        let fit_set = labeled(&fit_ids);
        let tune_set = labeled(&tune_ids);

        let mut params = NetworkParams::<f32>::init(
            cfg.network.clone(),
            mix(cfg.train.seed, fold_id as u64),
        )?;
        let mut train_cfg = cfg.train;
        train_cfg.seed = mix(cfg.train.seed ^ 0x7261_696e, fold_id as u64);
        let metrics = train(&mut params, &fit_set, Some(&tune_set), &train_cfg)?;

        let mut tune_probs = BTreeMap::new();
        for (id, (img, _)) in tune_ids.iter().zip(&tune_set) {
            tune_probs.insert(id.clone(), predict_p_eax(&params, img)?);
        }
        let empty_costs = BTreeMap::new();
        let threshold = tune_threshold(
            &tune_probs,
            scores,
            &empty_costs,
            false,
            cfg.grid_step,
            TunedOn::Holdout,
        )?;

        let mut choices = BTreeMap::new();
        for id in &test_ids {
            let p = predict_p_eax(&params, &images[id])?;
            choices.insert(id.clone(), threshold.choose(p));
        }
        Ok((
            FoldArtifacts {
                fold_id,
                params,
                metrics,
                threshold,
            },
            FoldOutcome {
                fold_id,
                threshold,
                choices,
            },
        ))
    };

    let results: Vec<Result<(FoldArtifacts, FoldOutcome)>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            fold_ids.par_iter().map(run_fold).collect()
        })
    } else {
        fold_ids.iter().map(run_fold).collect()
    };

    let mut artifacts = Vec::with_capacity(folds.n_folds);
    let mut outcomes = Vec::with_capacity(folds.n_folds);
    for result in results {
        let (art, outcome) = result?;
        artifacts.push(art);
        outcomes.push(outcome);
    }
    artifacts.sort_by_key(|a| a.fold_id);
    outcomes.sort_by_key(|o| o.fold_id);

    let empty_costs = BTreeMap::new();
    let report = assemble_report("cnn", scores, &empty_costs, false, &outcomes)?;
    Ok((report, artifacts))
}

/// Evaluates already-trained per-fold parameters (threshold retuned on each
/// fold's holdout slice, then applied to the test fold).
pub fn evaluate_cnn_selector(
    params_per_fold: &[NetworkParams<f32>],
    images: &BTreeMap<String, ImageTensor>,
    scores: &ParScores,
    folds: &FoldAssignment,
    grid_step: f64,
    tuning_fraction: f64,
) -> Result<SelectorReport> {
    if params_per_fold.len() != folds.n_folds {
        return Err(Error::mismatch(format!(
            "{} parameter sets for {} folds",
            params_per_fold.len(),
            folds.n_folds
        )));
    }
    evaluate_folds_with(
        |fold_id, id| predict_p_eax(&params_per_fold[fold_id], &images[id]),
        scores,
        folds,
        grid_step,
        tuning_fraction,
        "cnn",
    )
}

/// Evaluates the fold scheme with externally supplied per-instance
/// probabilities (a test hook: oracle probabilities must reproduce the
/// virtual best solver).
pub fn evaluate_with_probs(
    probs: &BTreeMap<String, f64>,
    scores: &ParScores,
    folds: &FoldAssignment,
    grid_step: f64,
    tuning_fraction: f64,
) -> Result<SelectorReport> {
    evaluate_folds_with(
        |_fold, id| {
            probs
                .get(id)
                .copied()
                .ok_or_else(|| Error::mismatch(format!("no probability for `{id}`")))
        },
        scores,
        folds,
        grid_step,
        tuning_fraction,
        "injected",
    )
}

fn evaluate_folds_with(
    prob_of: impl Fn(usize, &str) -> Result<f64>,
    scores: &ParScores,
    folds: &FoldAssignment,
    grid_step: f64,
    tuning_fraction: f64,
    name: &str,
) -> Result<SelectorReport> {
    let empty_costs = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(folds.n_folds);
    for fold_id in 0..folds.n_folds {
        let train_ids = folds.train_ids(fold_id);
        let (_, tune_ids) = split_tuning(&train_ids, scores, tuning_fraction);
        let mut tune_probs = BTreeMap::new();
        for id in &tune_ids {
            tune_probs.insert(id.clone(), prob_of(fold_id, id)?);
        }
        let threshold = tune_threshold(
            &tune_probs,
            scores,
            &empty_costs,
            false,
            grid_step,
            TunedOn::Holdout,
        )?;
        let mut choices = BTreeMap::new();
        for id in &folds.test_ids(fold_id) {
            choices.insert(id.clone(), threshold.choose(prob_of(fold_id, id)?));
        }
        outcomes.push(FoldOutcome {
            fold_id,
            threshold,
            choices,
        });
    }
    assemble_report(name, scores, &empty_costs, false, &outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::ChannelRole;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            blocks: vec![ConvSpec::new(1, 4, 1, 1), ConvSpec::new(4, 8, 2, 1)],
            groups: 2,
            dropout_rate: 0.25,
            n_classes: 2,
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut data = vec![0.0f32; h * w];
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        for v in data.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = if state >> 60 < 3 { 1.0 } else { 0.0 };
        }
        ImageTensor {
            height: h,
            width: w,
            channel_roles: vec![ChannelRole::Points],
            data,
        }
    }

    #[test]
    fn standard_schedule_shapes() {
        let config = NetworkConfig::standard(1);
        config.validate().unwrap();
        let widths: Vec<usize> = config.blocks.iter().map(|b| b.out_channels).collect();
        assert_eq!(widths, vec![32, 32, 64, 64, 128, 128, 256, 256]);
        let sizes = config.spatial_schedule(512, 512);
        let expected: Vec<(usize, usize)> = [512, 256, 256, 128, 128, 64, 64, 64]
            .iter()
            .map(|&s| (s, s))
            .collect();
        assert_eq!(sizes, expected);
        for h in [64usize, 128, 256, 512] {
            let sizes = config.spatial_schedule(h, h);
            assert_eq!(*sizes.last().unwrap(), (h / 8, h / 8));
        }
        assert_eq!(config.feature_dim(), 256);
        assert_eq!(config.n_classes, 2);
    }

    #[test]
    fn block_one_conv_param_count() {
        let config = NetworkConfig::standard(1);
        assert_eq!(config.blocks[0].param_count(), 320);
        let params = NetworkParams::<f32>::init(config.clone(), 0).unwrap();
        assert_eq!(params.param_count(), config.param_count());
        assert_eq!(
            params.blocks[0].weight.len() + params.blocks[0].bias.len(),
            320
        );
    }

    #[test]
    fn config_validation_catches_bad_groups() {
        let mut config = tiny_config();
        config.groups = 3;
        assert!(config.validate().is_err());
        let mut chain = tiny_config();
        chain.blocks[1] = ConvSpec::new(5, 8, 1, 1);
        assert!(chain.validate().is_err());
    }

    #[test]
    fn forward_probs_are_normalized_and_deterministic() {
        let params = NetworkParams::<f64>::init(tiny_config(), 3).unwrap();
        let mut batch = Tensor4::<f64>::zeros(2, 1, 12, 12);
        for (i, v) in batch.data.iter_mut().enumerate() {
            *v = (i % 7) as f64 * 0.1;
        }
        let a = forward(&params, &batch, false, 0).unwrap();
        let b = forward(&params, &batch, false, 99).unwrap();
        assert_eq!(a.probs.data, b.probs.data);
        for bi in 0..2 {
            let sum: f64 = a.probs.row(bi).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(a.cache.is_none());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let params = NetworkParams::<f64>::init(tiny_config(), 3).unwrap();
        let batch = Tensor4::<f64>::zeros(1, 2, 8, 8);
        assert!(forward(&params, &batch, false, 0).is_err());
    }

    #[test]
    fn zero_weights_give_ln_two_loss() {
        let mut params = NetworkParams::<f64>::init(tiny_config(), 5).unwrap();
        for tensor in params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = 0.0;
            }
        }
        let batch = Tensor4::<f64>::zeros(4, 1, 8, 8);
        let (loss, grads, probs) = backward(&params, &batch, &[0, 1, 0, 1], 1).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        for bi in 0..4 {
            assert_eq!(probs.row(bi), &[0.5, 0.5]);
        }
        // Linear bias gradient is the mean of (probs - onehot): balanced
        // labels cancel exactly.
        let linear_b_grad = &grads[grads.len() - 1];
        assert!(linear_b_grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = NetworkParams::<f64>::init(tiny_config(), 5).unwrap();
        let before = params.clone();
        let zero_grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut adam = AdamState::new(&params, 1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &zero_grads);
        adam.step(&mut params, &zero_grads);
        assert_eq!(params, before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut params = NetworkParams::<f32>::init(tiny_config(), 9).unwrap();
        let before = params.clone();
        let images: Vec<ImageTensor> = (0..6).map(|i| image(i, 8, 8)).collect();
        let set: Vec<(&ImageTensor, Solver)> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img, if i % 2 == 0 { Solver::Eax } else { Solver::Lkh }))
            .collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            patience: None,
            seed: 4,
            ..TrainConfig::default()
        };
        let metrics = train(&mut params, &set, None, &cfg).unwrap();
        assert_eq!(params, before);
        assert_eq!(metrics.len(), 3);
    }

    #[test]
    fn first_batch_loss_matches_forward() {
        // batch_size >= dataset makes the first logged loss the plain forward
        // cross-entropy of the untouched parameters. Dropout is disabled so
        // the training-mode forward equals the inference one.
        let mut config = tiny_config();
        config.dropout_rate = 0.0;
        let mut params = NetworkParams::<f32>::init(config, 11).unwrap();
        let images: Vec<ImageTensor> = (0..5).map(|i| image(100 + i, 8, 8)).collect();
        let set: Vec<(&ImageTensor, Solver)> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img, if i % 2 == 0 { Solver::Eax } else { Solver::Lkh }))
            .collect();
        let (expected_loss, _) = evaluate_metrics(&params, &set).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            lr: 0.0,
            epochs: 1,
            patience: None,
            seed: 2,
            ..TrainConfig::default()
        };
        let metrics = train(&mut params, &set, None, &cfg).unwrap();
        assert!((metrics[0].train_loss - expected_loss).abs() < 1e-6);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let images: Vec<ImageTensor> = (0..10).map(|i| image(i, 8, 8)).collect();
        let set: Vec<(&ImageTensor, Solver)> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img, if i % 2 == 0 { Solver::Eax } else { Solver::Lkh }))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            patience: None,
            seed: 12,
            ..TrainConfig::default()
        };
        let mut a = NetworkParams::<f32>::init(tiny_config(), 1).unwrap();
        let mut b = NetworkParams::<f32>::init(tiny_config(), 1).unwrap();
        let ma = train(&mut a, &set, None, &cfg).unwrap();
        let mb = train(&mut b, &set, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = NetworkParams::<f32>::init(tiny_config(), 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(params, back);
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_checkpoint(corrupt.as_slice(), "mem").is_err());
    }

    #[test]
    fn training_log_layout() {
        let metrics = vec![EpochMetrics {
            epoch: 0,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: None,
            val_acc: None,
        }];
        let mut buf = Vec::new();
        write_training_log(&metrics, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc\n0,0.5,0.75,,\n"
        );
    }
}

//! The Lipschitz-constrained prior network: learned analysis/synthesis
//! frames, prompt-conditioned threshold generation (CGNet), a learnable
//! geometric noise schedule, and the unfolded shrinkage stages
//! `z_t = alpha*z0 + alpha*beta*W^T T_e(W z_{t-1})`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{self, ModelParams};
use crate::rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Squash ranges for the learnable schedule scalars.
pub const TAU_RANGE: (f64, f64) = (0.01, 0.99);
pub const SIGMA0_RANGE: (f64, f64) = (0.001, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepExtractor {
    /// Default: two convolution+ReLU banks.
    ConvBlock,
    /// Optional variant: windowed self-attention followed by a
    /// spatial-frequency block (learned per-frequency complex scaling plus
    /// a convolutional residual branch).
    AttentionFourier,
}

#[derive(Debug, Clone)]
pub struct LipNetConfig {
    /// Number of analysis filters F.
    pub filters: usize,
    /// Filter side k (odd).
    pub kernel: usize,
    /// Inner shrinkage stages per application.
    pub t_stages: usize,
    pub c_min: f64,
    pub c_max: f64,
    /// Anchor weight in the stage update (constant).
    pub alpha: f64,
    /// Penalty weight in the stage update (constant).
    pub beta: f64,
    /// Initial noise level (learned thereafter).
    pub sigma0: f64,
    /// Initial decay factor (learned thereafter).
    pub tau: f64,
    pub deep: DeepExtractor,
    /// Whether the sampling-mask prompt encoder exists.
    pub prompt: bool,
    /// Prompt encoder conv width.
    pub prompt_channels: usize,
    /// Attention window side (AttentionFourier only).
    pub window: usize,
    /// Image side; fixes the frequency-scale parameter dims for the
    /// AttentionFourier variant.
    pub image_size: usize,
}

impl LipNetConfig {
    /// Desk-scale default: 16 filters of side 3, 3 inner stages,
    /// c in [0.01, 5], alpha = 0.1, beta = 9, sigma0 = 0.05, tau = 0.8.
    pub fn desk_default(prompt: bool) -> Self {
        LipNetConfig {
            filters: 16,
            kernel: 3,
            t_stages: 3,
            c_min: 0.01,
            c_max: 5.0,
            alpha: 0.1,
            beta: 9.0,
            sigma0: 0.05,
            tau: 0.8,
            deep: DeepExtractor::ConvBlock,
            prompt,
            prompt_channels: 8,
            window: 8,
            image_size: 64,
        }
    }

    /// Tiny configuration used by gradient-check gates.
    pub fn tiny(prompt: bool) -> Self {
        LipNetConfig {
            filters: 4,
            image_size: 16,
            window: 8,
            ..LipNetConfig::desk_default(prompt)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel % 2 == 0 || self.t_stages == 0 {
            return Err(Error::Argument("lipnet config: bad filters/kernel/stages".into()));
        }
        if !(self.c_min > 0.0 && self.c_min < self.c_max) {
            return Err(Error::Argument("lipnet config: need 0 < c_min < c_max".into()));
        }
        if self.deep == DeepExtractor::AttentionFourier && self.image_size % self.window != 0 {
            return Err(Error::Argument(format!(
                "lipnet config: window {} does not tile image {}",
                self.window, self.image_size
            )));
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn squash_raw(target: f64, range: (f64, f64)) -> f64 {
    logit(((target - range.0) / (range.1 - range.0)).clamp(1e-6, 1.0 - 1e-6))
}

fn squash_value(raw: f64, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) / (1.0 + (-raw).exp())
}

/// Effective decay factor tau in (0.01, 0.99).
pub fn effective_tau(params: &ModelParams) -> Result<f64> {
    let raw = params
        .get("schedule.tau")
        .ok_or_else(|| Error::Argument("missing schedule.tau".into()))?
        .value
        .item()?;
    Ok(squash_value(raw, TAU_RANGE))
}

/// Effective initial noise level sigma0.
pub fn effective_sigma0(params: &ModelParams) -> Result<f64> {
    let raw = params
        .get("schedule.sigma0")
        .ok_or_else(|| Error::Argument("missing schedule.sigma0".into()))?
        .value
        .item()?;
    Ok(squash_value(raw, SIGMA0_RANGE))
}

/// Separable orthonormal cosine basis of k*k filters.
fn dct_basis(k: usize) -> Vec<Vec<f64>> {
    let mut axis = Vec::with_capacity(k);
    for p in 0..k {
        let cp = if p == 0 {
            (1.0 / k as f64).sqrt()
        } else {
            (2.0 / k as f64).sqrt()
        };
        let row: Vec<f64> = (0..k)
            .map(|i| cp * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * p as f64 / (2.0 * k as f64)).cos())
            .collect();
        axis.push(row);
    }
    let mut filters = Vec::with_capacity(k * k);
    for p in 0..k {
        for q in 0..k {
            let mut f = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    f.push(axis[p][i] * axis[q][j]);
                }
            }
            filters.push(f);
        }
    }
    filters
}

fn normal_tensor(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Initialize all learnable tensors. The frame starts as the orthonormal
/// cosine basis scaled by 1/k (so W^T W is close to the identity, matching
/// alpha = 1/(1+beta)) plus small noise; the CGNet head bias starts at 1 so
/// thresholds begin inside the clamp window and gradients flow.
pub fn init_params(cfg: &LipNetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "init");
    let (f, k) = (cfg.filters, cfg.kernel);
    let mut p = ModelParams::new();

    let basis = dct_basis(k);
    let mut frame = normal_tensor(&[f, 1, k, k], 0.005, &mut rng);
    for (fi, filt) in basis.iter().enumerate().take(f) {
        for (j, &v) in filt.iter().enumerate() {
            frame.data_mut()[fi * k * k + j] += v / k as f64;
        }
    }
    p.insert("frame.filters", frame)?;

    let conv_std = (2.0 / (f * k * k) as f64).sqrt();
    for name in ["cgnet.shallow.0", "cgnet.shallow.1"] {
        p.insert(
            &format!("{name}.weight"),
            normal_tensor(&[f, f, k, k], conv_std, &mut rng),
        )?;
        p.insert(&format!("{name}.bias"), Tensor::zeros(&[f]))?;
    }
    match cfg.deep {
        DeepExtractor::ConvBlock => {
            for name in ["cgnet.deep.0", "cgnet.deep.1"] {
                p.insert(
                    &format!("{name}.weight"),
                    normal_tensor(&[f, f, k, k], conv_std, &mut rng),
                )?;
                p.insert(&format!("{name}.bias"), Tensor::zeros(&[f]))?;
            }
        }
        DeepExtractor::AttentionFourier => {
            let proj_std = (1.0 / f as f64).sqrt();
            for name in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    &format!("cgnet.deep.stb.{name}"),
                    normal_tensor(&[f, f], proj_std, &mut rng),
                )?;
            }
            // Frequency scaling starts as the identity (re = 1, im = 0).
            let hw = cfg.image_size;
            let mut freq = Tensor::zeros(&[2, hw, hw]);
            freq.data_mut()[..hw * hw].fill(1.0);
            p.insert("cgnet.deep.sfb.freq", freq)?;
            for name in ["cgnet.deep.sfb.0", "cgnet.deep.sfb.1"] {
                p.insert(
                    &format!("{name}.weight"),
                    normal_tensor(&[f, f, k, k], conv_std, &mut rng),
                )?;
                p.insert(&format!("{name}.bias"), Tensor::zeros(&[f]))?;
            }
        }
    }
    p.insert(
        "cgnet.head.weight",
        normal_tensor(&[f, f, k, k], 0.01, &mut rng),
    )?;
    p.insert("cgnet.head.bias", Tensor::filled(&[f], 1.0))?;

    if cfg.prompt {
        let pc = cfg.prompt_channels;
        let dims = [[pc, 1, 3, 3], [pc, pc, 3, 3], [pc, pc, 3, 3]];
        for (i, d) in dims.iter().enumerate() {
            let std = (2.0 / (d[1] * 9) as f64).sqrt();
            p.insert(&format!("prompt.conv{i}.weight"), normal_tensor(d, std, &mut rng))?;
            p.insert(&format!("prompt.conv{i}.bias"), Tensor::zeros(&[pc]))?;
        }
        p.insert("prompt.fc.weight", normal_tensor(&[f, pc], 0.01, &mut rng))?;
        p.insert("prompt.fc.bias", Tensor::filled(&[f], 1.0))?;
    }

    p.insert(
        "schedule.sigma0",
        Tensor::scalar(squash_raw(cfg.sigma0, SIGMA0_RANGE)),
    )?;
    p.insert("schedule.tau", Tensor::scalar(squash_raw(cfg.tau, TAU_RANGE)))?;
    Ok(p)
}

fn conv_bias(
    tape: &mut Tape,
    params: &ModelParams,
    x: ValueId,
    name: &str,
) -> Result<ValueId> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let y = tape.conv2d(x, w)?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    let dims = tape.value(y).dims().to_vec();
    let bb = tape.broadcast_channel(b, dims[1], dims[2])?;
    tape.add(y, bb)
}

fn conv_s2_bias(
    tape: &mut Tape,
    params: &ModelParams,
    x: ValueId,
    name: &str,
) -> Result<ValueId> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let y = tape.conv2d_stride2(x, w)?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    let dims = tape.value(y).dims().to_vec();
    let bb = tape.broadcast_channel(b, dims[1], dims[2])?;
    tape.add(y, bb)
}

/// Prompt vector from a sampling mask: three stride-2 conv+ReLU banks,
/// global average pooling, then a fully connected map to length F.
pub fn prompt_encode_on(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &LipNetConfig,
    mask: ValueId,
) -> Result<ValueId> {
    if !cfg.prompt {
        return Err(Error::Argument("prompt_encode on a prompt-free model".into()));
    }
    let mut h = mask;
    for i in 0..3 {
        h = conv_s2_bias(tape, params, h, &format!("prompt.conv{i}"))?;
        h = tape.relu(h)?;
    }
    let pooled = tape.global_avg_pool(h)?;
    let w = tape.param(params, "prompt.fc.weight")?;
    let b = tape.param(params, "prompt.fc.bias")?;
    tape.fully_connected(pooled, w, b)
}

/// Prompt vector as a plain tensor (masks enter as `[Np, Nb]` or
/// `[1, Np, Nb]`).
pub fn prompt_encode(params: &ModelParams, cfg: &LipNetConfig, mask: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = mask_leaf(&mut tape, mask)?;
    let p = prompt_encode_on(&mut tape, params, cfg, m)?;
    Ok(tape.value(p).clone())
}

fn mask_leaf(tape: &mut Tape, mask: &Tensor) -> Result<ValueId> {
    let t = match mask.dims().len() {
        2 => mask.reshaped(&[1, mask.dims()[0], mask.dims()[1]])?,
        3 => mask.clone(),
        _ => {
            return Err(Error::shape(
                "prompt_encode",
                format!("mask dims {:?}", mask.dims()),
            ))
        }
    };
    Ok(tape.leaf(t))
}

/// All-ones prompt used by prompt-free regimes (the multiplicative prompt
/// path then degenerates to the plain shallow skip).
pub fn ones_prompt(tape: &mut Tape, cfg: &LipNetConfig) -> ValueId {
    tape.leaf(Tensor::filled(&[cfg.filters], 1.0))
}

fn deep_extract(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &LipNetConfig,
    q: ValueId,
) -> Result<ValueId> {
    match cfg.deep {
        DeepExtractor::ConvBlock => {
            let mut h = conv_bias(tape, params, q, "cgnet.deep.0")?;
            h = tape.relu(h)?;
            h = conv_bias(tape, params, h, "cgnet.deep.1")?;
            tape.relu(h)
        }
        DeepExtractor::AttentionFourier => {
            let wq = tape.param(params, "cgnet.deep.stb.wq")?;
            let wk = tape.param(params, "cgnet.deep.stb.wk")?;
            let wv = tape.param(params, "cgnet.deep.stb.wv")?;
            let wo = tape.param(params, "cgnet.deep.stb.wo")?;
            let attn = tape.window_attention(q, wq, wk, wv, wo, cfg.window)?;
            let stb = tape.add(q, attn)?;
            // Frequency branch: per-frequency complex scaling.
            let spec = tape.dft2(stb)?;
            let fs = tape.param(params, "cgnet.deep.sfb.freq")?;
            let scaled = tape.complex_scale(spec, fs)?;
            let freq = tape.idft2(scaled)?;
            // Spatial branch: conv residual.
            let mut s = conv_bias(tape, params, stb, "cgnet.deep.sfb.0")?;
            s = tape.relu(s)?;
            s = conv_bias(tape, params, s, "cgnet.deep.sfb.1")?;
            let spatial = tape.add(stb, s)?;
            tape.add(freq, spatial)
        }
    }
}

/// Spatially varying proportional constants:
/// `c = clamp(Conv(F_deep(q) + q), c_min, c_max)` with
/// `q = F_shallow(coeffs) (x) p + coeffs`.
pub fn cgnet_constants_on(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &LipNetConfig,
    coeffs: ValueId,
    p: ValueId,
) -> Result<ValueId> {
    let dims = tape.value(coeffs).dims().to_vec();
    if dims.len() != 3 || dims[0] != cfg.filters {
        return Err(Error::shape(
            "cgnet_constants",
            format!("coeffs {:?} vs {} filters", dims, cfg.filters),
        ));
    }
    let mut shallow = conv_bias(tape, params, coeffs, "cgnet.shallow.0")?;
    shallow = tape.relu(shallow)?;
    shallow = conv_bias(tape, params, shallow, "cgnet.shallow.1")?;
    let pb = tape.broadcast_channel(p, dims[1], dims[2])?;
    let modulated = tape.mul(shallow, pb)?;
    let q = tape.add(modulated, coeffs)?;
    let deep = deep_extract(tape, params, cfg, q)?;
    let merged = tape.add(deep, q)?;
    let head = conv_bias(tape, params, merged, "cgnet.head")?;
    tape.clamp(head, cfg.c_min, cfg.c_max)
}

/// Plain-tensor wrapper around [`cgnet_constants_on`].
pub fn cgnet_constants(
    params: &ModelParams,
    cfg: &LipNetConfig,
    coeffs: &Tensor,
    p: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = tape.leaf(coeffs.clone());
    let pv = tape.leaf(p.clone());
    let out = cgnet_constants_on(&mut tape, params, cfg, c, pv)?;
    Ok(tape.value(out).clone())
}

/// `e = c * sigma` (sigma stretched over c's dims).
pub fn thresholds(c: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Argument("thresholds: sigma must be >= 0".into()));
    }
    Ok(c.map(|v| v * sigma))
}

/// Where the noise schedule starts for one application of the prior.
pub enum SigmaStart {
    /// Learned sigma0 parameter.
    Learned,
    /// Fixed external noise level (used when sweeping sigma in the
    /// boundedness / Lipschitz checks).
    Fixed(f64),
    /// Continue decaying from an existing scalar on the tape.
    Continued(ValueId),
}

/// The squashed learnable scalars as tape values.
pub fn schedule_on(
    tape: &mut Tape,
    params: &ModelParams,
) -> Result<(ValueId, ValueId)> {
    let tau_raw = tape.param(params, "schedule.tau")?;
    let t = tape.sigmoid(tau_raw)?;
    let tau = tape.affine(t, TAU_RANGE.1 - TAU_RANGE.0, TAU_RANGE.0)?;
    let s_raw = tape.param(params, "schedule.sigma0")?;
    let s = tape.sigmoid(s_raw)?;
    let sigma0 = tape.affine(s, SIGMA0_RANGE.1 - SIGMA0_RANGE.0, SIGMA0_RANGE.0)?;
    Ok((tau, sigma0))
}

/// One shrinkage stage: `z = alpha*z0 + alpha*beta*W^T T_e(W z_prev)` with
/// thresholds `e = c (x) sigma` from CGNet.
pub fn lipnet_stage_on(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &LipNetConfig,
    z_prev: ValueId,
    z0: ValueId,
    sigma: ValueId,
    p: ValueId,
) -> Result<ValueId> {
    let frame = tape.param(params, "frame.filters")?;
    let coeffs = tape.conv2d(z_prev, frame)?;
    let c = cgnet_constants_on(tape, params, cfg, coeffs, p)?;
    let e = tape.mul_scalar(c, sigma)?;
    let shrunk = tape.soft_threshold(coeffs, e)?;
    let synth = tape.conv2d_adjoint(shrunk, frame)?;
    let anchored = tape.affine(z0, cfg.alpha, 0.0)?;
    let scaled = tape.affine(synth, cfg.alpha * cfg.beta, 0.0)?;
    tape.add(anchored, scaled)
}

/// Unrolled prior: T stages from `z_prev = z0` with `sigma_t = tau^t * sigma0`;
/// returns the final iterate and the last sigma scalar (for continued decay).
pub fn lipnet_apply_on(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &LipNetConfig,
    z0: ValueId,
    p: ValueId,
    start: SigmaStart,
) -> Result<(ValueId, ValueId)> {
    let (tau, sigma0) = schedule_on(tape, params)?;
    let mut sigma = match start {
        SigmaStart::Learned => sigma0,
        SigmaStart::Fixed(v) => {
            if v < 0.0 {
                return Err(Error::Argument("lipnet_apply: sigma must be >= 0".into()));
            }
            tape.scalar(v)
        }
        SigmaStart::Continued(id) => id,
    };
    let mut z = z0;
    for _ in 0..cfg.t_stages {
        sigma = tape.mul(tau, sigma)?;
        z = lipnet_stage_on(tape, params, cfg, z, z0, sigma, p)?;
    }
    Ok((z, sigma))
}

/// Plain-tensor denoiser application `D(z0; sigma)`. `mask` drives the
/// prompt when the model has one; `sigma0_override` replaces the learned
/// sigma0 (the noise-parameter input of the bounded/Lipschitz checks).
pub fn lipnet_apply(
    params: &ModelParams,
    cfg: &LipNetConfig,
    z0: &Tensor,
    mask: Option<&Tensor>,
    sigma0_override: Option<f64>,
) -> Result<Tensor> {
    let dims = z0.dims();
    if dims.len() != 2 {
        return Err(Error::shape("lipnet_apply", format!("image dims {dims:?}")));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(z0.reshaped(&[1, dims[0], dims[1]])?);
    let p = match (cfg.prompt, mask) {
        (true, Some(m)) => {
            let mv = mask_leaf(&mut tape, m)?;
            prompt_encode_on(&mut tape, params, cfg, mv)?
        }
        (true, None) => {
            return Err(Error::Argument("prompt model needs a sampling mask".into()))
        }
        (false, _) => ones_prompt(&mut tape, cfg),
    };
    let start = match sigma0_override {
        Some(v) => SigmaStart::Fixed(v),
        None => SigmaStart::Learned,
    };
    let (out, _) = lipnet_apply_on(&mut tape, params, cfg, z, p, start)?;
    tape.value(out).reshaped(dims)
}

/// Spectral norm of the analysis frame as an operator on `h x w` images
/// (power iteration on `x -> W^T(W x)`).
pub fn frame_spectral_norm(
    filters: &Tensor,
    h: usize,
    w: usize,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters < 50 {
        return Err(Error::Argument("frame_spectral_norm: iters must be >= 50".into()));
    }
    if filters.norm_sq() == 0.0 {
        return Err(Error::Argument("frame_spectral_norm: zero filters".into()));
    }
    let mut rng = rng::stream(seed, "frame.norm");
    let mut v = Tensor::new(
        vec![1, h, w],
        (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect(),
    )?;
    let norm = v.norm();
    v.scale_in_place(1.0 / norm);
    let mut lambda = 0.0;
    for it in 0..iters {
        let wx = kernels::conv2d(&v, filters)?;
        let wtwx = kernels::conv2d_adjoint(&wx, filters)?;
        let next_lambda = v.dot(&wtwx);
        let nrm = wtwx.norm();
        if nrm == 0.0 {
            return Ok(0.0);
        }
        v = wtwx.map(|x| x / nrm);
        if it > 0 && (next_lambda - lambda).abs() <= 1e-12 * next_lambda.abs().max(1e-300) {
            lambda = next_lambda;
            break;
        }
        lambda = next_lambda;
    }
    Ok(lambda.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn deep_code(d: DeepExtractor) -> f64 {
    match d {
        DeepExtractor::ConvBlock => 0.0,
        DeepExtractor::AttentionFourier => 1.0,
    }
}

/// Save parameters plus architecture metadata (`meta.*` entries) in one
/// LIPC file.
pub fn save_model(
    path: &Path,
    params: &ModelParams,
    cfg: &LipNetConfig,
    k_stages: usize,
) -> Result<()> {
    let meta: Vec<(String, Tensor)> = vec![
        ("meta.filters".into(), Tensor::scalar(cfg.filters as f64)),
        ("meta.kernel".into(), Tensor::scalar(cfg.kernel as f64)),
        ("meta.t_stages".into(), Tensor::scalar(cfg.t_stages as f64)),
        ("meta.k_stages".into(), Tensor::scalar(k_stages as f64)),
        ("meta.c_min".into(), Tensor::scalar(cfg.c_min)),
        ("meta.c_max".into(), Tensor::scalar(cfg.c_max)),
        ("meta.alpha".into(), Tensor::scalar(cfg.alpha)),
        ("meta.beta".into(), Tensor::scalar(cfg.beta)),
        ("meta.sigma0".into(), Tensor::scalar(cfg.sigma0)),
        ("meta.tau".into(), Tensor::scalar(cfg.tau)),
        ("meta.deep".into(), Tensor::scalar(deep_code(cfg.deep))),
        ("meta.prompt".into(), Tensor::scalar(if cfg.prompt { 1.0 } else { 0.0 })),
        (
            "meta.prompt_channels".into(),
            Tensor::scalar(cfg.prompt_channels as f64),
        ),
        ("meta.window".into(), Tensor::scalar(cfg.window as f64)),
        ("meta.image_size".into(), Tensor::scalar(cfg.image_size as f64)),
    ];
    let mut entries: Vec<(String, &Tensor)> = params
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    for (name, t) in &meta {
        entries.push((name.clone(), t));
    }
    params::write_checkpoint(path, &entries)
}

/// Load a checkpoint: reconstructs the architecture from `meta.*`, then
/// validates that the stored parameter names match it exactly.
pub fn load_model(path: &Path) -> Result<(LipNetConfig, usize, ModelParams)> {
    let entries = params::read_checkpoint(path)?;
    let mut meta = std::collections::BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, t) in entries {
        if let Some(key) = name.strip_prefix("meta.") {
            meta.insert(key.to_string(), t.item()?);
        } else {
            tensors.push((name, t));
        }
    }
    let get = |k: &str| -> Result<f64> {
        meta.copied_get(k)
    };
    let cfg = LipNetConfig {
        filters: get("filters")? as usize,
        kernel: get("kernel")? as usize,
        t_stages: get("t_stages")? as usize,
        c_min: get("c_min")?,
        c_max: get("c_max")?,
        alpha: get("alpha")?,
        beta: get("beta")?,
        sigma0: get("sigma0")?,
        tau: get("tau")?,
        deep: if get("deep")? > 0.5 {
            DeepExtractor::AttentionFourier
        } else {
            DeepExtractor::ConvBlock
        },
        prompt: get("prompt")? > 0.5,
        prompt_channels: get("prompt_channels")? as usize,
        window: get("window")? as usize,
        image_size: get("image_size")? as usize,
    };
    let k_stages = get("k_stages")? as usize;
    let mut params = init_params(&cfg, 0)?;
    params.load_values(&tensors)?;
    Ok((cfg, k_stages, params))
}

trait MetaGet {
    fn copied_get(&self, k: &str) -> Result<f64>;
}

impl MetaGet for std::collections::BTreeMap<String, f64> {
    fn copied_get(&self, k: &str) -> Result<f64> {
        self.get(k)
            .copied()
            .ok_or_else(|| Error::Argument(format!("checkpoint missing meta.{k}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(dims: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
    }

    fn small_cfg(prompt: bool) -> LipNetConfig {
        LipNetConfig {
            filters: 4,
            t_stages: 2,
            image_size: 16,
            window: 8,
            ..LipNetConfig::desk_default(prompt)
        }
    }

    #[test]
    fn init_frame_is_near_tight() {
        let cfg = LipNetConfig::desk_default(false);
        let params = init_params(&cfg, 1).unwrap();
        let filters = &params.get("frame.filters").unwrap().value;
        let norm = frame_spectral_norm(filters, 32, 32, 200, 5).unwrap();
        assert!((norm - 1.0).abs() < 0.05, "spectral norm {norm}");
    }

    #[test]
    fn spectral_norm_identity_and_homogeneity() {
        let mut eye = Tensor::zeros(&[1, 1, 3, 3]);
        eye.data_mut()[4] = 1.0;
        let n1 = frame_spectral_norm(&eye, 12, 12, 100, 3).unwrap();
        assert!((n1 - 1.0).abs() < 1e-9);
        let mut scaled = eye.clone();
        scaled.scale_in_place(3.0);
        let n3 = frame_spectral_norm(&scaled, 12, 12, 100, 3).unwrap();
        assert!((n3 - 3.0).abs() < 1e-9);
        assert!(frame_spectral_norm(&Tensor::zeros(&[1, 1, 3, 3]), 8, 8, 100, 1).is_err());
    }

    #[test]
    fn spectral_norm_matches_dense_svd() {
        let mut rng = crate::rng::stream(17, "svd");
        let filters = randn(&[3, 1, 3, 3], &mut rng);
        let (h, w) = (8, 8);
        let est = frame_spectral_norm(&filters, h, w, 2000, 2).unwrap();
        // Dense oracle: build the full matrix column by column.
        let n = h * w;
        let m = 3 * n;
        let mut dense = nalgebra::DMatrix::<f64>::zeros(m, n);
        for col in 0..n {
            let mut basis = Tensor::zeros(&[1, h, w]);
            basis.data_mut()[col] = 1.0;
            let out = kernels::conv2d(&basis, &filters).unwrap();
            for row in 0..m {
                dense[(row, col)] = out.data()[row];
            }
        }
        let svd = dense.svd(false, false);
        let top = svd.singular_values.max();
        assert!(
            ((est - top) / top).abs() < 1e-6,
            "power {est} vs svd {top}"
        );
    }

    #[test]
    fn prompt_encoding_is_deterministic_with_length_f() {
        let cfg = small_cfg(true);
        let params = init_params(&cfg, 3).unwrap();
        let mask = crate::simulate::make_mask(24, 23, &[0, 4, 8, 12, 16, 20]).unwrap();
        let p1 = prompt_encode(&params, &cfg, &mask).unwrap();
        let p2 = prompt_encode(&params, &cfg, &mask).unwrap();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(p1.dims(), &[cfg.filters]);
    }

    #[test]
    fn cgnet_output_is_clamped_for_arbitrary_inputs() {
        let cfg = small_cfg(false);
        let params = init_params(&cfg, 4).unwrap();
        let mut rng = crate::rng::stream(10, "fuzz");
        let p = Tensor::filled(&[cfg.filters], 1.0);
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
            let mut coeffs = randn(&[cfg.filters, 8, 8], &mut rng);
            coeffs.scale_in_place(scale);
            let c = cgnet_constants(&params, &cfg, &coeffs, &p).unwrap();
            assert!(c
                .data()
                .iter()
                .all(|&v| v >= cfg.c_min && v <= cfg.c_max));
        }
    }

    #[test]
    fn prompt_path_vanishes_with_zero_shallow_weights() {
        let cfg = small_cfg(false);
        let mut params = init_params(&cfg, 5).unwrap();
        for name in [
            "cgnet.shallow.0.weight",
            "cgnet.shallow.0.bias",
            "cgnet.shallow.1.weight",
            "cgnet.shallow.1.bias",
        ] {
            let p = params.get_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.dims());
        }
        let mut rng = crate::rng::stream(11, "q");
        let coeffs = randn(&[cfg.filters, 8, 8], &mut rng);
        let ones = Tensor::filled(&[cfg.filters], 1.0);
        // With zero shallow output, q == coeffs: check via the head input by
        // zeroing deep weights too so c = clamp(head(q) ...) and building
        // the same value by hand.
        let mut tape = Tape::new();
        let ci = tape.leaf(coeffs.clone());
        let pi = tape.leaf(ones.clone());
        let shallow0w = tape.param(&params, "cgnet.shallow.0.weight").unwrap();
        let s = tape.conv2d(ci, shallow0w).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        let c = cgnet_constants(&params, &cfg, &coeffs, &ones).unwrap();
        assert_eq!(c.dims(), coeffs.dims());
    }

    #[test]
    fn thresholds_scale_linearly_with_sigma() {
        let c = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let e = thresholds(&c, 0.1).unwrap();
        assert!((e.data()[0] - 0.2).abs() < 1e-15);
        assert!((e.data()[1] - 0.3).abs() < 1e-15);
        let e0 = thresholds(&c, 0.0).unwrap();
        assert!(e0.data().iter().all(|&v| v == 0.0));
        let e2 = thresholds(&c, 0.2).unwrap();
        for (a, b) in e.data().iter().zip(e2.data()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        assert!(thresholds(&c, -0.1).is_err());
    }

    #[test]
    fn stage_matches_dense_composition() {
        // Literal composition from dense matrices on an 8x8 input.
        let cfg = small_cfg(false);
        let params = init_params(&cfg, 6).unwrap();
        let (h, w) = (8, 8);
        let mut rng = crate::rng::stream(12, "dense");
        let z_prev = randn(&[1, h, w], &mut rng);
        let z0 = randn(&[1, h, w], &mut rng);
        let sigma = 0.07;
        let ones = Tensor::filled(&[cfg.filters], 1.0);

        // Tape path.
        let mut tape = Tape::new();
        let zp = tape.leaf(z_prev.clone());
        let z0i = tape.leaf(z0.clone());
        let si = tape.scalar(sigma);
        let pi = tape.leaf(ones.clone());
        let out = lipnet_stage_on(&mut tape, &params, &cfg, zp, z0i, si, pi).unwrap();
        let fast = tape.value(out).clone();

        // Dense path: explicit frame matrix.
        let filters = &params.get("frame.filters").unwrap().value;
        let n = h * w;
        let m = cfg.filters * n;
        let mut wmat = vec![0.0; m * n];
        for col in 0..n {
            let mut basis = Tensor::zeros(&[1, h, w]);
            basis.data_mut()[col] = 1.0;
            let out = kernels::conv2d(&basis, filters).unwrap();
            for row in 0..m {
                wmat[row * n + col] = out.data()[row];
            }
        }
        let mut coeffs = vec![0.0; m];
        for row in 0..m {
            coeffs[row] = (0..n).map(|c| wmat[row * n + c] * z_prev.data()[c]).sum();
        }
        let coeffs_t = Tensor::new(vec![cfg.filters, h, w], coeffs.clone()).unwrap();
        let cmap = cgnet_constants(&params, &cfg, &coeffs_t, &ones).unwrap();
        let mut shrunk = vec![0.0; m];
        for i in 0..m {
            let e = cmap.data()[i] * sigma;
            let u = coeffs[i];
            shrunk[i] = u.signum() * (u.abs() - e).max(0.0);
        }
        let mut synth = vec![0.0; n];
        for col in 0..n {
            synth[col] = (0..m).map(|r| wmat[r * n + col] * shrunk[r]).sum();
        }
        for idx in 0..n {
            let dense = cfg.alpha * z0.data()[idx] + cfg.alpha * cfg.beta * synth[idx];
            let rel = (dense - fast.data()[idx]).abs() / dense.abs().max(1e-12);
            assert!(rel < 1e-10, "pixel {idx}: {dense} vs {}", fast.data()[idx]);
        }
    }

    #[test]
    fn huge_sigma_reduces_stage_to_anchor_and_zero_sigma_keeps_coeffs() {
        let cfg = small_cfg(false);
        let params = init_params(&cfg, 7).unwrap();
        let mut rng = crate::rng::stream(13, "sig");
        let z_prev = randn(&[1, 8, 8], &mut rng);
        let z0 = randn(&[1, 8, 8], &mut rng);
        let ones = Tensor::filled(&[cfg.filters], 1.0);

        // sigma so large every coefficient dies: z = alpha * z0.
        let mut tape = Tape::new();
        let zp = tape.leaf(z_prev.clone());
        let z0i = tape.leaf(z0.clone());
        let si = tape.scalar(1e9);
        let pi = tape.leaf(ones.clone());
        let out = lipnet_stage_on(&mut tape, &params, &cfg, zp, z0i, si, pi).unwrap();
        for (o, z) in tape.value(out).data().iter().zip(z0.data()) {
            assert!((o - cfg.alpha * z).abs() < 1e-12);
        }

        // sigma == 0: z = alpha*z0 + alpha*beta*W^T W z_prev exactly.
        let mut tape = Tape::new();
        let zp = tape.leaf(z_prev.clone());
        let z0i = tape.leaf(z0.clone());
        let si = tape.scalar(0.0);
        let pi = tape.leaf(ones.clone());
        let out = lipnet_stage_on(&mut tape, &params, &cfg, zp, z0i, si, pi).unwrap();
        let filters = &params.get("frame.filters").unwrap().value;
        let wtw = kernels::conv2d_adjoint(&kernels::conv2d(&z_prev, filters).unwrap(), filters)
            .unwrap();
        for i in 0..64 {
            let want = cfg.alpha * z0.data()[i] + cfg.alpha * cfg.beta * wtw.data()[i];
            assert!((tape.value(out).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_is_deterministic_and_sensitive_to_sigma0() {
        let cfg = small_cfg(true);
        let params = init_params(&cfg, 8).unwrap();
        let mask = crate::simulate::make_mask(24, 23, &[0, 6, 12, 18]).unwrap();
        let mut rng = crate::rng::stream(14, "apply");
        let z0 = randn(&[16, 16], &mut rng).map(|v| v.abs());
        let a = lipnet_apply(&params, &cfg, &z0, Some(&mask), None).unwrap();
        let b = lipnet_apply(&params, &cfg, &z0, Some(&mask), None).unwrap();
        assert_eq!(a.data(), b.data());
        let base_sigma = effective_sigma0(&params).unwrap();
        let c = lipnet_apply(&params, &cfg, &z0, Some(&mask), Some(2.0 * base_sigma)).unwrap();
        let diff: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0, "doubling sigma0 changed nothing");
    }

    #[test]
    fn apply_with_one_stage_equals_single_stage() {
        let mut cfg = small_cfg(false);
        cfg.t_stages = 1;
        let params = init_params(&cfg, 9).unwrap();
        let mut rng = crate::rng::stream(15, "one");
        let z0 = randn(&[16, 16], &mut rng);
        let out = lipnet_apply(&params, &cfg, &z0, None, None).unwrap();

        let tau = effective_tau(&params).unwrap();
        let sigma0 = effective_sigma0(&params).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(z0.reshaped(&[1, 16, 16]).unwrap());
        let s = tape.scalar(tau * sigma0);
        let p = ones_prompt(&mut tape, &cfg);
        let manual = lipnet_stage_on(&mut tape, &params, &cfg, z, z, s, p).unwrap();
        for (a, b) in out.data().iter().zip(tape.value(manual).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_values_match_squash() {
        let cfg = small_cfg(false);
        let params = init_params(&cfg, 10).unwrap();
        assert!((effective_tau(&params).unwrap() - 0.8).abs() < 1e-9);
        assert!((effective_sigma0(&params).unwrap() - 0.05).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip_and_cross_regime_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(true);
        let params = init_params(&cfg, 11).unwrap();
        let path = dir.path().join("m.lipc");
        save_model(&path, &params, &cfg, 3).unwrap();
        let (cfg2, k, params2) = load_model(&path).unwrap();
        assert_eq!(k, 3);
        assert_eq!(cfg2.filters, cfg.filters);
        assert!(cfg2.prompt);
        assert_eq!(params2.names(), params.names());
        for (a, b) in params.iter().zip(params2.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }

        // Loading a prompt checkpoint into a no-prompt architecture names
        // the offending parameters.
        let noprompt = init_params(&small_cfg(false), 11).unwrap();
        let entries: Vec<(String, Tensor)> = params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut target = noprompt;
        let err = target.load_values(&entries).unwrap_err();
        match err {
            Error::ParamMismatch { unexpected, .. } => {
                assert!(unexpected.iter().all(|n| n.starts_with("prompt.")));
                assert!(!unexpected.is_empty());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn prompt_and_noprompt_differ_exactly_by_prompt_names() {
        let with = init_params(&small_cfg(true), 1).unwrap();
        let without = init_params(&small_cfg(false), 1).unwrap();
        let with_names: std::collections::BTreeSet<_> = with.names().into_iter().collect();
        let without_names: std::collections::BTreeSet<_> = without.names().into_iter().collect();
        let extra: Vec<_> = with_names.difference(&without_names).collect();
        assert!(extra.iter().all(|n| n.starts_with("prompt.")));
        assert_eq!(with_names.intersection(&without_names).count(), without_names.len());
        assert!(!extra.is_empty());
    }

    #[test]
    fn attention_variant_builds_and_runs() {
        let mut cfg = small_cfg(false);
        cfg.deep = DeepExtractor::AttentionFourier;
        cfg.image_size = 16;
        cfg.window = 8;
        let params = init_params(&cfg, 12).unwrap();
        let mut rng = crate::rng::stream(16, "attn");
        let z0 = randn(&[16, 16], &mut rng);
        let out = lipnet_apply(&params, &cfg, &z0, None, None).unwrap();
        assert_eq!(out.dims(), &[16, 16]);
        assert!(out.all_finite());
    }
}

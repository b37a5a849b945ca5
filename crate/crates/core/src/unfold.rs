//! The K-stage unfolded reconstruction map: a gradient half-step on the
//! data-fidelity term (image update module) followed by the prior network,
//! starting from the FBP image.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, SparseOperator};
use crate::io;
use crate::lipnet::{self, LipNetConfig, SigmaStart};
use crate::params::ModelParams;
use crate::tape::{LinearMap, Tape, ValueId};
use crate::tensor::Tensor;

/// Fixed seed for the startup spectral estimate behind the default step
/// size; part of the reproducibility contract.
pub const ETA_SPECTRUM_SEED: u64 = 0xE7A;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// Each outer stage restarts the noise schedule at sigma0.
    Fresh,
    /// The schedule keeps decaying across outer stages.
    Continuing,
}

#[derive(Debug, Clone)]
pub struct UnfoldingConfig {
    pub k_stages: usize,
    /// Step size; `None` resolves to `1 / zeta_hat` of the operator.
    pub eta: Option<f64>,
    pub sigma_mode: SigmaMode,
}

impl UnfoldingConfig {
    pub fn desk_default() -> Self {
        UnfoldingConfig {
            k_stages: 3,
            eta: None,
            sigma_mode: SigmaMode::Fresh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_stages == 0 {
            return Err(Error::Argument("unfolding: k_stages must be >= 1".into()));
        }
        if let Some(eta) = self.eta {
            if eta <= 0.0 {
                return Err(Error::Argument("unfolding: eta must be positive".into()));
            }
        }
        Ok(())
    }

    /// Resolve the step size for an operator (power iteration when unset).
    pub fn resolve_eta(&self, op: &SparseOperator) -> Result<f64> {
        match self.eta {
            Some(v) => Ok(v),
            None => {
                let s = geometry::estimate_spectrum(op, 200, ETA_SPECTRUM_SEED)?;
                Ok(1.0 / s.zeta_hat)
            }
        }
    }
}

/// Gradient half-step on the data term over any exact-adjoint linear map:
/// `x + eta * P^T (y - P x)`.
pub fn ium_step_map(x: &Tensor, y: &Tensor, map: &dyn LinearMap, eta: f64) -> Result<Tensor> {
    if x.len() != map.in_len() || y.len() != map.out_len() {
        return Err(Error::shape(
            "ium_step",
            format!(
                "x has {} entries / y has {}, operator wants {} / {}",
                x.len(),
                y.len(),
                map.in_len(),
                map.out_len()
            ),
        ));
    }
    let mut proj = vec![0.0; map.out_len()];
    map.apply(x.data(), &mut proj);
    for (p, yv) in proj.iter_mut().zip(y.data()) {
        *p = yv - *p;
    }
    let mut back = vec![0.0; map.in_len()];
    map.apply_adjoint(&proj, &mut back);
    let mut out = x.clone();
    for (o, b) in out.data_mut().iter_mut().zip(&back) {
        *o += eta * b;
    }
    Ok(out)
}

/// [`ium_step_map`] with sinogram/image dimension checks against the
/// fan-beam operator.
pub fn ium_step(x: &Tensor, y: &Tensor, op: &SparseOperator, eta: f64) -> Result<Tensor> {
    if x.dims() != op.image_dims() {
        return Err(Error::shape(
            "ium_step",
            format!("image {:?} vs {:?}", x.dims(), op.image_dims()),
        ));
    }
    if y.dims() != op.sino_dims() {
        return Err(Error::shape(
            "ium_step",
            format!("sinogram {:?} vs {:?}", y.dims(), op.sino_dims()),
        ));
    }
    ium_step_map(x, y, op, eta)
}

/// Build the unfolded graph on a tape; returns the per-stage image ids
/// `[x0, x1, ..., xK]` (length K+1). The prompt vector is computed once and
/// shared by every stage.
#[allow(clippy::too_many_arguments)]
pub fn build_unfolded(
    tape: &mut Tape,
    params: &ModelParams,
    lipcfg: &LipNetConfig,
    ucfg: &UnfoldingConfig,
    op: &Arc<SparseOperator>,
    y: &Tensor,
    mask: Option<&Tensor>,
    x0: &Tensor,
    eta: f64,
) -> Result<Vec<ValueId>> {
    ucfg.validate()?;
    lipcfg.validate()?;
    let [h, w] = op.image_dims();
    if x0.dims() != [h, w] {
        return Err(Error::shape(
            "build_unfolded",
            format!("x0 {:?} vs image [{h}, {w}]", x0.dims()),
        ));
    }
    let n = op.spec.n_bins;
    let _ = n;
    let y_id = tape.leaf(y.clone());
    let p = match (lipcfg.prompt, mask) {
        (true, Some(m)) => {
            let m3 = m.reshaped(&[1, m.dims()[0], m.dims()[1]])?;
            let mv = tape.leaf(m3);
            lipnet::prompt_encode_on(tape, params, lipcfg, mv)?
        }
        (true, None) => {
            return Err(Error::Argument(
                "prompt model needs the sampling mask".into(),
            ))
        }
        (false, _) => lipnet::ones_prompt(tape, lipcfg),
    };

    let mut stages = Vec::with_capacity(ucfg.k_stages + 1);
    let mut x = tape.leaf(x0.reshaped(&[1, h, w])?);
    stages.push(x);
    let map: Arc<dyn LinearMap> = op.clone();
    let mut sigma_cursor: Option<ValueId> = None;
    for _ in 0..ucfg.k_stages {
        // Image update module.
        let proj = tape.linear_map(x, map.clone(), false, &[op.sino_dims()[0], op.sino_dims()[1]])?;
        let resid = tape.sub(y_id, proj)?;
        let back = tape.linear_map(resid, map.clone(), true, &[1, h, w])?;
        let step = tape.affine(back, eta, 0.0)?;
        let half = tape.add(x, step)?;
        // Prior network.
        let start = match (ucfg.sigma_mode, sigma_cursor) {
            (SigmaMode::Fresh, _) | (SigmaMode::Continuing, None) => SigmaStart::Learned,
            (SigmaMode::Continuing, Some(id)) => SigmaStart::Continued(id),
        };
        let (z, last_sigma) = lipnet::lipnet_apply_on(tape, params, lipcfg, half, p, start)?;
        sigma_cursor = Some(last_sigma);
        x = z;
        stages.push(x);
    }
    Ok(stages)
}

/// Reconstruction output: all per-stage images including the FBP start.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stages: Vec<Tensor>,
    pub eta: f64,
}

impl StageOutputs {
    pub fn final_image(&self) -> &Tensor {
        self.stages.last().unwrap()
    }
}

/// Full inference: `x0 = fbp(y)`, then K rounds of gradient half-step plus
/// prior. Non-finite values abort with the stage index named.
pub fn promptct_forward(
    params: &ModelParams,
    lipcfg: &LipNetConfig,
    ucfg: &UnfoldingConfig,
    op: &Arc<SparseOperator>,
    y: &Tensor,
    mask: Option<&Tensor>,
) -> Result<StageOutputs> {
    if y.dims() != op.sino_dims() {
        return Err(Error::shape(
            "promptct_forward",
            format!("sinogram {:?} vs {:?}", y.dims(), op.sino_dims()),
        ));
    }
    let eta = ucfg.resolve_eta(op)?;
    let x0 = geometry::fbp(y, &op.spec, &op.views)?;
    let mut tape = Tape::new();
    let ids = build_unfolded(&mut tape, params, lipcfg, ucfg, op, y, mask, &x0, eta)?;
    let [h, w] = op.image_dims();
    let mut stages = Vec::with_capacity(ids.len());
    for (k, id) in ids.iter().enumerate() {
        let img = tape.value(*id).reshaped(&[h, w])?;
        img.check_finite(&format!("stage {k}"))?;
        stages.push(img);
    }
    Ok(StageOutputs { stages, eta })
}

/// Total learnable scalar count.
pub fn parameter_count(params: &ModelParams) -> usize {
    params.total_scalars()
}

/// Write reconstruction outputs: LIPT tensor per stage (when requested),
/// the final image as LIPT, and a 16-bit PGM rendering.
pub fn write_outputs(
    dir: &Path,
    out: &StageOutputs,
    stages_out: bool,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let final_lipt = dir.join("x_final.lipt");
    io::write_tensor(&final_lipt, out.final_image())?;
    written.push(final_lipt);
    let pgm = dir.join("x_final.pgm");
    io::write_pgm16(&pgm, out.final_image())?;
    written.push(pgm);
    if stages_out {
        for (k, stage) in out.stages.iter().enumerate() {
            let p = dir.join(format!("stage_{k}.lipt"));
            io::write_tensor(&p, stage)?;
            written.push(p);
        }
    }
    Ok(written)
}

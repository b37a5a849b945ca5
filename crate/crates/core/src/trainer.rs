//! End-to-end supervised training in three regimes: single-view,
//! multi-view without prompts, multi-view with prompts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{self, SparseOperator};
use crate::lipnet::{self, LipNetConfig};
use crate::params::{self, ModelParams};
use crate::rng;
use crate::simulate::{Dataset, DatasetRecord};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use crate::unfold::{self, UnfoldingConfig};
use crate::verify;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    SingleView(usize),
    MultiNoPrompt,
    MultiPrompt,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        if let Some(v) = s.strip_prefix("single-") {
            let views: usize = v
                .parse()
                .map_err(|_| Error::Argument(format!("bad regime {s:?}")))?;
            return Ok(Regime::SingleView(views));
        }
        match s {
            "multi-noprompt" => Ok(Regime::MultiNoPrompt),
            "multi-prompt" => Ok(Regime::MultiPrompt),
            _ => Err(Error::Argument(format!(
                "unknown regime {s:?} (expected single-<views>, multi-noprompt, multi-prompt)"
            ))),
        }
    }

    pub fn uses_prompt(&self) -> bool {
        matches!(self, Regime::MultiPrompt)
    }

    pub fn label(&self) -> String {
        match self {
            Regime::SingleView(v) => format!("single-{v}"),
            Regime::MultiNoPrompt => "multi-noprompt".into(),
            Regime::MultiPrompt => "multi-prompt".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    /// Samples per optimizer step (the reference schedule uses 1).
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub checkpoint_out: PathBuf,
    pub log_csv: PathBuf,
    pub lipnet: LipNetConfig,
    pub unfold: UnfoldingConfig,
    /// Limit on test records used for per-epoch validation (0 = all).
    pub val_limit: usize,
    /// Limit on training records (0 = all in the dataset).
    pub train_limit: usize,
}

impl TrainConfig {
    /// Desk-scale schedule: 30 epochs, batch 1, Adam(0.5, 0.999) at 1e-4,
    /// loss weights 0.1/0.1.
    pub fn desk_default(
        regime: Regime,
        dataset_dir: PathBuf,
        checkpoint_out: PathBuf,
        seed: u64,
    ) -> Self {
        let log_csv = checkpoint_out.with_extension("log.csv");
        TrainConfig {
            regime,
            epochs: 30,
            batch: 1,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            omega1: 0.1,
            omega2: 0.1,
            seed,
            dataset_dir,
            checkpoint_out,
            log_csv,
            lipnet: LipNetConfig::desk_default(regime.uses_prompt()),
            unfold: UnfoldingConfig::desk_default(),
            val_limit: 8,
            train_limit: 0,
        }
    }
}

/// Adam state per parameter, persisted alongside checkpoints.
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update from the gradients currently held in `params`.
    pub fn apply(&mut self, params: &mut ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let p = params.at_mut(idx);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for j in 0..p.value.len() {
                let g = p.grad.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn save(&self, path: &Path, params: &ModelParams) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (idx, p) in params.iter().enumerate() {
            entries.push((format!("adam.m.{}", p.name), self.m[idx].clone()));
            entries.push((format!("adam.v.{}", p.name), self.v[idx].clone()));
        }
        entries.push(("adam.step".into(), Tensor::scalar(self.step as f64)));
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        params::write_checkpoint(path, &refs)
    }

    pub fn load(&mut self, path: &Path, params: &ModelParams) -> Result<()> {
        let entries = params::read_checkpoint(path)?;
        let map: BTreeMap<&str, &Tensor> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (idx, p) in params.iter().enumerate() {
            let m = map
                .get(format!("adam.m.{}", p.name).as_str())
                .copied()
                .ok_or_else(|| Error::Argument(format!("optimizer state missing {}", p.name)))?;
            let v = map
                .get(format!("adam.v.{}", p.name).as_str())
                .copied()
                .ok_or_else(|| Error::Argument(format!("optimizer state missing {}", p.name)))?;
            self.m[idx] = m.clone();
            self.v[idx] = v.clone();
        }
        self.step = map
            .get("adam.step")
            .ok_or_else(|| Error::Argument("optimizer state missing step".into()))?
            .item()? as u64;
        Ok(())
    }
}

/// Composite supervision over all stages:
/// `sum_k { w1*||x_k - gt||_1 + w2*||x_k - gt||_2^2 } + ||x_final - gt||_2^2`.
pub fn loss_value(stages: &[Tensor], x_final: &Tensor, gt: &Tensor, w1: f64, w2: f64) -> Result<f64> {
    let mut total = 0.0;
    for x in stages {
        if !x.same_dims(gt) {
            return Err(Error::shape("loss", "stage/ground-truth dims differ"));
        }
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (a, b) in x.data().iter().zip(gt.data()) {
            let d = a - b;
            l1 += d.abs();
            l2 += d * d;
        }
        total += w1 * l1 + w2 * l2;
    }
    if !x_final.same_dims(gt) {
        return Err(Error::shape("loss", "final/ground-truth dims differ"));
    }
    total += x_final
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();
    Ok(total)
}

/// Tape version of [`loss_value`] over stage value ids.
pub fn build_loss(
    tape: &mut Tape,
    stages: &[ValueId],
    gt: &Tensor,
    w1: f64,
    w2: f64,
) -> Result<ValueId> {
    let gt3 = gt.reshaped(&[1, gt.dims()[0], gt.dims()[1]])?;
    let gt_id = tape.leaf(gt3);
    let mut total: Option<ValueId> = None;
    for (i, &x) in stages.iter().enumerate() {
        let d = tape.sub(x, gt_id)?;
        let l1 = tape.sum_abs(d)?;
        let l2 = tape.sum_sq(d)?;
        let t1 = tape.affine(l1, w1, 0.0)?;
        // The final stage also carries the unweighted l2 term.
        let w2_eff = if i + 1 == stages.len() { w2 + 1.0 } else { w2 };
        let t2 = tape.affine(l2, w2_eff, 0.0)?;
        let term = tape.add(t1, t2)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Argument("loss over empty stage list".into()))
}

pub struct TrainSummary {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub final_val_psnr: BTreeMap<usize, f64>,
    pub checkpoint: PathBuf,
}

struct Rig {
    ops: BTreeMap<usize, Arc<SparseOperator>>,
    etas: BTreeMap<usize, f64>,
}

fn build_rig(ds: &Dataset, view_counts: &[usize], ucfg: &UnfoldingConfig) -> Result<Rig> {
    let mut ops = BTreeMap::new();
    let mut etas = BTreeMap::new();
    for &vc in view_counts {
        let views = geometry::subsample_views(ds.geometry.n_views_full, vc)?;
        let op = Arc::new(geometry::build_operator(&ds.geometry, &views)?);
        let eta = ucfg.resolve_eta(&op)?;
        ops.insert(vc, op);
        etas.insert(vc, eta);
    }
    Ok(Rig { ops, etas })
}

fn validate_psnr(
    params: &ModelParams,
    lipcfg: &LipNetConfig,
    ucfg: &UnfoldingConfig,
    rig: &Rig,
    records: &[DatasetRecord],
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (&vc, op) in &rig.ops {
        let mut acc = 0.0;
        let mut count = 0usize;
        for rec in records {
            let (Some(sino), Some(mask)) = (rec.sino(vc), rec.mask(vc)) else {
                continue;
            };
            let ucfg_eta = UnfoldingConfig {
                eta: Some(rig.etas[&vc]),
                ..ucfg.clone()
            };
            let rec_out =
                unfold::promptct_forward(params, lipcfg, &ucfg_eta, op, sino, Some(mask))?;
            acc += verify::psnr(rec_out.final_image(), &rec.gt)?;
            count += 1;
        }
        if count > 0 {
            out.insert(vc, acc / count as f64);
        }
    }
    Ok(out)
}

/// Run the full training loop; writes a checkpoint plus optimizer state
/// after every epoch and appends one CSV row per epoch. A non-finite loss
/// aborts, leaving the last epoch's checkpoint on disk.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    if cfg.batch != 1 {
        return Err(Error::Argument("train: only batch size 1 is supported".into()));
    }
    let mut lipcfg = cfg.lipnet.clone();
    lipcfg.prompt = cfg.regime.uses_prompt();
    lipcfg.validate()?;
    cfg.unfold.validate()?;

    let ds = Dataset::open(&cfg.dataset_dir)?;
    let train_views: Vec<usize> = match cfg.regime {
        Regime::SingleView(v) => {
            if !ds.view_counts.contains(&v) {
                return Err(Error::Argument(format!(
                    "dataset has view counts {:?}, regime wants {v}",
                    ds.view_counts
                )));
            }
            vec![v]
        }
        _ => ds.view_counts.clone(),
    };
    let rig = build_rig(&ds, &ds.view_counts, &cfg.unfold)?;

    let n_train = if cfg.train_limit == 0 {
        ds.n_train
    } else {
        ds.n_train.min(cfg.train_limit)
    };
    let mut train_recs = Vec::with_capacity(n_train);
    for i in 0..n_train {
        train_recs.push(ds.load_record("train", i)?);
    }
    let n_val = if cfg.val_limit == 0 {
        ds.n_test
    } else {
        ds.n_test.min(cfg.val_limit)
    };
    let mut val_recs = Vec::with_capacity(n_val);
    for i in 0..n_val {
        val_recs.push(ds.load_record("test", i)?);
    }

    let mut params = lipnet::init_params(&lipcfg, cfg.seed)?;
    let mut adam = OptimizerState::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    let mut log = fs::File::create(&cfg.log_csv).map_err(|e| Error::io(&cfg.log_csv, e))?;
    writeln!(log, "epoch,regime,loss,psnr60,psnr90,psnr120,psnr180")
        .map_err(|e| Error::io(&cfg.log_csv, e))?;

    let pairs: Vec<(usize, usize)> = (0..train_recs.len())
        .flat_map(|r| train_views.iter().map(move |&v| (r, v)))
        .collect();

    let mut epoch_losses = Vec::new();
    let mut last_val = BTreeMap::new();
    for epoch in 1..=cfg.epochs {
        let mut order = pairs.clone();
        let mut shuffle_rng = rng::stream(cfg.seed, &format!("epoch.{epoch}"));
        order.shuffle(&mut shuffle_rng);

        let mut loss_acc = 0.0;
        for (step_idx, &(ri, vc)) in order.iter().enumerate() {
            let rec = &train_recs[ri];
            let op = &rig.ops[&vc];
            let sino = rec
                .sino(vc)
                .ok_or_else(|| Error::Argument(format!("record lacks {vc}-view sinogram")))?;
            let mask = rec.mask(vc);
            let x0 = geometry::fbp(sino, &op.spec, &op.views)?;
            let mut tape = Tape::new();
            let stages = unfold::build_unfolded(
                &mut tape,
                &params,
                &lipcfg,
                &cfg.unfold,
                op,
                sino,
                mask,
                &x0,
                rig.etas[&vc],
            )?;
            let loss_id = build_loss(&mut tape, &stages, &rec.gt, cfg.omega1, cfg.omega2)?;
            let loss = tape.value(loss_id).item()?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    context: format!("train epoch {epoch} step {step_idx} (record {ri}, {vc} views)"),
                });
            }
            loss_acc += loss;
            params.zero_grads();
            tape.backward(loss_id, &mut params)?;
            adam.apply(&mut params);
        }
        let mean_loss = loss_acc / order.len() as f64;
        epoch_losses.push(mean_loss);

        last_val = validate_psnr(&params, &lipcfg, &cfg.unfold, &rig, &val_recs)?;
        let fmt = |vc: usize| -> String {
            last_val
                .get(&vc)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "nan".into())
        };
        writeln!(
            log,
            "{epoch},{},{mean_loss:.6},{},{},{},{}",
            cfg.regime.label(),
            fmt(60),
            fmt(90),
            fmt(120),
            fmt(180)
        )
        .map_err(|e| Error::io(&cfg.log_csv, e))?;

        // Atomic-ish checkpoint update keeps the previous epoch on failure.
        let tmp = cfg.checkpoint_out.with_extension("tmp");
        lipnet::save_model(&tmp, &params, &lipcfg, cfg.unfold.k_stages)?;
        fs::rename(&tmp, &cfg.checkpoint_out).map_err(|e| Error::io(&cfg.checkpoint_out, e))?;
        let opt_path = cfg.checkpoint_out.with_extension("opt.lipc");
        adam.save(&opt_path, &params)?;
    }

    Ok(TrainSummary {
        epochs_run: cfg.epochs,
        epoch_losses,
        final_val_psnr: last_val,
        checkpoint: cfg.checkpoint_out.clone(),
    })
}

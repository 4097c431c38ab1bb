//! Unsupervised training loop: pool of autoregressive flow states,
//! minibatching over disjoint graph unions, hard Dirichlet imposition on
//! network outputs, residual loss, and AdamW.

use crate::diffengine::Tape;
use crate::error::{Error, Result};
use crate::gnmodel::{
    field_from_var, field_var, forward_on_tape, save_checkpoint, GNConfig, GNParamVars, GNParams,
    GraphPrep,
};
use crate::graph::{build_physical_graph, to_computational_graph, CompGraph, PhysGraph};
use crate::mesh::MultiBlockMesh;
use crate::metrics::{compute_metrics, MetricField};
use crate::residual::{FlowField, GcAssembly, LossWeights};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

/// One geometry with every derived structure the trainer needs.
pub struct Case {
    pub name: String,
    pub pg: PhysGraph,
    pub cg: CompGraph,
    pub metrics: MetricField,
    pub prep: GraphPrep,
    bc_mask: Rc<Array2<f64>>,
    bc_vals: Rc<Array2<f64>>,
}

impl Case {
    pub fn build(mesh: &MultiBlockMesh, name: impl Into<String>) -> Result<Self> {
        let pg = build_physical_graph(mesh);
        let cg = to_computational_graph(&pg, mesh);
        let metrics = compute_metrics(mesh, &cg)?;
        let prep = GraphPrep::new(&pg)?;
        let n = pg.n_nodes;
        let mut mask = Array2::ones((n, 3));
        let mut vals = Array2::zeros((n, 3));
        for r in 0..n {
            if pg.node_type[r].is_dirichlet() {
                let (u, v) = pg.bc_velocity[r].unwrap_or((0.0, 0.0));
                mask[[r, 0]] = 0.0;
                mask[[r, 1]] = 0.0;
                vals[[r, 0]] = u;
                vals[[r, 1]] = v;
            }
        }
        if let Some(a) = pg.pressure_anchor {
            mask[[a, 2]] = 0.0;
        }
        Ok(Self {
            name: name.into(),
            pg,
            cg,
            metrics,
            prep,
            bc_mask: Rc::new(mask),
            bc_vals: Rc::new(vals),
        })
    }

    /// Hard Dirichlet assignment on an (n, 3) output var: masked entries
    /// are replaced by the boundary values exactly.
    pub fn impose_bc_on_tape(
        &self,
        t: &mut Tape,
        out: crate::diffengine::Var,
    ) -> Result<crate::diffengine::Var> {
        let masked = t.mul_const(out, Rc::clone(&self.bc_mask))?;
        t.add_const(masked, Rc::clone(&self.bc_vals))
    }
}

/// Hard Dirichlet assignment on a plain field.
pub fn impose_bc(field: &mut FlowField, pg: &PhysGraph) {
    for r in 0..pg.n_nodes {
        if pg.node_type[r].is_dirichlet() {
            let (u, v) = pg.bc_velocity[r].unwrap_or((0.0, 0.0));
            field.u[r] = u;
            field.v[r] = v;
        }
    }
    if let Some(a) = pg.pressure_anchor {
        field.p[a] = 0.0;
    }
}

pub struct PoolEntry {
    pub case: Rc<Case>,
    pub re: f64,
    pub asm: GcAssembly,
    pub field: FlowField,
    pub t: usize,
}

/// One pool entry per (geometry, Re) pair, replicated `replication`
/// times; fields start from zero.
pub fn init_pool(cases: &[(Rc<Case>, Vec<f64>)], replication: usize) -> Result<Vec<PoolEntry>> {
    if replication == 0 {
        return Err(Error::InvalidArg("replication factor must be positive".into()));
    }
    let mut pool = Vec::new();
    for (case, res) in cases {
        for &re in res {
            for _ in 0..replication {
                pool.push(PoolEntry {
                    case: Rc::clone(case),
                    re,
                    asm: GcAssembly::new(&case.pg, &case.cg, &case.metrics, re)?,
                    field: FlowField::zeros(case.pg.n_nodes),
                    t: 0,
                });
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::InvalidArg("empty dataset".into()));
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gn: GNConfig,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub t_max: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_epoch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub replication: usize,
    pub checkpoint_every: usize,
    /// Weight of the roughness regularizer added to the training
    /// objective (the reported loss stays the plain residual loss).
    pub smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gn: GNConfig::default(),
            batch_size: 4,
            batches_per_epoch: 24,
            t_max: 300,
            lr: 1e-4,
            lr_decay: 0.1,
            decay_epoch: 10000,
            epochs: 25000,
            weights: LossWeights::default(),
            seed: 0,
            replication: 1,
            checkpoint_every: 500,
            smoothing: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.batches_per_epoch == 0
            || self.t_max == 0
            || self.epochs == 0
            || self.lr <= 0.0
            || self.lr_decay <= 0.0
            || self.replication == 0
            || self.checkpoint_every == 0
            || self.smoothing < 0.0
        {
            return Err(Error::InvalidArg("training config fields must be positive".into()));
        }
        if self.decay_epoch >= self.epochs {
            return Err(Error::InvalidArg("decay epoch must precede the final epoch".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Adaptive moments with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &GNParams, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> =
            params.tensors().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update over the parameter tensors, gradient order matching
/// `GNParams::tensors`.
pub fn optimizer_step(
    params: &mut GNParams,
    grads: &[Array2<f64>],
    state: &mut AdamW,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} tensors",
            grads.len(),
            tensors.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (k, theta) in tensors.iter_mut().enumerate() {
        let g = &grads[k];
        if g.dim() != theta.dim() {
            return Err(Error::Shape(format!("gradient {k} shape {:?}", g.dim())));
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(&mut **theta)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|th, m, v, &g| {
                *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *th -= lr * mhat / (vhat.sqrt() + state.eps);
                *th -= lr * state.weight_decay * *th;
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub loss: f64,
    /// Unweighted mean squares: continuity, momentum x, momentum y, outlet.
    pub mse: [f64; 4],
}

/// Sample `k` distinct pool indices.
fn sample_batch(pool_len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = k.min(pool_len);
    let mut ids: Vec<usize> = (0..pool_len).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool_len);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids
}

/// One minibatch step: disjoint-union batch, forward, hard BCs, residual
/// loss, backward, optimizer update, pool write-back.
pub fn train_step(
    pool: &mut [PoolEntry],
    params: &mut GNParams,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    lr: f64,
) -> Result<StepRecord> {
    let batch = sample_batch(pool.len(), cfg.batch_size, rng);
    let preps: Vec<&GraphPrep> = batch.iter().map(|&i| &pool[i].case.prep).collect();
    let asms: Vec<&GcAssembly> = batch.iter().map(|&i| &pool[i].asm).collect();
    let prep = GraphPrep::disjoint_union(&preps)?;
    let asm = GcAssembly::disjoint_union(&asms)?;
    let masks: Vec<_> = batch.iter().map(|&i| pool[i].case.bc_mask.view()).collect();
    let vals: Vec<_> = batch.iter().map(|&i| pool[i].case.bc_vals.view()).collect();
    let bc_mask = Rc::new(ndarray::concatenate(ndarray::Axis(0), &masks).expect("mask concat"));
    let bc_vals = Rc::new(ndarray::concatenate(ndarray::Axis(0), &vals).expect("vals concat"));

    let mut input = FlowField::zeros(0);
    for &i in &batch {
        input.u.extend_from_slice(&pool[i].field.u);
        input.v.extend_from_slice(&pool[i].field.v);
        input.p.extend_from_slice(&pool[i].field.p);
    }

    let mut t = Tape::new();
    let pv = GNParamVars::leaves(&mut t, params);
    let f = field_var(&mut t, &input);
    let out = forward_on_tape(&mut t, &prep, &pv, f)?;
    let masked = t.mul_const(out, bc_mask)?;
    let imposed = t.add_const(masked, bc_vals)?;
    let u = t.slice_cols(imposed, 0, 1)?;
    let v = t.slice_cols(imposed, 1, 2)?;
    let p = t.slice_cols(imposed, 2, 3)?;
    let r = asm.residuals(&mut t, u, v, p)?;
    let mut l = asm.loss(&mut t, &r, &cfg.weights)?;
    let loss_val = t.scalar(l);
    if cfg.smoothing > 0.0 {
        // The residual alone admits odd-even decoupled minimizers; a small
        // roughness term steers the learned fixed point onto the smooth
        // (physical) member of the discrete solution family.
        let s = asm.roughness(&mut t, u, v, p)?;
        let s = t.scale(s, cfg.smoothing);
        l = t.add(l, s)?;
    }
    if !loss_val.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss_val} on batch {batch:?} (Re {:?})",
            batch.iter().map(|&i| pool[i].re).collect::<Vec<_>>()
        )));
    }
    let mse = asm.mse_breakdown(&t, &r);
    t.backward(l)?;
    let grads: Vec<Array2<f64>> = pv
        .vars()
        .iter()
        .map(|&v| t.grad(v).cloned().unwrap_or_else(|| Array2::zeros(t.value(v).dim())))
        .collect();
    optimizer_step(params, &grads, opt, lr)?;

    let predicted = field_from_var(&t, imposed);
    let mut at = 0;
    for &i in &batch {
        let n = pool[i].case.pg.n_nodes;
        pool[i].field.u.copy_from_slice(&predicted.u[at..at + n]);
        pool[i].field.v.copy_from_slice(&predicted.v[at..at + n]);
        pool[i].field.p.copy_from_slice(&predicted.p[at..at + n]);
        at += n;
        pool[i].t += 1;
        if pool[i].t >= cfg.t_max {
            pool[i].field = FlowField::zeros(n);
            pool[i].t = 0;
        }
    }
    Ok(StepRecord { loss: loss_val, mse })
}

pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_loss: f64,
    pub steps: usize,
}

/// Full training run; writes the config, a loss-history CSV, periodic
/// checkpoints, and the final model into `out_dir`.
pub fn run_training(
    cases: &[(Rc<Case>, Vec<f64>)],
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut pool = init_pool(cases, cfg.replication)?;
    let mut params = GNParams::init(cfg.gn, cfg.seed);
    let mut opt = AdamW::new(&params, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let history_path = out_dir.join("history.csv");
    let mut history = std::io::BufWriter::new(std::fs::File::create(&history_path)?);
    writeln!(history, "step,epoch,lr,loss,L_cont,L_momx,L_momy,L_p")?;

    let w = cfg.weights;
    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for _ in 0..cfg.batches_per_epoch {
            step += 1;
            let rec = train_step(&mut pool, &mut params, &mut opt, cfg, &mut rng, lr)?;
            last_loss = rec.loss;
            writeln!(
                history,
                "{step},{epoch},{lr},{},{},{},{},{}",
                rec.loss,
                w.alpha * rec.mse[0],
                w.beta * rec.mse[1],
                w.lambda * rec.mse[2],
                w.zeta * rec.mse[3],
            )?;
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            save_checkpoint(&params, out_dir.join(format!("ckpt_{:06}.ckpt", epoch + 1)))?;
        }
    }
    history.flush()?;
    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&params, &checkpoint)?;
    Ok(TrainReport { checkpoint, history: history_path, final_loss: last_loss, steps: step })
}

/// Autoregressive inference: roll the network forward from the zero field
/// with hard BCs imposed after every pass.
pub fn infer(params: &GNParams, case: &Case, steps: usize) -> Result<FlowField> {
    let mut field = FlowField::zeros(case.pg.n_nodes);
    for _ in 0..steps {
        let mut t = Tape::new();
        let pv = GNParamVars::leaves(&mut t, params);
        let f = field_var(&mut t, &field);
        let out = forward_on_tape(&mut t, &case.prep, &pv, f)?;
        let imposed = case.impose_bc_on_tape(&mut t, out)?;
        field = field_from_var(&t, imposed);
    }
    Ok(field)
}

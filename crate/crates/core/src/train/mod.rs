//! Fine-tuning: objective, optimizer, schedule, synthetic tasks, ablations.
//!
//! Only adapter banks and the prediction head (plus, optionally, layer-norm
//! parameters) are updated; the backbone digest is checked before and after
//! every run.

mod ablate;
mod config;
mod optim;
mod task;

use std::fmt::Write as _;

pub use ablate::{ablate, AblationRow, AblationVariant, ABLATION_VARIANTS};
pub use config::{parse_key_values, set_vit_field, TrainConfig};
pub use optim::{cosine_lr, AdamW};
pub use task::{Sample, SyntheticTask, TaskSpec};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, FlopCount, Matrix, Tape, Var};
use crate::lrm::{AdapterBank, AdapterConfig, Variant};
use crate::sade::{rsr_on_tape, rsr_term, sr_on_tape, ExpertSet};
use crate::vit::{
    forward, forward_on_tape, merge_adapters, AdapterVars, Adapters, AttachMode, Placement,
    Trainable, VitConfig, VitVars, VitWeights,
};

/// Mean cross-entropy of `logits` (b×k) plus `(alpha/d²)·Σ_j rsr_term(experts_j)`.
pub fn objective(
    logits: &Matrix,
    labels: &[usize],
    experts: &[ExpertSet],
    alpha: f64,
    d: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, labels)?;
    let ce = tape.scalar(ce)?;
    let reg: f64 = experts.iter().map(rsr_term).sum();
    Ok(ce + alpha / (d * d) as f64 * reg)
}

/// Which diversity term a run adds to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    /// Weight-space term, once per step.
    Rsr,
    /// Token-level term over the batch's module inputs.
    Sr,
}

impl Regularizer {
    pub fn for_run(config: &TrainConfig, adapters: Option<&Adapters>) -> Self {
        match adapters {
            Some(a) if config.sade_on && a.bank.variant() == Variant::Clora => {
                if config.sample_dependent_sr {
                    Regularizer::Sr
                } else {
                    Regularizer::Rsr
                }
            }
            _ => Regularizer::None,
        }
    }
}

/// Zero-initialized adapters as selected by the variant flags, or `None`
/// when no insertion site is enabled.
pub fn build_adapters(config: &TrainConfig, vit: &VitConfig) -> Result<Option<Adapters>> {
    if config.head_only() {
        return Ok(None);
    }
    let (mode, placement) = if config.qv_mode {
        (AttachMode::QvUpdate, Placement::BOTH)
    } else {
        let placement = Placement {
            mha: config.insert_mha,
            ffn: config.insert_ffn,
        };
        (AttachMode::PreBlock, placement)
    };
    let adapter_config = AdapterConfig {
        d: vit.d,
        r: config.r,
        m: placement.per_layer() * vit.layers,
        p: config.p,
        variant: if config.naive_sum_mode {
            Variant::NaiveSum
        } else {
            Variant::Clora
        },
    };
    let mut rng = seeded_rng(config.seed.wrapping_add(0xada9_7e25));
    let bank = AdapterBank::init(&adapter_config, &mut rng)?;
    Adapters::new(bank, mode, placement, vit).map(Some)
}

/// Loss node of one mini-batch and the forward flops of its regularizer.
pub struct BatchGraph {
    pub loss: Var,
    pub cross_entropy: Var,
    pub regularizer: Option<Var>,
    pub regularizer_flops: FlopCount,
}

/// Builds the training objective for `batch` on `tape`.
pub fn batch_objective(
    tape: &mut Tape,
    vars: &VitVars,
    adapters: Option<&AdapterVars<'_>>,
    batch: &[&Sample],
    regularizer: Regularizer,
    alpha: f64,
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut inputs = Vec::with_capacity(batch.len());
    for s in batch {
        let x = tape.constant(s.patches.clone());
        let trace = forward_on_tape(tape, vars, x, adapters)?;
        logits.push(trace.logits);
        inputs.push(trace.lrm_inputs);
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let stacked = tape.concat_rows(&logits)?;
    let ce = tape.cross_entropy(stacked, &labels)?;

    let before = tape.flops();
    let reg = match (regularizer, adapters) {
        (Regularizer::None, _) | (_, None) => None,
        (kind, Some(av)) => {
            let mut terms = Vec::new();
            for (j, term) in av.terms.iter().enumerate() {
                let t = match kind {
                    Regularizer::Rsr => rsr_on_tape(tape, &term.experts)?,
                    _ => {
                        let tokens: Vec<Var> = inputs
                            .iter()
                            .flat_map(|per_sample| {
                                per_sample.iter().filter(|(k, _)| *k == j).map(|(_, v)| *v)
                            })
                            .collect();
                        let tokens = tape.concat_rows(&tokens)?;
                        let sr = sr_on_tape(tape, tokens, &term.experts)?;
                        tape.scale(sr, 1.0 / batch.len() as f64)
                    }
                };
                terms.push(t);
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            let d = vars.config.d as f64;
            Some(tape.scale(total, alpha / (d * d)))
        }
    };
    let regularizer_flops = tape.flops().since(before);
    let loss = match reg {
        Some(r) => tape.add(ce, r)?,
        None => ce,
    };
    Ok(BatchGraph {
        loss,
        cross_entropy: ce,
        regularizer: reg,
        regularizer_flops,
    })
}

/// Classification accuracy, evaluated on the merged (adapter-free) weights.
pub fn evaluate(
    weights: &VitWeights,
    adapters: Option<&Adapters>,
    samples: &[Sample],
) -> Result<f64> {
    let merged;
    let w = match adapters {
        Some(a) => {
            merged = merge_adapters(weights, a)?;
            &merged
        }
        None => weights,
    };
    let mut correct = 0usize;
    for s in samples {
        let logits = forward(&s.patches, w, None)?;
        let row = logits.row(0);
        let pred = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
        correct += (pred == s.label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Sum of the weight-space diversity term over every module of a CLoRA bank.
pub fn rsr_sum(adapters: Option<&Adapters>) -> Result<f64> {
    let Some(a) = adapters else { return Ok(0.0) };
    let mut total = 0.0;
    for j in 0..a.bank.m() {
        if let Some(experts) = a.bank.experts(j)? {
            total += rsr_term(&experts);
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub rsr_sum: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedResult {
    pub weights: VitWeights,
    pub adapters: Option<Adapters>,
    pub history: Vec<EpochRecord>,
    /// Forward and backward flops over the whole run.
    pub flops: FlopCount,
    /// Forward flops of the regularizer subgraph over the whole run.
    pub regularizer_flops: FlopCount,
    pub digest_before: String,
    pub digest_after: String,
}

impl TrainedResult {
    pub fn final_val_acc(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.val_acc)
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,rsr_sum,lr\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{:.10e},{:.6},{:.10e},{:.10e}",
                r.epoch, r.train_loss, r.val_acc, r.rsr_sum, r.lr
            );
        }
        out
    }
}

/// Fine-tunes the adapters and head of `weights` on `task`.
pub fn train(
    task: &SyntheticTask,
    weights: &VitWeights,
    adapters: Option<Adapters>,
    config: &TrainConfig,
) -> Result<TrainedResult> {
    config.validate()?;
    task.spec.fits(&weights.config)?;
    if weights.merged {
        return Err(Error::DoubleMerge);
    }
    let digest_before = weights.backbone_digest();
    let mut weights = weights.clone();
    let mut adapters = adapters;
    let regularizer = Regularizer::for_run(config, adapters.as_ref());
    let trainable = Trainable {
        head: true,
        layer_norm: config.tune_layer_norm,
    };
    let mut rng = seeded_rng(config.seed);
    let mut opt = AdamW::new(config.weight_decay);
    let steps_per_epoch = task.train.len().div_ceil(config.batch);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let mut history = Vec::with_capacity(config.epochs);
    let mut flops = FlopCount::default();
    let mut regularizer_flops = FlopCount::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = task.shuffled_indices(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch) {
            lr = cosine_lr(step, total_steps, warmup_steps, config.lr);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
            let mut tape = Tape::new();
            let vars = VitVars::register(&weights, &mut tape, trainable);
            let av = adapters
                .as_ref()
                .map(|a| AdapterVars::register(a, &mut tape))
                .transpose()?;
            let graph = batch_objective(
                &mut tape,
                &vars,
                av.as_ref(),
                &batch,
                regularizer,
                config.alpha,
            )?;
            let loss = tape.scalar(graph.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let mut param_vars = av.as_ref().map(|a| a.bank.param_vars()).unwrap_or_default();
            param_vars.extend(vars.trainable_vars(trainable));
            drop(av);
            let mut grads = tape.backward(graph.loss)?;
            let grads: Vec<Matrix> = param_vars
                .iter()
                .map(|&v| {
                    grads
                        .take(v)
                        .ok_or_else(|| Error::Contract("missing parameter gradient".into()))
                })
                .collect::<Result<_>>()?;
            let mut params: Vec<&mut Matrix> = adapters
                .as_mut()
                .map(|a| a.bank.params_mut())
                .unwrap_or_default();
            params.extend(weights.trainable_params_mut(trainable));
            opt.step(params, &grads, lr)?;

            flops += tape.flops();
            regularizer_flops += graph.regularizer_flops;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / task.train.len() as f64,
            val_acc: evaluate(&weights, adapters.as_ref(), &task.val)?,
            rsr_sum: rsr_sum(adapters.as_ref())?,
            lr,
        });
    }
    let digest_after = weights.backbone_digest();
    if digest_after != digest_before {
        return Err(Error::Contract(
            "backbone weights changed during fine-tuning".into(),
        ));
    }
    Ok(TrainedResult {
        weights,
        adapters,
        history,
        flops,
        regularizer_flops,
        digest_before,
        digest_after,
    })
}

/// Forward flops of one evaluation of the token-level and the weight-space
/// diversity terms on random experts: `(sr, rsr)`.
pub fn measure_regularizer_flops(
    d: usize,
    n: usize,
    b: usize,
    p: usize,
    seed: u64,
) -> Result<(FlopCount, FlopCount)> {
    let mut rng = seeded_rng(seed);
    let experts: Vec<Matrix> = (0..p)
        .map(|_| Matrix::random_normal(d, d, 1.0, &mut rng))
        .collect();
    let tokens = Matrix::random_normal((n + 1) * b, d, 1.0, &mut rng);

    let mut tape = Tape::new();
    let ev: Vec<Var> = experts.iter().map(|m| tape.param(m.clone())).collect();
    let tv = tape.constant(tokens);
    let before = tape.flops();
    sr_on_tape(&mut tape, tv, &ev)?;
    let sr = tape.flops().since(before);

    let mut tape = Tape::new();
    let ev: Vec<Var> = experts.iter().map(|m| tape.param(m.clone())).collect();
    let before = tape.flops();
    rsr_on_tape(&mut tape, &ev)?;
    let rsr = tape.flops().since(before);
    Ok((sr, rsr))
}

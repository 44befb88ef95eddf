//! End-to-end numerical checks shared by the CLI and the test suites.

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, FlopCount, Matrix, Tape};
use crate::lrm::{AdapterBank, AdapterConfig, BaseSpace, LrmBank, Variant};
use crate::train::{batch_objective, Regularizer, Sample};
use crate::vit::{
    forward_with_flops, merge_adapters, AdapterVars, Adapters, AttachMode, Placement, Trainable,
    VitConfig, VitVars, VitWeights,
};

/// A toy encoder shape used by the checks: 4 patches of 3·2² values, FFN
/// width 2d, two classes.
pub fn toy_config(d: usize, layers: usize, heads: usize) -> VitConfig {
    VitConfig {
        d,
        layers,
        heads,
        n: 4,
        patch_dim: 12,
        ffn_hidden: 2 * d,
        classes: 2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    pub mode: AttachMode,
    pub inputs: usize,
    pub max_rel_err: f64,
    pub merged_flops: FlopCount,
    pub frozen_flops: FlopCount,
}

impl MergeReport {
    pub fn flops_equal(&self) -> bool {
        self.merged_flops == self.frozen_flops
    }
}

/// Random backbone and random (nonzero) CLoRA adapters; compares the adapted
/// forward pass with the merged one on `inputs` random samples.
pub fn merge_check(
    config: VitConfig,
    mode: AttachMode,
    rank: usize,
    p: usize,
    inputs: usize,
    seed: u64,
) -> Result<MergeReport> {
    let mut rng = seeded_rng(seed);
    let weights = VitWeights::init(config, &mut rng)?;
    let bank = AdapterBank::random(
        &AdapterConfig {
            d: config.d,
            r: rank,
            m: 2 * config.layers,
            p,
            variant: Variant::Clora,
        },
        &mut rng,
    )?;
    // Keep ‖ΔW‖ moderate so the check probes the algebra, not overflow.
    let bank = scale_bank(bank, 0.1);
    let adapters = Adapters::new(bank, mode, Placement::BOTH, &config)?;
    let merged = merge_adapters(&weights, &adapters)?;
    let mut max_rel_err = 0.0f64;
    let mut merged_flops = FlopCount::default();
    let mut frozen_flops = FlopCount::default();
    for _ in 0..inputs {
        let x = Matrix::random_normal(config.n, config.patch_dim, 1.0, &mut rng);
        let (adapted, _) = forward_with_flops(&x, &weights, Some(&adapters))?;
        let (folded, mf) = forward_with_flops(&x, &merged, None)?;
        let (_, ff) = forward_with_flops(&x, &weights, None)?;
        max_rel_err = max_rel_err.max(folded.max_rel_diff(&adapted)?);
        merged_flops += mf;
        frozen_flops += ff;
    }
    Ok(MergeReport {
        mode,
        inputs,
        max_rel_err,
        merged_flops,
        frozen_flops,
    })
}

fn scale_bank(mut bank: AdapterBank, s: f64) -> AdapterBank {
    if let AdapterBank::Clora(_) = bank {
        let m = bank.m();
        let p = bank.p();
        // Coefficients follow the bases in parameter order.
        let skip = 2 * p;
        for (i, t) in bank.params_mut().into_iter().enumerate() {
            if i >= skip && i < skip + m * p {
                *t = t.scale(s);
            }
        }
    }
    bank
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Scalars perturbed.
    pub checked: usize,
    /// Largest per-tensor `max|analytic − numeric| / max|numeric|`.
    pub max_rel_err: f64,
    pub loss: f64,
}

/// Central finite differences of the full objective (cross-entropy of one
/// sample plus the diversity term) against the tape gradient, for every
/// adapter scalar of a pre-block CLoRA bank with `m = 2L` modules.
///
/// `p` may equal `m` here; the check is about calculus, not sharing.
pub fn gradient_check(
    config: VitConfig,
    p: usize,
    rank: usize,
    alpha: f64,
    regularizer: Regularizer,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(seed);
    let weights = VitWeights::init(config, &mut rng)?;
    let m = 2 * config.layers;
    let base = BaseSpace::init(config.d, rank, p, &mut rng);
    let coeffs = (0..m)
        .map(|_| {
            (0..p)
                .map(|_| Matrix::random_normal(rank, rank, 0.5, &mut rng))
                .collect()
        })
        .collect();
    let bank = AdapterBank::Clora(LrmBank::new(base, coeffs)?);
    let adapters = Adapters::new(bank, AttachMode::PreBlock, Placement::BOTH, &config)?;
    let sample = Sample {
        patches: Matrix::random_normal(config.n, config.patch_dim, 1.0, &mut rng),
        label: 1 % config.classes,
    };

    let eval = |adapters: &Adapters, want_grad: bool| -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let vars = VitVars::register(
            &weights,
            &mut tape,
            Trainable {
                head: true,
                layer_norm: false,
            },
        );
        let av = AdapterVars::register(adapters, &mut tape)?;
        let graph = batch_objective(&mut tape, &vars, Some(&av), &[&sample], regularizer, alpha)?;
        let loss = tape.scalar(graph.loss)?;
        if !want_grad {
            return Ok((loss, Vec::new()));
        }
        let pv = av.bank.param_vars();
        let mut g = tape.backward(graph.loss)?;
        let grads = pv
            .iter()
            .map(|&v| {
                g.take(v)
                    .ok_or_else(|| Error::Contract("missing gradient".into()))
            })
            .collect::<Result<_>>()?;
        Ok((loss, grads))
    };

    let (loss, analytic) = eval(&adapters, true)?;
    let eps = 1e-5;
    let mut checked = 0;
    let mut max_rel_err = 0.0f64;
    for (t, a) in analytic.iter().enumerate() {
        let mut numeric = Matrix::zeros(a.rows(), a.cols());
        for k in 0..a.len() {
            let mut probe = adapters.clone();
            let shift = |delta: f64, probe: &mut Adapters| {
                let mut params = probe.bank.params_mut();
                params[t].data_mut()[k] += delta;
            };
            shift(eps, &mut probe);
            let (plus, _) = eval(&probe, false)?;
            shift(-2.0 * eps, &mut probe);
            let (minus, _) = eval(&probe, false)?;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * eps);
            checked += 1;
        }
        let scale = numeric.max_abs().max(1e-12);
        max_rel_err = max_rel_err.max(a.max_abs_diff(&numeric)? / scale);
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        loss,
    })
}

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{build_adapters, train, Regularizer, SyntheticTask, TrainConfig};
use crate::error::Result;
use crate::linalg::FlopCount;
use crate::vit::{AttachMode, VitWeights};

/// One row of the ablation matrix, as flag overrides on a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub insert_mha: bool,
    pub insert_ffn: bool,
    pub sade_on: bool,
    pub qv_mode: bool,
    pub naive_sum_mode: bool,
    pub sample_dependent_sr: bool,
}

const fn variant(name: &'static str, mha: bool, ffn: bool, sade: bool) -> AblationVariant {
    AblationVariant {
        name,
        insert_mha: mha,
        insert_ffn: ffn,
        sade_on: sade,
        qv_mode: false,
        naive_sum_mode: false,
        sample_dependent_sr: false,
    }
}

pub const ABLATION_VARIANTS: [AblationVariant; 7] = [
    variant("CLoRA", true, true, true),
    variant("CLoRAMF", true, true, false),
    variant("CLoRAMS", true, false, true),
    variant("CLoRAFS", false, true, true),
    AblationVariant {
        qv_mode: true,
        ..variant("CLoRA(QV)", true, true, true)
    },
    AblationVariant {
        naive_sum_mode: true,
        ..variant("CLoRA#", true, true, false)
    },
    AblationVariant {
        sample_dependent_sr: true,
        ..variant("CLoRA*", true, true, true)
    },
];

impl AblationVariant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            insert_mha: self.insert_mha,
            insert_ffn: self.insert_ffn,
            sade_on: self.sade_on,
            qv_mode: self.qv_mode,
            naive_sum_mode: self.naive_sum_mode,
            sample_dependent_sr: self.sample_dependent_sr,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub mode: AttachMode,
    /// Modules actually placed before MHA and before FFN.
    pub mha_modules: usize,
    pub ffn_modules: usize,
    pub regularizer: Regularizer,
    /// Trainable adapter scalars plus head.
    pub param_count: usize,
    pub val_accs: Vec<f64>,
    pub mean_val_acc: f64,
    /// Regularizer forward flops averaged over seeds.
    pub regularizer_flops: FlopCount,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "variant,mode,mha_modules,ffn_modules,regularizer,param_count,mean_val_acc,val_accs,regularizer_flops\n"
    }

    pub fn csv_line(&self) -> String {
        let accs: Vec<String> = self.val_accs.iter().map(|a| format!("{a:.6}")).collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},{:?},{},{},{:?},{},{:.6},{},{}",
            self.variant.name,
            self.mode,
            self.mha_modules,
            self.ffn_modules,
            self.regularizer,
            self.param_count,
            self.mean_val_acc,
            accs.join(";"),
            self.regularizer_flops.total()
        );
        out
    }
}

/// Trains every variant on every seed with identical budgets.
pub fn ablate(
    task: &SyntheticTask,
    weights: &VitWeights,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, u64)> = (0..ABLATION_VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let config = TrainConfig {
                seed,
                ..ABLATION_VARIANTS[v].apply(base)
            };
            let adapters = build_adapters(&config, &weights.config)?;
            train(task, weights, adapters, &config)
        })
        .collect::<Result<Vec<_>>>()?;

    let head = weights.config.head_params();
    let mut rows = Vec::new();
    for (v, chunk) in runs.chunks(seeds.len().max(1)).enumerate() {
        let variant = ABLATION_VARIANTS[v];
        let config = variant.apply(base);
        let adapters = build_adapters(&config, &weights.config)?;
        let (mode, mha_modules, ffn_modules, param_count) = match &adapters {
            Some(a) => {
                let layers = weights.config.layers;
                let (mha, ffn) = (0..layers).fold((0, 0), |(m, f), l| {
                    let (sa, sb) = a.slots(l);
                    (m + sa.is_some() as usize, f + sb.is_some() as usize)
                });
                (a.mode, mha, ffn, a.bank.scalar_count() + head)
            }
            None => (AttachMode::None, 0, 0, head),
        };
        let val_accs: Vec<f64> = chunk.iter().map(|r| r.final_val_acc()).collect();
        let n = chunk.len().max(1) as u64;
        let total = chunk.iter().fold(FlopCount::default(), |mut acc, r| {
            acc += r.regularizer_flops;
            acc
        });
        rows.push(AblationRow {
            variant,
            mode,
            mha_modules,
            ffn_modules,
            regularizer: Regularizer::for_run(&config, adapters.as_ref()),
            param_count,
            mean_val_acc: val_accs.iter().sum::<f64>() / val_accs.len().max(1) as f64,
            val_accs,
            regularizer_flops: FlopCount {
                matmul: total.matmul / n,
                other: total.other / n,
            },
        });
    }
    Ok(rows)
}

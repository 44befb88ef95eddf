//! A minimal pre-LN ViT encoder with pluggable low-rank modules.
//!
//! ```text
//! Z⁰ = [x_class; x₁W; …; x_nW] + E_pos
//! Z̃ˡ = MHA(LN(Zˡ⁻¹)) + Zˡ⁻¹
//! Zˡ = FFN(LN(Z̃ˡ)) + Z̃ˡ
//! y  = PH(LN(z_classᴸ))
//! ```
//!
//! With [`AttachMode::PreBlock`] the LN output feeding a block is replaced by
//! `LN(·) + LN(·)·ΔW_j` while the residual path is untouched. With
//! [`AttachMode::QvUpdate`] the query and value weights become `W + ΔW_j`.
//! Either form folds into the frozen weights via [`merge_adapters`].

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{FlopCount, Matrix, Tape, Var};
use crate::lrm::{merge_into_weight, AdapterBank, BankVars, LrmTerm};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    /// Embedding dimension.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Patch tokens per image, excluding the class token.
    pub n: usize,
    /// Flattened patch length, `3·patch_size²`.
    pub patch_dim: usize,
    pub ffn_hidden: usize,
    pub classes: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.d == 0 || c.heads == 0 || !c.d.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of heads={}",
                c.d, c.heads
            )));
        }
        if c.layers == 0 || c.n == 0 || c.patch_dim == 0 || c.classes == 0 {
            return Err(Error::Config(format!(
                "layers, n, patch_dim and classes must be >= 1: {c:?}"
            )));
        }
        if c.ffn_hidden < c.d {
            return Err(Error::Config(format!(
                "ffn_hidden={} must be >= d={}",
                c.ffn_hidden, c.d
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.n + 1
    }

    /// Scalars in the prediction head.
    pub fn head_params(&self) -> usize {
        self.d * self.classes + self.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_shift: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_shift: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const LAYER_TENSORS: [&str; 12] = [
    "ln1_gain",
    "ln1_shift",
    "wq",
    "wk",
    "wv",
    "wo",
    "ln2_gain",
    "ln2_shift",
    "w1",
    "b1",
    "w2",
    "b2",
];

impl LayerWeights {
    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_shift,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_shift,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }
}

/// Backbone and head weights. The backbone is frozen during adapter tuning;
/// only the head (and optionally the layer norms) are trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct VitWeights {
    pub config: VitConfig,
    pub embed: Matrix,
    pub class_token: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Matrix,
    pub final_shift: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
    /// Set once adapters have been folded in.
    pub merged: bool,
}

impl VitWeights {
    /// Gaussian N(0, 1/d) projections, unit LN gains, zero shifts and biases.
    pub fn init<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let VitConfig {
            d,
            n,
            patch_dim,
            ffn_hidden,
            classes,
            ..
        } = config;
        let std = 1.0 / (d as f64).sqrt();
        let ones = || Matrix::filled(1, d, 1.0);
        let embed = Matrix::random_normal(patch_dim, d, std, rng);
        let class_token = Matrix::random_normal(1, d, std, rng);
        let pos = Matrix::random_normal(n + 1, d, std, rng);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gain: ones(),
                ln1_shift: Matrix::zeros(1, d),
                wq: Matrix::random_normal(d, d, std, rng),
                wk: Matrix::random_normal(d, d, std, rng),
                wv: Matrix::random_normal(d, d, std, rng),
                wo: Matrix::random_normal(d, d, std, rng),
                ln2_gain: ones(),
                ln2_shift: Matrix::zeros(1, d),
                w1: Matrix::random_normal(d, ffn_hidden, std, rng),
                b1: Matrix::zeros(1, ffn_hidden),
                w2: Matrix::random_normal(ffn_hidden, d, std, rng),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            class_token,
            pos,
            layers,
            final_gain: ones(),
            final_shift: Matrix::zeros(1, d),
            head_w: Matrix::random_normal(d, classes, std, rng),
            head_b: Matrix::zeros(1, classes),
            merged: false,
        })
    }

    fn backbone_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("class_token".to_string(), &self.class_token),
            ("pos".to_string(), &self.pos),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, m) in LAYER_TENSORS.iter().zip(lw.tensors()) {
                out.push((format!("layer{l}/{name}"), m));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_shift".to_string(), &self.final_shift));
        out
    }

    /// SHA-256 over every backbone tensor (names, shapes and raw bits),
    /// excluding the prediction head.
    pub fn backbone_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in self.backbone_tensors() {
            hasher.update(name.as_bytes());
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Named tensors for checkpointing; `prefix` is normally `vit/`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let c = &self.config;
        let meta = [
            c.d,
            c.layers,
            c.heads,
            c.n,
            c.patch_dim,
            c.ffn_hidden,
            c.classes,
            self.merged as usize,
        ];
        let meta = Matrix::row_vector(&meta.map(|v| v as f64));
        let mut out = vec![(format!("{prefix}config"), meta)];
        out.extend(
            self.backbone_tensors()
                .into_iter()
                .map(|(n, m)| (format!("{prefix}{n}"), m.clone())),
        );
        out.push((format!("{prefix}head_w"), self.head_w.clone()));
        out.push((format!("{prefix}head_b"), self.head_b.clone()));
        out
    }

    pub fn from_named_tensors(prefix: &str, tensors: &[(String, Matrix)]) -> Result<Self> {
        let get = |name: &str| -> Result<Matrix> {
            let full = format!("{prefix}{name}");
            tensors
                .iter()
                .find(|(n, _)| *n == full)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))
        };
        let meta = get("config")?;
        if meta.shape() != (1, 8) {
            return Err(Error::Checkpoint(format!(
                "bad config tensor shape {:?}",
                meta.shape()
            )));
        }
        let v: Vec<usize> = meta.data().iter().map(|&x| x as usize).collect();
        let config = VitConfig {
            d: v[0],
            layers: v[1],
            heads: v[2],
            n: v[3],
            patch_dim: v[4],
            ffn_hidden: v[5],
            classes: v[6],
        };
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                let g = |name: &str| get(&format!("layer{l}/{name}"));
                Ok(LayerWeights {
                    ln1_gain: g("ln1_gain")?,
                    ln1_shift: g("ln1_shift")?,
                    wq: g("wq")?,
                    wk: g("wk")?,
                    wv: g("wv")?,
                    wo: g("wo")?,
                    ln2_gain: g("ln2_gain")?,
                    ln2_shift: g("ln2_shift")?,
                    w1: g("w1")?,
                    b1: g("b1")?,
                    w2: g("w2")?,
                    b2: g("b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embed: get("embed")?,
            class_token: get("class_token")?,
            pos: get("pos")?,
            layers,
            final_gain: get("final_gain")?,
            final_shift: get("final_shift")?,
            head_w: get("head_w")?,
            head_b: get("head_b")?,
            merged: v[7] != 0,
        })
    }

    /// Trainable matrices in the order used by [`VitVars::trainable_vars`].
    pub fn trainable_params_mut(&mut self, trainable: Trainable) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if trainable.layer_norm {
            for lw in self.layers.iter_mut() {
                out.push(&mut lw.ln1_gain);
                out.push(&mut lw.ln1_shift);
                out.push(&mut lw.ln2_gain);
                out.push(&mut lw.ln2_shift);
            }
            out.push(&mut self.final_gain);
            out.push(&mut self.final_shift);
        }
        if trainable.head {
            out.push(&mut self.head_w);
            out.push(&mut self.head_b);
        }
        out
    }
}

/// How low-rank modules attach to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttachMode {
    /// No adapters.
    None,
    /// On the LN outputs feeding MHA and/or FFN.
    PreBlock,
    /// As additive updates of `W_q` and `W_v`.
    QvUpdate,
}

/// Which pre-block sites receive a module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub mha: bool,
    pub ffn: bool,
}

impl Placement {
    pub const BOTH: Placement = Placement {
        mha: true,
        ffn: true,
    };

    pub fn per_layer(&self) -> usize {
        self.mha as usize + self.ffn as usize
    }
}

/// An adapter bank wired into a specific encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters {
    pub bank: AdapterBank,
    pub mode: AttachMode,
    pub placement: Placement,
}

impl Adapters {
    /// Checks that the bank holds exactly one module per attachment site.
    pub fn new(
        bank: AdapterBank,
        mode: AttachMode,
        placement: Placement,
        config: &VitConfig,
    ) -> Result<Self> {
        let per_layer = match mode {
            AttachMode::None => {
                return Err(Error::AdapterMismatch(
                    "mode `none` takes no adapters".into(),
                ));
            }
            AttachMode::PreBlock => placement.per_layer(),
            AttachMode::QvUpdate => {
                if placement != Placement::BOTH {
                    return Err(Error::AdapterMismatch(
                        "qv_update adapts both W_q and W_v".into(),
                    ));
                }
                2
            }
        };
        if per_layer == 0 {
            return Err(Error::AdapterMismatch("placement selects no sites".into()));
        }
        let expected = per_layer * config.layers;
        if bank.m() != expected {
            return Err(Error::AdapterMismatch(format!(
                "{mode:?} with {placement:?} over {} layers needs {expected} modules, bank has {}",
                config.layers,
                bank.m()
            )));
        }
        if bank.d() != config.d {
            return Err(Error::AdapterMismatch(format!(
                "bank d={} but model d={}",
                bank.d(),
                config.d
            )));
        }
        Ok(Self {
            bank,
            mode,
            placement,
        })
    }

    /// Bank indices for `layer`: (MHA or query site, FFN or value site).
    pub fn slots(&self, layer: usize) -> (Option<usize>, Option<usize>) {
        match self.mode {
            AttachMode::None => (None, None),
            AttachMode::QvUpdate => (Some(2 * layer), Some(2 * layer + 1)),
            AttachMode::PreBlock => {
                let base = layer * self.placement.per_layer();
                match (self.placement.mha, self.placement.ffn) {
                    (true, true) => (Some(base), Some(base + 1)),
                    (true, false) => (Some(base), None),
                    (false, true) => (None, Some(base)),
                    (false, false) => (None, None),
                }
            }
        }
    }
}

/// Which non-adapter weights receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    pub head: bool,
    pub layer_norm: bool,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_shift: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_shift: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// [`VitWeights`] registered on a tape.
#[derive(Clone, Debug)]
pub struct VitVars {
    pub config: VitConfig,
    pub embed: Var,
    pub class_token: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_shift: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl VitVars {
    pub fn register(w: &VitWeights, tape: &mut Tape, trainable: Trainable) -> Self {
        let mut leaf = |m: &Matrix, train: bool| {
            if train {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let ln = trainable.layer_norm;
        let embed = leaf(&w.embed, false);
        let class_token = leaf(&w.class_token, false);
        let pos = leaf(&w.pos, false);
        let layers = w
            .layers
            .iter()
            .map(|lw| LayerVars {
                ln1_gain: leaf(&lw.ln1_gain, ln),
                ln1_shift: leaf(&lw.ln1_shift, ln),
                wq: leaf(&lw.wq, false),
                wk: leaf(&lw.wk, false),
                wv: leaf(&lw.wv, false),
                wo: leaf(&lw.wo, false),
                ln2_gain: leaf(&lw.ln2_gain, ln),
                ln2_shift: leaf(&lw.ln2_shift, ln),
                w1: leaf(&lw.w1, false),
                b1: leaf(&lw.b1, false),
                w2: leaf(&lw.w2, false),
                b2: leaf(&lw.b2, false),
            })
            .collect();
        Self {
            config: w.config,
            embed,
            class_token,
            pos,
            layers,
            final_gain: leaf(&w.final_gain, ln),
            final_shift: leaf(&w.final_shift, ln),
            head_w: leaf(&w.head_w, trainable.head),
            head_b: leaf(&w.head_b, trainable.head),
        }
    }

    /// Same order as [`VitWeights::trainable_params_mut`].
    pub fn trainable_vars(&self, trainable: Trainable) -> Vec<Var> {
        let mut out = Vec::new();
        if trainable.layer_norm {
            for lv in &self.layers {
                out.extend([lv.ln1_gain, lv.ln1_shift, lv.ln2_gain, lv.ln2_shift]);
            }
            out.extend([self.final_gain, self.final_shift]);
        }
        if trainable.head {
            out.extend([self.head_w, self.head_b]);
        }
        out
    }
}

/// Adapters registered and materialized on the same tape as a [`VitVars`].
#[derive(Clone, Debug)]
pub struct AdapterVars<'a> {
    pub adapters: &'a Adapters,
    pub bank: BankVars,
    pub terms: Vec<LrmTerm>,
}

impl<'a> AdapterVars<'a> {
    pub fn register(adapters: &'a Adapters, tape: &mut Tape) -> Result<Self> {
        let bank = adapters.bank.register(tape);
        let terms = bank.materialize(tape)?;
        Ok(Self {
            adapters,
            bank,
            terms,
        })
    }
}

/// Nodes produced by one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    /// `1×classes`.
    pub logits: Var,
    /// Input of every pre-block module, keyed by bank index.
    pub lrm_inputs: Vec<(usize, Var)>,
}

/// `[x_class; x_patches·W] + E_pos` on the tape.
pub fn patch_embed_on_tape(tape: &mut Tape, vars: &VitVars, x_patches: Var) -> Result<Var> {
    let c = &vars.config;
    let shape = tape.shape(x_patches);
    if shape != (c.n, c.patch_dim) {
        return Err(Error::shape("patch_embed", shape, (c.n, c.patch_dim)));
    }
    let tokens = tape.matmul(x_patches, vars.embed)?;
    let stacked = tape.concat_rows(&[vars.class_token, tokens])?;
    tape.add(stacked, vars.pos)
}

fn lrm_on_tape(tape: &mut Tape, x: Var, delta_w: Var) -> Result<Var> {
    let update = tape.matmul(x, delta_w)?;
    tape.add(x, update)
}

/// Multi-head scaled dot-product attention with output projection.
fn attention_on_tape(
    tape: &mut Tape,
    heads: usize,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<Var> {
    let d = tape.shape(wq).1;
    let dh = d / heads;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(cat, wo)
}

fn ffn_on_tape(tape: &mut Tape, lv: &LayerVars, x: Var) -> Result<Var> {
    let hidden = tape.matmul(x, lv.w1)?;
    let hidden = tape.add_row(hidden, lv.b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, lv.w2)?;
    tape.add_row(out, lv.b2)
}

/// One encoder layer on the tape. `lrm_inputs` collects the input of each
/// pre-block module so diversity terms can be built over it.
pub fn encoder_layer_on_tape(
    tape: &mut Tape,
    vars: &VitVars,
    layer: usize,
    z: Var,
    adapters: Option<&AdapterVars<'_>>,
    lrm_inputs: &mut Vec<(usize, Var)>,
) -> Result<Var> {
    let lv = vars
        .layers
        .get(layer)
        .ok_or(Error::Index {
            what: "layer",
            index: layer,
            len: vars.layers.len(),
        })?
        .clone();
    let (mode, (site_a, site_b)) = match adapters {
        Some(a) => (a.adapters.mode, a.adapters.slots(layer)),
        None => (AttachMode::None, (None, None)),
    };
    let term = |j: usize| adapters.expect("slot implies adapters").terms[j].delta_w;

    let (mut wq, mut wv) = (lv.wq, lv.wv);
    if mode == AttachMode::QvUpdate {
        let (jq, jv) = (site_a.expect("qv slot"), site_b.expect("qv slot"));
        wq = tape.add(lv.wq, term(jq))?;
        wv = tape.add(lv.wv, term(jv))?;
    }

    // LN is evaluated once per block; the adapter path and the block input
    // share that node.
    let ln1 = tape.layer_norm(z, lv.ln1_gain, lv.ln1_shift, LN_EPS)?;
    let mha_in = match (mode, site_a) {
        (AttachMode::PreBlock, Some(j)) => {
            lrm_inputs.push((j, ln1));
            lrm_on_tape(tape, ln1, term(j))?
        }
        (AttachMode::QvUpdate, Some(j)) => {
            lrm_inputs.push((j, ln1));
            lrm_inputs.push((site_b.expect("qv slot"), ln1));
            ln1
        }
        _ => ln1,
    };
    let attn = attention_on_tape(tape, vars.config.heads, mha_in, wq, lv.wk, wv, lv.wo)?;
    let z_tilde = tape.add(attn, z)?;

    let ln2 = tape.layer_norm(z_tilde, lv.ln2_gain, lv.ln2_shift, LN_EPS)?;
    let ffn_in = match (mode, site_b) {
        (AttachMode::PreBlock, Some(j)) => {
            lrm_inputs.push((j, ln2));
            lrm_on_tape(tape, ln2, term(j))?
        }
        _ => ln2,
    };
    let ffn = ffn_on_tape(tape, &lv, ffn_in)?;
    tape.add(ffn, z_tilde)
}

/// Full forward pass for one sample of `n×patch_dim` patches.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &VitVars,
    x_patches: Var,
    adapters: Option<&AdapterVars<'_>>,
) -> Result<SampleTrace> {
    let mut z = patch_embed_on_tape(tape, vars, x_patches)?;
    let mut lrm_inputs = Vec::new();
    for l in 0..vars.layers.len() {
        z = encoder_layer_on_tape(tape, vars, l, z, adapters, &mut lrm_inputs)?;
    }
    let class_row = tape.slice_rows(z, 0, 1)?;
    let normed = tape.layer_norm(class_row, vars.final_gain, vars.final_shift, LN_EPS)?;
    let logits = tape.matmul(normed, vars.head_w)?;
    let logits = tape.add_row(logits, vars.head_b)?;
    Ok(SampleTrace { logits, lrm_inputs })
}

fn check_adapters(weights: &VitWeights, adapters: Option<&Adapters>) -> Result<()> {
    if let Some(a) = adapters {
        if weights.merged {
            return Err(Error::DoubleMerge);
        }
        Adapters::new(a.bank.clone(), a.mode, a.placement, &weights.config)?;
    }
    Ok(())
}

/// `Z⁰` for one sample.
pub fn patch_embed(x_patches: &Matrix, weights: &VitWeights) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = VitVars::register(weights, &mut tape, Trainable::default());
    let x = tape.constant(x_patches.clone());
    let out = patch_embed_on_tape(&mut tape, &vars, x)?;
    Ok(tape.value(out).clone())
}

/// Applies encoder layer `layer` (0-based) to `z`.
pub fn encoder_layer(
    z: &Matrix,
    layer: usize,
    weights: &VitWeights,
    adapters: Option<&Adapters>,
) -> Result<Matrix> {
    check_adapters(weights, adapters)?;
    if !z.is_finite() {
        return Err(Error::Numeric(
            "encoder input contains non-finite values".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = VitVars::register(weights, &mut tape, Trainable::default());
    let av = adapters
        .map(|a| AdapterVars::register(a, &mut tape))
        .transpose()?;
    let zv = tape.constant(z.clone());
    let out = encoder_layer_on_tape(&mut tape, &vars, layer, zv, av.as_ref(), &mut Vec::new())?;
    Ok(tape.value(out).clone())
}

/// Logits (`1×classes`) and the flops spent producing them.
pub fn forward_with_flops(
    x_patches: &Matrix,
    weights: &VitWeights,
    adapters: Option<&Adapters>,
) -> Result<(Matrix, FlopCount)> {
    check_adapters(weights, adapters)?;
    let mut tape = Tape::new();
    let vars = VitVars::register(weights, &mut tape, Trainable::default());
    let av = adapters
        .map(|a| AdapterVars::register(a, &mut tape))
        .transpose()?;
    let x = tape.constant(x_patches.clone());
    let trace = forward_on_tape(&mut tape, &vars, x, av.as_ref())?;
    Ok((tape.value(trace.logits).clone(), tape.flops()))
}

pub fn forward(
    x_patches: &Matrix,
    weights: &VitWeights,
    adapters: Option<&Adapters>,
) -> Result<Matrix> {
    forward_with_flops(x_patches, weights, adapters).map(|(logits, _)| logits)
}

/// Folds the adapters into `W_q/k/v` and `W_1` (pre-block) or `W_q`/`W_v`
/// (qv-update) and returns adapter-free weights of unchanged structure.
pub fn merge_adapters(weights: &VitWeights, adapters: &Adapters) -> Result<VitWeights> {
    if weights.merged {
        return Err(Error::DoubleMerge);
    }
    let adapters = Adapters::new(
        adapters.bank.clone(),
        adapters.mode,
        adapters.placement,
        &weights.config,
    )?;
    let mut out = weights.clone();
    for (l, lw) in out.layers.iter_mut().enumerate() {
        let (a, b) = adapters.slots(l);
        match adapters.mode {
            AttachMode::PreBlock => {
                if let Some(j) = a {
                    let dw = adapters.bank.delta_w(j)?;
                    lw.wq = merge_into_weight(&lw.wq, &dw)?;
                    lw.wk = merge_into_weight(&lw.wk, &dw)?;
                    lw.wv = merge_into_weight(&lw.wv, &dw)?;
                }
                if let Some(j) = b {
                    lw.w1 = merge_into_weight(&lw.w1, &adapters.bank.delta_w(j)?)?;
                }
            }
            AttachMode::QvUpdate => {
                lw.wq = lw.wq.add(&adapters.bank.delta_w(a.expect("qv slot"))?)?;
                lw.wv = lw.wv.add(&adapters.bank.delta_w(b.expect("qv slot"))?)?;
            }
            AttachMode::None => unreachable!("rejected by Adapters::new"),
        }
    }
    out.merged = true;
    Ok(out)
}

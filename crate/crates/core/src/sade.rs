//! Diversity regularizers over the experts of one low-rank module.
//!
//! For a module with experts `M_1..M_p` (each d×d) and input tokens `x_a`:
//!
//! - token similarity: cosine of `x_a M_h` and `x_a M_r`
//! - SR: `Σ_a Σ_{h<r} s_{h,r}^a²`, which depends on the samples
//! - RSR: `Σ_{h<r} ‖M_h M_rᵀ‖_F²`, which does not
//! - column orthogonality (comparison baseline): `Σ_{f<v} ‖G_fᵀ G_v‖_F²`
//!
//! [`complexity_profile`] prices SR against RSR with the closed-form counts
//! `(p²+p)(n+1)·b·d²` and `½(p²+p)·d³`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, Var, DEGENERATE_NORM};

/// The `p` experts `M_h = D_h Q_h U_h` of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSet {
    experts: Vec<Matrix>,
}

impl ExpertSet {
    pub fn new(experts: Vec<Matrix>) -> Result<Self> {
        let d = experts
            .first()
            .map(Matrix::rows)
            .ok_or_else(|| Error::Contract("expert set needs p >= 1".into()))?;
        for m in &experts {
            if m.shape() != (d, d) {
                return Err(Error::shape("expert set", m.shape(), (d, d)));
            }
        }
        Ok(Self { experts })
    }

    pub fn p(&self) -> usize {
        self.experts.len()
    }

    pub fn d(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn get(&self, h: usize) -> &Matrix {
        &self.experts[h]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Matrix> {
        self.experts.iter()
    }

    pub fn into_inner(self) -> Vec<Matrix> {
        self.experts
    }
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot, na, nb)
}

/// Cosine similarity between `x·M_h` and `x·M_r` for a single `1×d` token.
///
/// Errors with [`Error::DegenerateSimilarity`] when either projection has
/// (near-)zero magnitude.
pub fn token_similarity(x: &Matrix, experts: &ExpertSet, h: usize, r: usize) -> Result<f64> {
    if x.rows() != 1 || x.cols() != experts.d() {
        return Err(Error::shape(
            "token_similarity",
            x.shape(),
            (1, experts.d()),
        ));
    }
    for idx in [h, r] {
        if idx >= experts.p() {
            return Err(Error::Index {
                what: "expert",
                index: idx,
                len: experts.p(),
            });
        }
    }
    if h == r {
        return Err(Error::Contract(
            "token similarity needs two distinct experts".into(),
        ));
    }
    let ph = x.matmul(experts.get(h))?;
    let pr = x.matmul(experts.get(r))?;
    let (dot, nh, nr) = cosine(ph.data(), pr.data());
    if nh < DEGENERATE_NORM {
        return Err(Error::DegenerateSimilarity { which: h, norm: nh });
    }
    if nr < DEGENERATE_NORM {
        return Err(Error::DegenerateSimilarity { which: r, norm: nr });
    }
    Ok(dot / (nh * nr))
}

/// Sample-dependent regularizer over the rows of `tokens` (`(n+1)×d`).
/// Degenerate token pairs contribute zero.
pub fn sr_term(tokens: &Matrix, experts: &ExpertSet) -> Result<f64> {
    if tokens.cols() != experts.d() {
        return Err(Error::shape(
            "sr_term",
            tokens.shape(),
            (experts.d(), experts.d()),
        ));
    }
    let projections = experts
        .iter()
        .map(|m| tokens.matmul(m))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for a in 0..tokens.rows() {
        for h in 0..experts.p() {
            for r in (h + 1)..experts.p() {
                let (dot, nh, nr) = cosine(projections[h].row(a), projections[r].row(a));
                if nh < DEGENERATE_NORM || nr < DEGENERATE_NORM {
                    continue;
                }
                let s = dot / (nh * nr);
                total += s * s;
            }
        }
    }
    Ok(total)
}

/// Sample-agnostic regularizer `Σ_{h<r} ‖M_h M_rᵀ‖_F²`.
pub fn rsr_term(experts: &ExpertSet) -> f64 {
    let mut total = 0.0;
    for h in 0..experts.p() {
        for r in (h + 1)..experts.p() {
            let prod = experts
                .get(h)
                .matmul(&experts.get(r).transpose())
                .expect("experts share one square shape");
            total += prod.frobenius_sq();
        }
    }
    total
}

/// Column-orthogonality penalty `Σ_{f<v} ‖G_fᵀ G_v‖_F²`.
pub fn column_orthogonality_term(gs: &[Matrix]) -> Result<f64> {
    let Some(first) = gs.first() else {
        return Ok(0.0);
    };
    for g in gs {
        if g.shape() != first.shape() {
            return Err(Error::shape(
                "column_orthogonality_term",
                g.shape(),
                first.shape(),
            ));
        }
    }
    let mut total = 0.0;
    for (f, a) in gs.iter().enumerate() {
        let gt = a.transpose();
        for b in &gs[f + 1..] {
            total += gt.matmul(b)?.frobenius_sq();
        }
    }
    Ok(total)
}

/// `∂RSR/∂M_h` for every expert, computed on a tape.
pub fn rsr_gradient(experts: &ExpertSet) -> Result<Vec<Matrix>> {
    let (_, grads) = crate::linalg::grad(&experts.experts, rsr_on_tape)?;
    Ok(grads)
}

/// RSR built on a tape from expert nodes. Returns a `1×1` node (0 when p = 1).
pub fn rsr_on_tape(tape: &mut Tape, experts: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for h in 0..experts.len() {
        for r in (h + 1)..experts.len() {
            let rt = tape.transpose(experts[r]);
            let prod = tape.matmul(experts[h], rt)?;
            terms.push(tape.frobenius_sq(prod));
        }
    }
    sum_scalars(tape, &terms)
}

/// SR built on a tape for tokens `x` (`t×d`) and expert nodes.
pub fn sr_on_tape(tape: &mut Tape, tokens: Var, experts: &[Var]) -> Result<Var> {
    let projections = experts
        .iter()
        .map(|&m| tape.matmul(tokens, m))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for h in 0..projections.len() {
        for r in (h + 1)..projections.len() {
            let cos = tape.cosine_rows(projections[h], projections[r])?;
            let sq = tape.mul(cos, cos)?;
            terms.push(tape.sum(sq));
        }
    }
    sum_scalars(tape, &terms)
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    match terms.split_first() {
        None => Ok(tape.constant(Matrix::zeros(1, 1))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| tape.add(acc, t)),
    }
}

/// Reference ViT backbones with patch-16 tokenization (n = 196).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    VitBase,
    VitLarge,
    VitHuge,
}

/// Patch tokens of a 224×224 image cut into 16×16 patches.
pub const DEFAULT_TOKENS: usize = 196;

/// Batch sizes in the reference cost table.
pub const TABLE_BATCHES: [usize; 6] = [2, 4, 8, 16, 32, 64];

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::VitBase, Backbone::VitLarge, Backbone::VitHuge];

    pub fn dim(self) -> usize {
        match self {
            Backbone::VitBase => 768,
            Backbone::VitLarge => 1024,
            Backbone::VitHuge => 1280,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Backbone::VitBase => "ViT-Base",
            Backbone::VitLarge => "ViT-Large",
            Backbone::VitHuge => "ViT-Huge",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vit-base" | "base" | "vit-b" => Ok(Backbone::VitBase),
            "vit-large" | "large" | "vit-l" => Ok(Backbone::VitLarge),
            "vit-huge" | "huge" | "vit-h" => Ok(Backbone::VitHuge),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Closed-form regularizer cost for one module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityProfile {
    pub d: usize,
    pub n: usize,
    pub b: usize,
    pub p: usize,
    /// `(p²n + p² + pn + p)·b·d²`
    pub sr_flops: f64,
    /// `(½p² + ½p)·d³`
    pub rsr_flops: f64,
    /// `1 − rsr/sr`; negative when RSR is the more expensive one.
    pub reduction: f64,
}

impl ComplexityProfile {
    /// Break-even batch size `d / (2(n+1))`.
    pub fn threshold(&self) -> f64 {
        break_even_batch(self.d, self.n)
    }

    /// Whether RSR is strictly cheaper, i.e. `b > d/(2(n+1))`.
    pub fn applicable(&self) -> bool {
        2 * (self.n + 1) * self.b > self.d
    }

    /// Reduction in percent rounded to one decimal, e.g. `51.3`.
    pub fn reduction_percent(&self) -> f64 {
        (self.reduction * 1000.0).round() / 10.0
    }
}

pub fn break_even_batch(d: usize, n: usize) -> f64 {
    d as f64 / (2.0 * (n as f64 + 1.0))
}

pub fn complexity_profile(d: usize, n: usize, b: usize, p: usize) -> Result<ComplexityProfile> {
    if d == 0 || n == 0 || b == 0 || p == 0 {
        return Err(Error::Config(format!(
            "complexity inputs must be >= 1 (d={d}, n={n}, b={b}, p={p})"
        )));
    }
    let (df, nf, bf, pf) = (d as f64, n as f64, b as f64, p as f64);
    let sr_flops = (pf * pf * nf + pf * pf + pf * nf + pf) * bf * df * df;
    let rsr_flops = (0.5 * pf * pf + 0.5 * pf) * df * df * df;
    Ok(ComplexityProfile {
        d,
        n,
        b,
        p,
        sr_flops,
        rsr_flops,
        reduction: 1.0 - rsr_flops / sr_flops,
    })
}

/// One backbone row of the reduction table.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityRow {
    pub backbone: Backbone,
    pub d: usize,
    pub n: usize,
    pub threshold: f64,
    /// `None` where `b <= d/(2(n+1))`.
    pub reductions: Vec<(usize, Option<f64>)>,
}

/// Reduction table for `backbones` × `batches` at token count `n`.
pub fn complexity_table(
    backbones: &[Backbone],
    batches: &[usize],
    n: usize,
) -> Result<Vec<ComplexityRow>> {
    backbones
        .iter()
        .map(|&backbone| {
            let d = backbone.dim();
            let reductions = batches
                .iter()
                .map(|&b| {
                    let prof = complexity_profile(d, n, b, 1)?;
                    Ok((b, prof.applicable().then(|| prof.reduction_percent())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ComplexityRow {
                backbone,
                d,
                n,
                threshold: break_even_batch(d, n),
                reductions,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;

    fn random_experts(p: usize, d: usize, seed: u64) -> ExpertSet {
        let mut rng = seeded_rng(seed);
        let std = 1.0 / (d as f64).sqrt();
        ExpertSet::new(
            (0..p)
                .map(|_| Matrix::random_normal(d, d, std, &mut rng))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_and_antipodal_similarity() {
        let mut rng = seeded_rng(1);
        let m = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let x = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let same = ExpertSet::new(vec![m.clone(), m.clone()]).unwrap();
        assert!((token_similarity(&x, &same, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        let anti = ExpertSet::new(vec![m.clone(), m.scale(-1.0)]).unwrap();
        assert!((token_similarity(&x, &anti, 0, 1).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_errors_on_zero_projection() {
        let e = ExpertSet::new(vec![Matrix::zeros(3, 3), Matrix::identity(3)]).unwrap();
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            token_similarity(&x, &e, 0, 1),
            Err(Error::DegenerateSimilarity { which: 0, .. })
        ));
        // SR treats the same pair as contributing nothing.
        assert_eq!(sr_term(&x, &e).unwrap(), 0.0);
    }

    #[test]
    fn single_expert_regularizers_vanish() {
        let e = random_experts(1, 5, 2);
        let mut rng = seeded_rng(3);
        let x = Matrix::random_normal(4, 5, 1.0, &mut rng);
        assert_eq!(sr_term(&x, &e).unwrap(), 0.0);
        assert_eq!(rsr_term(&e), 0.0);
        assert!(rsr_gradient(&e).unwrap().iter().all(|g| g.max_abs() == 0.0));
    }

    #[test]
    fn rsr_of_identical_pair() {
        let mut rng = seeded_rng(4);
        let m = Matrix::random_normal(5, 5, 1.0, &mut rng);
        let e = ExpertSet::new(vec![m.clone(), m.clone()]).unwrap();
        let expected = m.matmul(&m.transpose()).unwrap().frobenius_sq();
        assert!((rsr_term(&e) - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn column_orthogonality_cases() {
        assert_eq!(
            column_orthogonality_term(&[Matrix::identity(3)]).unwrap(),
            0.0
        );
        // Disjoint standard-basis columns.
        let g1 = Matrix::from_fn(4, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let g2 = Matrix::from_fn(4, 2, |i, j| if i == j + 2 { 3.0 } else { 0.0 });
        assert_eq!(column_orthogonality_term(&[g1.clone(), g2]).unwrap(), 0.0);
        assert!(column_orthogonality_term(&[g1, Matrix::zeros(3, 2)]).is_err());
    }

    #[test]
    fn reference_reductions() {
        let base = complexity_profile(768, 196, 4, 4).unwrap();
        assert_eq!(base.reduction_percent(), 51.3);
        let huge = complexity_profile(1280, 196, 4, 4).unwrap();
        assert_eq!(huge.reduction_percent(), 18.8);
    }

    #[test]
    fn break_even_reduction_is_zero() {
        // d = 2(n+1)b
        let prof = complexity_profile(2 * 17 * 3, 16, 3, 5).unwrap();
        assert_eq!(prof.reduction, 0.0);
        assert_eq!(prof.reduction_percent(), 0.0);
        assert!(!prof.applicable());
    }

    #[test]
    fn counts_follow_factored_forms() {
        for p in 1..=6 {
            let prof = complexity_profile(64, 16, 8, p).unwrap();
            let pp = (p * p + p) as f64;
            assert_eq!(prof.sr_flops, pp * 17.0 * 8.0 * 64.0 * 64.0);
            assert_eq!(prof.rsr_flops, 0.5 * pp * 64f64.powi(3));
        }
    }

    #[test]
    fn table_marks_inapplicable_cells() {
        let rows = complexity_table(&Backbone::ALL, &TABLE_BATCHES, DEFAULT_TOKENS).unwrap();
        assert_eq!(rows[0].reductions[0], (2, Some(2.5)));
        assert_eq!(rows[1].reductions[0], (2, None));
        assert_eq!(rows[2].reductions[0], (2, None));
    }

    #[test]
    fn tape_regularizers_match_direct() {
        let e = random_experts(3, 6, 5);
        let mut rng = seeded_rng(6);
        let x = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = e.iter().map(|m| tape.constant(m.clone())).collect();
        let xv = tape.constant(x.clone());
        let rsr = rsr_on_tape(&mut tape, &vars).unwrap();
        let sr = sr_on_tape(&mut tape, xv, &vars).unwrap();
        assert!((tape.scalar(rsr).unwrap() - rsr_term(&e)).abs() < 1e-12);
        assert!((tape.scalar(sr).unwrap() - sr_term(&x, &e).unwrap()).abs() < 1e-12);
    }
}

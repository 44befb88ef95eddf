//! Low-rank modules: the `ΔW` constructions, merging and parameter census.
//!
//! Module indices `j` and base-space indices `h` are 0-based in this API.
//! Text output (CLI, reports) prints them 1-based.
//!
//! Variants:
//! - LoRA: `ΔW_j = A_j B_j`, rank ≤ r, `2drm` parameters.
//! - naive sum: every module uses `Σ_i A_i B_i`, rank ≤ min(mr, d).
//! - Λ-transformed sum: `ΔW_j = Σ_h Σ_i D_h T_i^h Λ_{i,j}^h R_i^h U_h`. Kept as
//!   a construction only; it collapses to the shared-base form with
//!   `Q_h^j = Σ_i T_i^h Λ_{i,j}^h R_i^h`.
//! - CLoRA: `ΔW_j = Σ_h D_h Q_h^j U_h`, rank ≤ pr, `(2dr + mr²)p` parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tape, Var};
use crate::sade::ExpertSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Lora,
    NaiveSum,
    LambdaSum,
    Clora,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Lora => "lora",
            Variant::NaiveSum => "naive_sum",
            Variant::LambdaSum => "lambda_sum",
            Variant::Clora => "clora",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lora" => Ok(Variant::Lora),
            "naive_sum" | "naive" => Ok(Variant::NaiveSum),
            "lambda_sum" | "lambda" => Ok(Variant::LambdaSum),
            "clora" => Ok(Variant::Clora),
            other => Err(Error::Config(format!("unknown adapter variant `{other}`"))),
        }
    }
}

/// Dimensions of an adapter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Rank of each factor.
    pub r: usize,
    /// Number of low-rank modules.
    pub m: usize,
    /// Number of shared base spaces (CLoRA and Λ-sum only).
    pub p: usize,
    pub variant: Variant,
}

impl AdapterConfig {
    /// Full bank invariants, including `p < m` for CLoRA.
    pub fn validate(&self) -> Result<()> {
        self.validate_dims()?;
        if self.variant == Variant::Clora && self.p >= self.m {
            return Err(Error::Config(format!(
                "shared base spaces must satisfy p < m, got p={}, m={}",
                self.p, self.m
            )));
        }
        Ok(())
    }

    /// Dimension checks only: `1 <= r < d`, `m >= 1`, `p >= 1` where used.
    pub fn validate_dims(&self) -> Result<()> {
        let AdapterConfig {
            d,
            r,
            m,
            p,
            variant,
        } = *self;
        if r == 0 || r >= d {
            return Err(Error::Config(format!("need 1 <= r < d, got r={r}, d={d}")));
        }
        if m == 0 {
            return Err(Error::Config(
                "need at least one low-rank module (m >= 1)".into(),
            ));
        }
        if matches!(variant, Variant::Clora | Variant::LambdaSum) && p == 0 {
            return Err(Error::Config("need p >= 1 shared base spaces".into()));
        }
        Ok(())
    }
}

/// Closed-form count of trainable adapter scalars plus `head_params`.
///
/// - CLoRA: `(2dr + m·r²)·p + c`
/// - LoRA and naive sum: `2drm + c`
/// - Λ-sum: `2drm + (m² − m)·r²·p + c`; the `m·p` identity blocks are fixed.
///
/// Only the dimension checks apply here, so degenerate sharing (`p >= m`)
/// can still be priced.
pub fn param_count(config: &AdapterConfig, head_params: usize) -> Result<usize> {
    config.validate_dims()?;
    let AdapterConfig {
        d,
        r,
        m,
        p,
        variant,
    } = *config;
    let adapters = match variant {
        Variant::Clora => (2 * d * r + m * r * r) * p,
        Variant::Lora | Variant::NaiveSum => 2 * d * r * m,
        Variant::LambdaSum => 2 * d * r * m + (m * m - m) * r * r * p,
    };
    Ok(adapters + head_params)
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::Index { what, index, len });
    }
    Ok(())
}

fn expect_shape(op: &'static str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::shape(op, m.shape(), shape));
    }
    Ok(())
}

/// The shared projection bases `{D_h}` (d×r) and `{U_h}` (r×d).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSpace {
    down: Vec<Matrix>,
    up: Vec<Matrix>,
}

impl BaseSpace {
    pub fn new(down: Vec<Matrix>, up: Vec<Matrix>) -> Result<Self> {
        if down.is_empty() || down.len() != up.len() {
            return Err(Error::Contract(format!(
                "base space needs p >= 1 matching bases, got {} down and {} up",
                down.len(),
                up.len()
            )));
        }
        let (d, r) = down[0].shape();
        for (dh, uh) in down.iter().zip(&up) {
            expect_shape("base down-projection", dh, (d, r))?;
            expect_shape("base up-projection", uh, (r, d))?;
        }
        Ok(Self { down, up })
    }

    /// `D_h, U_h ~ N(0, 1/d)`.
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, p: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let down = (0..p)
            .map(|_| Matrix::random_normal(d, r, std, rng))
            .collect();
        let up = (0..p)
            .map(|_| Matrix::random_normal(r, d, std, rng))
            .collect();
        Self { down, up }
    }

    pub fn p(&self) -> usize {
        self.down.len()
    }

    pub fn d(&self) -> usize {
        self.down[0].rows()
    }

    pub fn r(&self) -> usize {
        self.down[0].cols()
    }

    pub fn down(&self, h: usize) -> &Matrix {
        &self.down[h]
    }

    pub fn up(&self, h: usize) -> &Matrix {
        &self.up[h]
    }

    fn scalar_count(&self) -> usize {
        self.down.iter().chain(&self.up).map(Matrix::len).sum()
    }
}

/// CLoRA bank: one shared [`BaseSpace`] and an `m×p` grid of `r×r`
/// coefficients `Q_h^j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrmBank {
    base: BaseSpace,
    coeffs: Vec<Vec<Matrix>>,
}

impl LrmBank {
    pub fn new(base: BaseSpace, coeffs: Vec<Vec<Matrix>>) -> Result<Self> {
        let r = base.r();
        if coeffs.is_empty() {
            return Err(Error::Contract("bank needs at least one module".into()));
        }
        for row in &coeffs {
            if row.len() != base.p() {
                return Err(Error::Contract(format!(
                    "each module needs {} coefficient blocks, got {}",
                    base.p(),
                    row.len()
                )));
            }
            for q in row {
                expect_shape("coefficient block", q, (r, r))?;
            }
        }
        Ok(Self { base, coeffs })
    }

    /// Bases from [`BaseSpace::init`], all coefficients zero, so every `ΔW_j = 0`.
    pub fn init<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let base = BaseSpace::init(config.d, config.r, config.p, rng);
        let coeffs = vec![vec![Matrix::zeros(config.r, config.r); config.p]; config.m];
        Ok(Self { base, coeffs })
    }

    /// Bases as in [`init`](Self::init) and coefficients ~ N(0, 1); for audits
    /// and equivalence checks where `ΔW ≠ 0` is wanted.
    pub fn random<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let base = BaseSpace::init(config.d, config.r, config.p, rng);
        let coeffs = (0..config.m)
            .map(|_| {
                (0..config.p)
                    .map(|_| Matrix::random_normal(config.r, config.r, 1.0, rng))
                    .collect()
            })
            .collect();
        Ok(Self { base, coeffs })
    }

    pub fn base(&self) -> &BaseSpace {
        &self.base
    }

    pub fn m(&self) -> usize {
        self.coeffs.len()
    }

    pub fn p(&self) -> usize {
        self.base.p()
    }

    pub fn d(&self) -> usize {
        self.base.d()
    }

    pub fn r(&self) -> usize {
        self.base.r()
    }

    pub fn coeff(&self, j: usize, h: usize) -> &Matrix {
        &self.coeffs[j][h]
    }

    pub fn coeff_mut(&mut self, j: usize, h: usize) -> &mut Matrix {
        &mut self.coeffs[j][h]
    }

    /// The experts `M_h^j = D_h Q_h^j U_h` of module `j`.
    pub fn experts(&self, j: usize) -> Result<ExpertSet> {
        check_index("module", j, self.m())?;
        let experts = (0..self.p())
            .map(|h| {
                self.base.down[h]
                    .matmul(&self.coeffs[j][h])?
                    .matmul(&self.base.up[h])
            })
            .collect::<Result<Vec<_>>>()?;
        ExpertSet::new(experts)
    }

    /// `ΔW_j = Σ_h D_h Q_h^j U_h`.
    pub fn delta_w(&self, j: usize) -> Result<Matrix> {
        let experts = self.experts(j)?;
        let mut out = Matrix::zeros(self.d(), self.d());
        for m in experts.iter() {
            out.add_assign(m)?;
        }
        Ok(out)
    }

    /// Number of scalars held by the bank.
    pub fn scalar_count(&self) -> usize {
        self.base.scalar_count() + self.coeffs.iter().flatten().map(Matrix::len).sum::<usize>()
    }

    fn params(&self) -> Vec<&Matrix> {
        self.base
            .down
            .iter()
            .chain(&self.base.up)
            .chain(self.coeffs.iter().flatten())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.base
            .down
            .iter_mut()
            .chain(self.base.up.iter_mut())
            .chain(self.coeffs.iter_mut().flatten())
            .collect()
    }
}

/// Independent LoRA factors `A_j` (d×r) and `B_j` (r×d).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBank {
    down: Vec<Matrix>,
    up: Vec<Matrix>,
}

impl LoraBank {
    pub fn new(down: Vec<Matrix>, up: Vec<Matrix>) -> Result<Self> {
        if down.is_empty() || down.len() != up.len() {
            return Err(Error::Contract(format!(
                "LoRA bank needs m >= 1 matching factors, got {} A and {} B",
                down.len(),
                up.len()
            )));
        }
        let (d, r) = down[0].shape();
        for (a, b) in down.iter().zip(&up) {
            expect_shape("LoRA A", a, (d, r))?;
            expect_shape("LoRA B", b, (r, d))?;
        }
        Ok(Self { down, up })
    }

    /// `A_j ~ N(0, 1/d)`, `B_j = 0`.
    pub fn init<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = 1.0 / (config.d as f64).sqrt();
        let down = (0..config.m)
            .map(|_| Matrix::random_normal(config.d, config.r, std, rng))
            .collect();
        let up = vec![Matrix::zeros(config.r, config.d); config.m];
        Ok(Self { down, up })
    }

    /// Both factors ~ N(0, 1/d).
    pub fn random<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = 1.0 / (config.d as f64).sqrt();
        let down = (0..config.m)
            .map(|_| Matrix::random_normal(config.d, config.r, std, rng))
            .collect();
        let up = (0..config.m)
            .map(|_| Matrix::random_normal(config.r, config.d, std, rng))
            .collect();
        Ok(Self { down, up })
    }

    pub fn m(&self) -> usize {
        self.down.len()
    }

    pub fn d(&self) -> usize {
        self.down[0].rows()
    }

    pub fn r(&self) -> usize {
        self.down[0].cols()
    }

    pub fn a(&self, j: usize) -> &Matrix {
        &self.down[j]
    }

    pub fn b(&self, j: usize) -> &Matrix {
        &self.up[j]
    }

    /// `ΔW_j = A_j B_j`.
    pub fn delta_w(&self, j: usize) -> Result<Matrix> {
        check_index("module", j, self.m())?;
        self.down[j].matmul(&self.up[j])
    }

    /// `Σ_i A_i B_i`, the same matrix for every module.
    pub fn naive_sum(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.d(), self.d());
        for j in 0..self.m() {
            out.add_assign(&self.down[j].matmul(&self.up[j])?)?;
        }
        Ok(out)
    }

    pub fn scalar_count(&self) -> usize {
        self.down.iter().chain(&self.up).map(Matrix::len).sum()
    }

    fn params(&self) -> Vec<&Matrix> {
        self.down.iter().chain(&self.up).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.down.iter_mut().chain(self.up.iter_mut()).collect()
    }
}

/// Factors of the Λ-transformed sum: `T` and `R` are `m×p` grids of `r×r`
/// blocks, `Λ` an `m×m×p` grid with identity blocks on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaComponents {
    t: Vec<Vec<Matrix>>,
    r: Vec<Vec<Matrix>>,
    lambda: Vec<Vec<Vec<Matrix>>>,
}

impl LambdaComponents {
    pub fn new(
        t: Vec<Vec<Matrix>>,
        r: Vec<Vec<Matrix>>,
        lambda: Vec<Vec<Vec<Matrix>>>,
    ) -> Result<Self> {
        let m = t.len();
        let p = t.first().map_or(0, Vec::len);
        if m == 0 || p == 0 {
            return Err(Error::Contract(
                "Λ components need m >= 1 and p >= 1".into(),
            ));
        }
        let rank = t[0][0].rows();
        let block = (rank, rank);
        let grid_ok = |g: &Vec<Vec<Matrix>>| g.len() == m && g.iter().all(|row| row.len() == p);
        if !grid_ok(&t)
            || !grid_ok(&r)
            || lambda.len() != m
            || lambda.iter().any(|row| !grid_ok(row))
        {
            return Err(Error::Contract(
                "Λ component grids have inconsistent sizes".into(),
            ));
        }
        for blk in t
            .iter()
            .chain(&r)
            .flatten()
            .chain(lambda.iter().flatten().flatten())
        {
            expect_shape("Λ component block", blk, block)?;
        }
        let eye = Matrix::identity(rank);
        for (i, row) in lambda.iter().enumerate() {
            if row[i].iter().any(|l| *l != eye) {
                return Err(Error::Contract(format!("Λ[{i}][{i}] must be the identity")));
            }
        }
        Ok(Self { t, r, lambda })
    }

    /// `T`, `R` and off-diagonal `Λ` blocks ~ N(0, 1); diagonal `Λ` blocks = I.
    pub fn random<R: Rng + ?Sized>(m: usize, p: usize, rank: usize, rng: &mut R) -> Self {
        let grid = |rng: &mut R| -> Vec<Vec<Matrix>> {
            (0..m)
                .map(|_| {
                    (0..p)
                        .map(|_| Matrix::random_normal(rank, rank, 1.0, rng))
                        .collect()
                })
                .collect()
        };
        let t = grid(rng);
        let r = grid(rng);
        let lambda = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        (0..p)
                            .map(|_| {
                                if i == j {
                                    Matrix::identity(rank)
                                } else {
                                    Matrix::random_normal(rank, rank, 1.0, rng)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { t, r, lambda }
    }

    pub fn m(&self) -> usize {
        self.t.len()
    }

    pub fn p(&self) -> usize {
        self.t[0].len()
    }

    fn check_base(&self, base: &BaseSpace) -> Result<()> {
        if base.p() != self.p() || base.r() != self.t[0][0].rows() {
            return Err(Error::Contract(format!(
                "base space (p={}, r={}) does not match components (p={}, r={})",
                base.p(),
                base.r(),
                self.p(),
                self.t[0][0].rows()
            )));
        }
        Ok(())
    }

    /// `ΔW_j = Σ_h Σ_i D_h T_i^h Λ_{i,j}^h R_i^h U_h`, evaluated term by term.
    pub fn delta_w(&self, base: &BaseSpace, j: usize) -> Result<Matrix> {
        self.check_base(base)?;
        check_index("module", j, self.m())?;
        let d = base.d();
        let mut out = Matrix::zeros(d, d);
        for h in 0..self.p() {
            for i in 0..self.m() {
                let term = base.down[h]
                    .matmul(&self.t[i][h])?
                    .matmul(&self.lambda[i][j][h])?
                    .matmul(&self.r[i][h])?
                    .matmul(&base.up[h])?;
                out.add_assign(&term)?;
            }
        }
        Ok(out)
    }

    /// `Q_h^j = Σ_i T_i^h Λ_{i,j}^h R_i^h`.
    pub fn collapsed_coeff(&self, j: usize, h: usize) -> Result<Matrix> {
        let rank = self.t[0][0].rows();
        let mut q = Matrix::zeros(rank, rank);
        for i in 0..self.m() {
            q.add_assign(
                &self.t[i][h]
                    .matmul(&self.lambda[i][j][h])?
                    .matmul(&self.r[i][h])?,
            )?;
        }
        Ok(q)
    }

    /// The equivalent shared-base bank.
    pub fn collapse(&self, base: &BaseSpace) -> Result<LrmBank> {
        self.check_base(base)?;
        let coeffs = (0..self.m())
            .map(|j| {
                (0..self.p())
                    .map(|h| self.collapsed_coeff(j, h))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        LrmBank::new(base.clone(), coeffs)
    }
}

/// Trainable storage of the Λ-transformed sum taken literally: LoRA factors
/// plus the `m×m×p` Λ grid whose diagonal identity blocks are fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSumBank {
    factors: LoraBank,
    lambda: Vec<Vec<Vec<Matrix>>>,
}

impl LambdaSumBank {
    pub fn init<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let factors = LoraBank::init(config, rng)?;
        let (m, p, r) = (config.m, config.p, config.r);
        let lambda = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let blk = if i == j {
                            Matrix::identity(r)
                        } else {
                            Matrix::zeros(r, r)
                        };
                        vec![blk; p]
                    })
                    .collect()
            })
            .collect();
        Ok(Self { factors, lambda })
    }

    /// Scalars in the factors and the off-diagonal Λ blocks.
    pub fn trainable_scalar_count(&self) -> usize {
        let off_diag: usize = self
            .lambda
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i))
            .flat_map(|(_, blocks)| blocks.iter().map(Matrix::len))
            .sum();
        self.factors.scalar_count() + off_diag
    }
}

/// Output of an identity-weight LRM: `x + x·ΔW`.
pub fn lrm_forward(x: &Matrix, delta_w: &Matrix) -> Result<Matrix> {
    if x.cols() != delta_w.rows() || !is_square(delta_w) {
        return Err(Error::shape("lrm_forward", x.shape(), delta_w.shape()));
    }
    x.add(&x.matmul(delta_w)?)
}

/// Folds an input-side LRM into the following weight: `(I + ΔW)·w`.
pub fn merge_into_weight(w: &Matrix, delta_w: &Matrix) -> Result<Matrix> {
    if w.rows() != delta_w.cols() || !is_square(delta_w) {
        return Err(Error::shape(
            "merge_into_weight",
            w.shape(),
            delta_w.shape(),
        ));
    }
    w.add(&delta_w.matmul(w)?)
}

fn is_square(m: &Matrix) -> bool {
    m.rows() == m.cols()
}

/// A bank of `m` low-rank modules in one of the trainable parameterizations.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterBank {
    Lora(LoraBank),
    /// Same storage as LoRA, but every module uses `Σ_i A_i B_i`.
    NaiveSum(LoraBank),
    Clora(LrmBank),
}

impl AdapterBank {
    /// Zero-`ΔW` initialization for a trainable variant.
    pub fn init<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        match config.variant {
            Variant::Lora => Ok(AdapterBank::Lora(LoraBank::init(config, rng)?)),
            Variant::NaiveSum => Ok(AdapterBank::NaiveSum(LoraBank::init(config, rng)?)),
            Variant::Clora => Ok(AdapterBank::Clora(LrmBank::init(config, rng)?)),
            Variant::LambdaSum => Err(Error::Config(
                "the Λ-transformed sum is a construction only; train the collapsed clora bank instead".into(),
            )),
        }
    }

    /// Fully random factors, so every `ΔW_j` is generically nonzero.
    pub fn random<R: Rng + ?Sized>(config: &AdapterConfig, rng: &mut R) -> Result<Self> {
        match config.variant {
            Variant::Lora => Ok(AdapterBank::Lora(LoraBank::random(config, rng)?)),
            Variant::NaiveSum => Ok(AdapterBank::NaiveSum(LoraBank::random(config, rng)?)),
            Variant::Clora => Ok(AdapterBank::Clora(LrmBank::random(config, rng)?)),
            Variant::LambdaSum => Err(Error::Config(
                "no trainable bank for the Λ-transformed sum".into(),
            )),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            AdapterBank::Lora(_) => Variant::Lora,
            AdapterBank::NaiveSum(_) => Variant::NaiveSum,
            AdapterBank::Clora(_) => Variant::Clora,
        }
    }

    pub fn m(&self) -> usize {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.m(),
            AdapterBank::Clora(b) => b.m(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.d(),
            AdapterBank::Clora(b) => b.d(),
        }
    }

    pub fn r(&self) -> usize {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.r(),
            AdapterBank::Clora(b) => b.r(),
        }
    }

    /// `p` for CLoRA banks, 1 otherwise.
    pub fn p(&self) -> usize {
        match self {
            AdapterBank::Clora(b) => b.p(),
            _ => 1,
        }
    }

    pub fn config(&self) -> AdapterConfig {
        AdapterConfig {
            d: self.d(),
            r: self.r(),
            m: self.m(),
            p: self.p(),
            variant: self.variant(),
        }
    }

    pub fn delta_w(&self, j: usize) -> Result<Matrix> {
        match self {
            AdapterBank::Lora(b) => b.delta_w(j),
            AdapterBank::NaiveSum(b) => {
                check_index("module", j, b.m())?;
                b.naive_sum()
            }
            AdapterBank::Clora(b) => b.delta_w(j),
        }
    }

    /// Experts of module `j` when the bank has them (CLoRA only).
    pub fn experts(&self, j: usize) -> Result<Option<ExpertSet>> {
        match self {
            AdapterBank::Clora(b) => b.experts(j).map(Some),
            _ => {
                check_index("module", j, self.m())?;
                Ok(None)
            }
        }
    }

    /// Structural rank bound of `ΔW_j`, capped at `d`.
    pub fn rank_bound(&self) -> usize {
        let bound = match self {
            AdapterBank::Lora(b) => b.r(),
            AdapterBank::NaiveSum(b) => b.m() * b.r(),
            AdapterBank::Clora(b) => b.p() * b.r(),
        };
        bound.min(self.d())
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.scalar_count(),
            AdapterBank::Clora(b) => b.scalar_count(),
        }
    }

    /// Trainable matrices in a fixed order shared with [`BankVars::param_vars`].
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.params(),
            AdapterBank::Clora(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => b.params_mut(),
            AdapterBank::Clora(b) => b.params_mut(),
        }
    }

    /// Named tensors for checkpointing, each name prefixed by `prefix`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => {
                let kind = if matches!(self, AdapterBank::Lora(_)) {
                    "lora"
                } else {
                    "naive"
                };
                for (j, (a, bb)) in b.down.iter().zip(&b.up).enumerate() {
                    out.push((format!("{prefix}{kind}/a/{j}"), a.clone()));
                    out.push((format!("{prefix}{kind}/b/{j}"), bb.clone()));
                }
            }
            AdapterBank::Clora(b) => {
                for h in 0..b.p() {
                    out.push((format!("{prefix}clora/down/{h}"), b.base.down[h].clone()));
                    out.push((format!("{prefix}clora/up/{h}"), b.base.up[h].clone()));
                }
                for (j, row) in b.coeffs.iter().enumerate() {
                    for (h, q) in row.iter().enumerate() {
                        out.push((format!("{prefix}clora/q/{j}/{h}"), q.clone()));
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors).
    pub fn from_named_tensors(prefix: &str, tensors: &[(String, Matrix)]) -> Result<Self> {
        let lookup = |name: String| -> Option<Matrix> {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m.clone())
        };
        let count = |stem: &str| {
            (0..)
                .take_while(|i| {
                    tensors
                        .iter()
                        .any(|(n, _)| *n == format!("{prefix}{stem}{i}"))
                })
                .count()
        };
        if count("clora/down/") > 0 {
            let p = count("clora/down/");
            let mut down = Vec::with_capacity(p);
            let mut up = Vec::with_capacity(p);
            for h in 0..p {
                down.push(
                    lookup(format!("{prefix}clora/down/{h}"))
                        .ok_or_else(|| missing("clora/down", h))?,
                );
                up.push(
                    lookup(format!("{prefix}clora/up/{h}"))
                        .ok_or_else(|| missing("clora/up", h))?,
                );
            }
            let m = (0..)
                .take_while(|j| {
                    tensors
                        .iter()
                        .any(|(n, _)| *n == format!("{prefix}clora/q/{j}/0"))
                })
                .count();
            let coeffs = (0..m)
                .map(|j| {
                    (0..p)
                        .map(|h| {
                            lookup(format!("{prefix}clora/q/{j}/{h}"))
                                .ok_or_else(|| missing("clora/q", j))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(AdapterBank::Clora(LrmBank::new(
                BaseSpace::new(down, up)?,
                coeffs,
            )?));
        }
        for kind in ["lora", "naive"] {
            let m = count(&format!("{kind}/a/"));
            if m == 0 {
                continue;
            }
            let mut down = Vec::with_capacity(m);
            let mut up = Vec::with_capacity(m);
            for j in 0..m {
                down.push(lookup(format!("{prefix}{kind}/a/{j}")).ok_or_else(|| missing("a", j))?);
                up.push(lookup(format!("{prefix}{kind}/b/{j}")).ok_or_else(|| missing("b", j))?);
            }
            let bank = LoraBank::new(down, up)?;
            return Ok(if kind == "lora" {
                AdapterBank::Lora(bank)
            } else {
                AdapterBank::NaiveSum(bank)
            });
        }
        Err(Error::Checkpoint(format!(
            "no adapter bank under prefix `{prefix}`"
        )))
    }

    /// Registers every trainable matrix on `tape` as a parameter.
    pub fn register(&self, tape: &mut Tape) -> BankVars {
        match self {
            AdapterBank::Lora(b) | AdapterBank::NaiveSum(b) => BankVars::Lora {
                naive: matches!(self, AdapterBank::NaiveSum(_)),
                down: b.down.iter().map(|m| tape.param(m.clone())).collect(),
                up: b.up.iter().map(|m| tape.param(m.clone())).collect(),
            },
            AdapterBank::Clora(b) => BankVars::Clora {
                down: b.base.down.iter().map(|m| tape.param(m.clone())).collect(),
                up: b.base.up.iter().map(|m| tape.param(m.clone())).collect(),
                coeffs: b
                    .coeffs
                    .iter()
                    .map(|row| row.iter().map(|m| tape.param(m.clone())).collect())
                    .collect(),
            },
        }
    }
}

fn missing(what: &str, index: usize) -> Error {
    Error::Checkpoint(format!("missing tensor {what}/{index}"))
}

/// Tape handles of an [`AdapterBank`]'s parameters.
#[derive(Clone, Debug)]
pub enum BankVars {
    Lora {
        naive: bool,
        down: Vec<Var>,
        up: Vec<Var>,
    },
    Clora {
        down: Vec<Var>,
        up: Vec<Var>,
        coeffs: Vec<Vec<Var>>,
    },
}

/// One module's update on the tape: `ΔW_j` and the experts summing to it.
#[derive(Clone, Debug)]
pub struct LrmTerm {
    pub delta_w: Var,
    /// `M_h^j` for CLoRA banks; the single product for LoRA-style banks.
    pub experts: Vec<Var>,
}

impl BankVars {
    /// Same order as [`AdapterBank::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            BankVars::Lora { down, up, .. } => down.iter().chain(up).copied().collect(),
            BankVars::Clora { down, up, coeffs } => down
                .iter()
                .chain(up)
                .chain(coeffs.iter().flatten())
                .copied()
                .collect(),
        }
    }

    /// Builds `ΔW_j` for every module on the tape.
    pub fn materialize(&self, tape: &mut Tape) -> Result<Vec<LrmTerm>> {
        match self {
            BankVars::Lora {
                naive: false,
                down,
                up,
            } => down
                .iter()
                .zip(up)
                .map(|(&a, &b)| {
                    let dw = tape.matmul(a, b)?;
                    Ok(LrmTerm {
                        delta_w: dw,
                        experts: vec![dw],
                    })
                })
                .collect(),
            BankVars::Lora {
                naive: true,
                down,
                up,
            } => {
                let products = down
                    .iter()
                    .zip(up)
                    .map(|(&a, &b)| tape.matmul(a, b))
                    .collect::<Result<Vec<_>>>()?;
                let total = sum_vars(tape, &products)?;
                Ok((0..down.len())
                    .map(|_| LrmTerm {
                        delta_w: total,
                        experts: vec![total],
                    })
                    .collect())
            }
            BankVars::Clora { down, up, coeffs } => coeffs
                .iter()
                .map(|row| {
                    let experts = row
                        .iter()
                        .enumerate()
                        .map(|(h, &q)| {
                            let dq = tape.matmul(down[h], q)?;
                            tape.matmul(dq, up[h])
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let delta_w = sum_vars(tape, &experts)?;
                    Ok(LrmTerm { delta_w, experts })
                })
                .collect(),
        }
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Contract("sum of zero matrices".into()))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

/// Result of [`rank_audit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankAudit {
    pub rank: usize,
    pub bound: usize,
    pub ok: bool,
}

/// Numerical rank of `ΔW_j` against the bank's structural bound.
pub fn rank_audit(bank: &AdapterBank, j: usize, tol: f64) -> Result<RankAudit> {
    let rank = bank.delta_w(j)?.numerical_rank(tol)?;
    let bound = bank.rank_bound();
    Ok(RankAudit {
        rank,
        bound,
        ok: rank <= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, DEFAULT_RANK_TOL};

    fn cfg(d: usize, r: usize, m: usize, p: usize, variant: Variant) -> AdapterConfig {
        AdapterConfig {
            d,
            r,
            m,
            p,
            variant,
        }
    }

    #[test]
    fn lora_zero_up_gives_zero_update() {
        let mut rng = seeded_rng(1);
        let bank = LoraBank::init(&cfg(8, 2, 3, 1, Variant::Lora), &mut rng).unwrap();
        assert_eq!(bank.delta_w(1).unwrap(), Matrix::zeros(8, 8));
        assert_eq!(bank.naive_sum().unwrap(), Matrix::zeros(8, 8));
    }

    #[test]
    fn lora_unit_outer_product() {
        let a = Matrix::new(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Matrix::row_vector(&[0.0, 1.0, 0.0, 0.0]);
        let bank = LoraBank::new(vec![a], vec![b]).unwrap();
        let dw = bank.delta_w(0).unwrap();
        let mut expected = Matrix::zeros(4, 4);
        expected.set(0, 1, 1.0);
        assert_eq!(dw, expected);
    }

    #[test]
    fn lora_index_out_of_range() {
        let mut rng = seeded_rng(1);
        let bank = LoraBank::random(&cfg(8, 2, 3, 1, Variant::Lora), &mut rng).unwrap();
        assert!(matches!(
            bank.delta_w(3),
            Err(Error::Index {
                index: 3,
                len: 3,
                ..
            })
        ));
    }

    #[test]
    fn naive_sum_of_one_module_is_lora() {
        let mut rng = seeded_rng(2);
        let bank = LoraBank::random(&cfg(8, 2, 1, 1, Variant::Lora), &mut rng).unwrap();
        assert_eq!(bank.naive_sum().unwrap(), bank.delta_w(0).unwrap());
    }

    #[test]
    fn naive_sum_is_module_independent() {
        let mut rng = seeded_rng(3);
        let bank = AdapterBank::random(&cfg(8, 2, 3, 1, Variant::NaiveSum), &mut rng).unwrap();
        assert_eq!(bank.delta_w(0).unwrap(), bank.delta_w(2).unwrap());
    }

    #[test]
    fn clora_zero_coefficients_give_zero_update() {
        let mut rng = seeded_rng(4);
        let bank = LrmBank::init(&cfg(16, 2, 4, 2, Variant::Clora), &mut rng).unwrap();
        for j in 0..4 {
            assert_eq!(bank.delta_w(j).unwrap(), Matrix::zeros(16, 16));
        }
    }

    #[test]
    fn clora_single_base_is_triple_product() {
        let mut rng = seeded_rng(5);
        let bank = LrmBank::random(&cfg(12, 3, 2, 1, Variant::Clora), &mut rng).unwrap();
        let direct = bank
            .base()
            .down(0)
            .matmul(bank.coeff(1, 0))
            .unwrap()
            .matmul(bank.base().up(0))
            .unwrap();
        assert!(bank.delta_w(1).unwrap().max_abs_diff(&direct).unwrap() < 1e-14);
    }

    #[test]
    fn lambda_with_zero_t_is_zero() {
        let mut rng = seeded_rng(6);
        let base = BaseSpace::init(8, 2, 2, &mut rng);
        let mut comps = LambdaComponents::random(3, 2, 2, &mut rng);
        for row in comps.t.iter_mut() {
            for blk in row.iter_mut() {
                *blk = Matrix::zeros(2, 2);
            }
        }
        assert_eq!(comps.delta_w(&base, 0).unwrap(), Matrix::zeros(8, 8));
    }

    #[test]
    fn lambda_single_term_collapse() {
        let mut rng = seeded_rng(7);
        let base = BaseSpace::init(8, 2, 1, &mut rng);
        let comps = LambdaComponents::random(1, 1, 2, &mut rng);
        let expected = base
            .down(0)
            .matmul(&comps.t[0][0])
            .unwrap()
            .matmul(&comps.r[0][0])
            .unwrap()
            .matmul(base.up(0))
            .unwrap();
        assert!(
            comps
                .delta_w(&base, 0)
                .unwrap()
                .max_abs_diff(&expected)
                .unwrap()
                < 1e-13
        );
    }

    #[test]
    fn lambda_rejects_non_identity_diagonal() {
        let mut rng = seeded_rng(8);
        let mut comps = LambdaComponents::random(2, 1, 2, &mut rng);
        comps.lambda[1][1][0] = Matrix::zeros(2, 2);
        assert!(LambdaComponents::new(comps.t, comps.r, comps.lambda).is_err());
    }

    #[test]
    fn lrm_forward_cases() {
        let mut rng = seeded_rng(9);
        let x = Matrix::random_normal(5, 6, 1.0, &mut rng);
        assert_eq!(lrm_forward(&x, &Matrix::zeros(6, 6)).unwrap(), x);
        assert_eq!(lrm_forward(&x, &Matrix::identity(6)).unwrap(), x.scale(2.0));
        let dw = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let via_sum = Matrix::identity(6).add(&dw).unwrap();
        let expected = x.matmul(&via_sum).unwrap();
        assert!(
            lrm_forward(&x, &dw)
                .unwrap()
                .max_abs_diff(&expected)
                .unwrap()
                < 1e-12
        );
        assert!(lrm_forward(&Matrix::zeros(2, 5), &dw).is_err());
    }

    #[test]
    fn merge_cases() {
        let mut rng = seeded_rng(10);
        let w = Matrix::random_normal(6, 9, 1.0, &mut rng);
        assert_eq!(merge_into_weight(&w, &Matrix::zeros(6, 6)).unwrap(), w);
        let dw = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let merged = merge_into_weight(&Matrix::identity(6), &dw).unwrap();
        assert_eq!(merged, Matrix::identity(6).add(&dw).unwrap());
        assert!(merge_into_weight(&Matrix::zeros(5, 9), &dw).is_err());
    }

    #[test]
    fn vit_base_parameter_counts() {
        let clora = cfg(768, 8, 24, 4, Variant::Clora);
        assert_eq!(param_count(&clora, 0).unwrap(), 55_296);
        let lora = AdapterConfig {
            variant: Variant::Lora,
            ..clora
        };
        assert_eq!(param_count(&lora, 0).unwrap(), 294_912);
    }

    #[test]
    fn smallest_clora_count() {
        assert_eq!(param_count(&cfg(2, 1, 1, 1, Variant::Clora), 0).unwrap(), 5);
        assert!(param_count(&cfg(2, 0, 2, 1, Variant::Clora), 0).is_err());
    }

    #[test]
    fn census_matches_formula() {
        let mut rng = seeded_rng(11);
        for variant in [Variant::Lora, Variant::NaiveSum, Variant::Clora] {
            let c = cfg(16, 4, 6, 3, variant);
            let bank = AdapterBank::init(&c, &mut rng).unwrap();
            assert_eq!(
                bank.scalar_count(),
                param_count(&c, 0).unwrap(),
                "{variant}"
            );
        }
        let c = cfg(16, 4, 6, 3, Variant::LambdaSum);
        let bank = LambdaSumBank::init(&c, &mut rng).unwrap();
        assert_eq!(
            bank.trainable_scalar_count(),
            param_count(&c, 7).unwrap() - 7
        );
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 8, 2, 1, Variant::Lora).validate().is_err());
        assert!(cfg(8, 2, 2, 2, Variant::Clora).validate().is_err());
        assert!(cfg(8, 2, 2, 0, Variant::Clora).validate().is_err());
        assert!(cfg(8, 2, 0, 1, Variant::Lora).validate().is_err());
        assert!(cfg(8, 2, 3, 2, Variant::Clora).validate().is_ok());
    }

    #[test]
    fn audit_of_zero_bank() {
        let mut rng = seeded_rng(12);
        let bank = AdapterBank::init(&cfg(16, 2, 3, 2, Variant::Clora), &mut rng).unwrap();
        let audit = rank_audit(&bank, 0, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(
            audit,
            RankAudit {
                rank: 0,
                bound: 4,
                ok: true
            }
        );
    }

    #[test]
    fn audit_random_banks_hit_their_bounds() {
        let mut rng = seeded_rng(13);
        let clora = AdapterBank::random(&cfg(64, 4, 3, 2, Variant::Clora), &mut rng).unwrap();
        assert_eq!(
            rank_audit(&clora, 1, DEFAULT_RANK_TOL).unwrap(),
            RankAudit {
                rank: 8,
                bound: 8,
                ok: true
            }
        );
        let lora = AdapterBank::random(&cfg(64, 4, 3, 1, Variant::Lora), &mut rng).unwrap();
        assert_eq!(
            rank_audit(&lora, 2, DEFAULT_RANK_TOL).unwrap(),
            RankAudit {
                rank: 4,
                bound: 4,
                ok: true
            }
        );
    }

    #[test]
    fn tape_materialization_matches_matrix_path() {
        let mut rng = seeded_rng(14);
        for variant in [Variant::Lora, Variant::NaiveSum, Variant::Clora] {
            let bank = AdapterBank::random(&cfg(10, 2, 3, 2, variant), &mut rng).unwrap();
            let mut tape = Tape::new();
            let vars = bank.register(&mut tape);
            assert_eq!(vars.param_vars().len(), bank.params().len());
            let terms = vars.materialize(&mut tape).unwrap();
            for (j, term) in terms.iter().enumerate() {
                let diff = tape
                    .value(term.delta_w)
                    .max_abs_diff(&bank.delta_w(j).unwrap())
                    .unwrap();
                assert!(diff < 1e-13, "{variant} j={j}: {diff}");
            }
        }
    }

    #[test]
    fn named_tensor_round_trip() {
        let mut rng = seeded_rng(15);
        for variant in [Variant::Lora, Variant::NaiveSum, Variant::Clora] {
            let bank = AdapterBank::random(&cfg(10, 2, 3, 2, variant), &mut rng).unwrap();
            let named = bank.named_tensors("adapter/");
            assert_eq!(
                AdapterBank::from_named_tensors("adapter/", &named).unwrap(),
                bank
            );
        }
    }
}

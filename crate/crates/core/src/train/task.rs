use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, Matrix};
use crate::vit::VitConfig;

/// Parameters of a synthetic patch-sequence classification task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub classes: usize,
    /// Patches per sample.
    pub n: usize,
    pub patch_dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Scale of the class mean patterns.
    pub separation: f64,
    /// Standard deviation of the per-sample noise.
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// A two-class task whose class means differ along a fixed pattern.
    pub fn separable(n: usize, patch_dim: usize, seed: u64) -> Self {
        Self {
            classes: 2,
            n,
            patch_dim,
            train: 512,
            val: 128,
            test: 128,
            separation: 0.7,
            noise: 1.0,
            seed,
        }
    }

    /// The matching input and output sizes of a model for this task.
    pub fn fits(&self, vit: &VitConfig) -> Result<()> {
        if (vit.n, vit.patch_dim, vit.classes) != (self.n, self.patch_dim, self.classes) {
            return Err(Error::Config(format!(
                "task has n={}, patch_dim={}, classes={} but model has n={}, patch_dim={}, classes={}",
                self.n, self.patch_dim, self.classes, vit.n, vit.patch_dim, vit.classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `n×patch_dim`.
    pub patches: Matrix,
    pub label: usize,
}

/// Class-conditioned Gaussian patch sequences, regenerable from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub means: Vec<Matrix>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SyntheticTask {
    pub fn generate(spec: TaskSpec) -> Result<Self> {
        if spec.classes < 2
            || spec.n == 0
            || spec.patch_dim == 0
            || spec.train == 0
            || spec.val == 0
        {
            return Err(Error::Config(format!("degenerate task spec {spec:?}")));
        }
        if !(spec.noise >= 0.0 && spec.separation > 0.0) {
            return Err(Error::Config("need noise >= 0 and separation > 0".into()));
        }
        let mut rng = seeded_rng(spec.seed);
        let means: Vec<Matrix> = (0..spec.classes)
            .map(|_| Matrix::random_normal(spec.n, spec.patch_dim, spec.separation, &mut rng))
            .collect();
        let split = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Sample> {
            (0..count)
                .map(|i| {
                    // Balanced labels, order shuffled by the sampler anyway.
                    let label = i % spec.classes;
                    let mean = &means[label];
                    let patches = Matrix::from_fn(spec.n, spec.patch_dim, |a, k| {
                        let z: f64 = StandardNormal.sample(rng);
                        mean.get(a, k) + spec.noise * z
                    });
                    Sample { patches, label }
                })
                .collect()
        };
        let train = split(spec.train, &mut rng);
        let val = split(spec.val, &mut rng);
        let test = split(spec.test, &mut rng);
        Ok(Self {
            spec,
            means,
            train,
            val,
            test,
        })
    }

    /// A random permutation of the training indices.
    pub fn shuffled_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

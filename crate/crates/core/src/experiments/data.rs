//! Synthetic classification tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Dataset, LabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One isotropic Gaussian per class around a random mean.
    GaussianMixture,
    /// Interleaved spiral arms in the first two coordinates; the rest is noise.
    Spirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    #[serde(alias = "K")]
    pub k: usize,
    pub noise_std: f64,
    /// Fixes the task itself (class means); samples are drawn from a separate seed.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            generator: Generator::GaussianMixture,
            n_train: 500,
            n_test: 1000,
            d: 20,
            k: 2,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.k)));
        }
        if self.n_train < self.k || self.n_test < self.k {
            return Err(Error::Config(format!(
                "n_train = {} and n_test = {} must each be >= K = {}",
                self.n_train, self.n_test, self.k
            )));
        }
        if self.d == 0 || (self.generator == Generator::Spirals && self.d < 2) {
            return Err(Error::Config(format!("input dimension {} too small", self.d)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// A fixed task: the generator plus its class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    means: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let means = (0..spec.k)
            .map(|_| (0..spec.d).map(|_| gaussian(&mut rng)).collect())
            .collect();
        Ok(SyntheticTask {
            spec: spec.clone(),
            means,
        })
    }

    /// One input of class `class`.
    pub fn draw_input(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = &self.spec;
        match s.generator {
            Generator::GaussianMixture => self.means[class]
                .iter()
                .map(|m| m + s.noise_std * gaussian(rng))
                .collect(),
            Generator::Spirals => {
                let t: f64 = rng.random_range(0.05..1.0);
                let angle = 2.0 * std::f64::consts::PI * (class as f64 / s.k as f64 + 1.5 * t);
                let mut x = vec![t * angle.cos(), t * angle.sin()];
                for v in &mut x {
                    *v += s.noise_std * 0.1 * gaussian(rng);
                }
                x.extend((2..s.d).map(|_| s.noise_std * gaussian(rng)));
                x
            }
        }
    }

    /// `n` class-balanced samples (class `i mod K`) in shuffled order.
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let mut classes: Vec<usize> = (0..n).map(|i| i % self.spec.k).collect();
        classes.shuffle(rng);
        let samples = classes
            .into_iter()
            .map(|c| LabeledSample::one_hot(self.draw_input(c, rng), c, self.spec.k))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    /// Train and test sets drawn from disjoint RNG streams of `sample_seed`.
    pub fn datasets(&self, sample_seed: u64) -> Result<(Dataset, Dataset)> {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            rng.set_stream(s);
            rng
        };
        let train = self.draw(self.spec.n_train, &mut stream(1))?;
        let test = self.draw(self.spec.n_test, &mut stream(2))?;
        Ok((train, test))
    }

    /// `train` plus `size` fresh inputs with labels drawn uniformly over the classes.
    pub fn confusion_set(&self, train: &Dataset, size: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let pool: Vec<Vec<f64>> = (0..size)
            .map(|_| {
                let c = rng.random_range(0..self.spec.k);
                self.draw_input(c, rng)
            })
            .collect();
        make_confusion_set(train, &pool, self.spec.k, rng)
    }
}

/// Train and test sets of a task, sampled with the task seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    SyntheticTask::new(spec)?.datasets(spec.seed)
}

/// Append every input of `pool` with a label uniform over `k` classes, independent of the input.
pub fn make_confusion_set(
    train: &Dataset,
    pool: &[Vec<f64>],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if k != train.num_classes() {
        return Err(Error::Config(format!(
            "confusion labels over {k} classes, training set has {}",
            train.num_classes()
        )));
    }
    let mut samples = train.samples().to_vec();
    for x in pool {
        let c = rng.random_range(0..k);
        samples.push(LabeledSample::one_hot(x.clone(), c, k)?);
    }
    Dataset::new(samples)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// L2 penalty on the probe weights.
pub const PROBE_LAMBDA: f64 = 1e-3;
/// Stop once the full gradient norm falls below this.
pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 50_000;

/// Row-major features with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub values: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn new(values: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || values.len() != dim * labels.len() {
            return invalid(format!(
                "{} feature values for {} rows of width {dim}",
                values.len(),
                labels.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("features must be finite");
        }
        Ok(Features { values, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        Features {
            values: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            dim: self.dim,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub overall_accuracy: f64,
    /// Accuracy per true class; `NaN` for classes absent from the test split.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// A fitted multinomial logistic model on mean-centered inputs.
#[derive(Clone, Debug)]
pub struct SoftmaxProbe {
    mean: Vec<f64>,
    /// `[dim + 1, classes]`, bias in the last row.
    weights: Vec<f64>,
    classes: usize,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl SoftmaxProbe {
    /// Full-batch Nesterov gradient descent on the L2-regularized
    /// cross-entropy until the gradient norm drops below [`PROBE_GRAD_TOL`].
    pub fn fit(train: &Features, classes: usize) -> Result<Self> {
        let n = train.len();
        let d = train.dim;
        let mut seen = vec![false; classes];
        for &l in &train.labels {
            if l >= classes {
                return invalid(format!("label {l} out of range for {classes} classes"));
            }
            seen[l] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return invalid("linear probe needs at least two classes in the train split");
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v / n as f64;
            }
        }
        let da = d + 1;
        let mut x = Vec::with_capacity(n * da);
        for i in 0..n {
            let row = train.row(i);
            x.extend((0..d).map(|j| row[j] - mean[j]));
            x.push(1.0);
        }

        // Step size from the largest eigenvalue of X^T X / n.
        let mut v = vec![1.0 / (da as f64).sqrt(); da];
        let mut lambda_max = 0.0;
        for _ in 0..100 {
            let mut w = vec![0.0; da];
            for r in x.chunks(da) {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(r).for_each(|(wi, ri)| *wi += dot * ri / n as f64);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda_max = norm;
            v = w.iter().map(|a| a / norm).collect();
        }
        let lipschitz = 0.5 * lambda_max * 1.01 + PROBE_LAMBDA;
        let step = 1.0 / lipschitz;
        let kappa = lipschitz / PROBE_LAMBDA;
        let momentum = (kappa.sqrt() - 1.0) / (kappa.sqrt() + 1.0);

        let c = classes;
        let grad = |w: &[f64]| -> (Vec<f64>, f64) {
            let mut g = vec![0.0; da * c];
            let mut logits = vec![0.0; c];
            for (i, r) in x.chunks(da).enumerate() {
                for k in 0..c {
                    logits[k] = (0..da).map(|j| r[j] * w[j * c + k]).sum();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for k in 0..c {
                    let p = (logits[k] - mx).exp() / z - if train.labels[i] == k { 1.0 } else { 0.0 };
                    for j in 0..da {
                        g[j * c + k] += p * r[j] / n as f64;
                    }
                }
            }
            for j in 0..d {
                for k in 0..c {
                    g[j * c + k] += PROBE_LAMBDA * w[j * c + k];
                }
            }
            let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            (g, norm)
        };

        let mut w = vec![0.0; da * c];
        let mut prev = w.clone();
        let mut iterations = 0;
        let mut grad_norm = grad(&w).1;
        while grad_norm >= PROBE_GRAD_TOL && iterations < PROBE_MAX_ITERS {
            let look: Vec<f64> = w.iter().zip(&prev).map(|(a, b)| a + momentum * (a - b)).collect();
            let (g, _) = grad(&look);
            prev = std::mem::replace(&mut w, look.iter().zip(&g).map(|(a, b)| a - step * b).collect());
            grad_norm = grad(&w).1;
            iterations += 1;
        }
        Ok(SoftmaxProbe {
            mean,
            weights: w,
            classes,
            iterations,
            grad_norm,
        })
    }

    /// Highest-scoring class; ties go to the lowest class index.
    pub fn predict(&self, row: &[f64]) -> usize {
        let d = self.mean.len();
        let c = self.classes;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..c {
            let mut s = self.weights[d * c + k];
            for (j, (x, m)) in row.iter().zip(&self.mean).enumerate() {
                s += (x - m) * self.weights[j * c + k];
            }
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        best
    }
}

pub fn evaluate(probe: &SoftmaxProbe, test: &Features, classes: usize) -> ProbeResult {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for i in 0..test.len() {
        confusion[test.labels[i]][probe.predict(test.row(i))] += 1;
    }
    let total = test.len().max(1) as f64;
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    ProbeResult {
        overall_accuracy: correct as f64 / total,
        per_class_accuracy,
        confusion,
    }
}

/// Fit on `train`, report on `test`.
pub fn linear_probe(train: &Features, test: &Features, classes: usize) -> Result<ProbeResult> {
    if train.dim != test.dim {
        return invalid(format!(
            "train width {} differs from test width {}",
            train.dim, test.dim
        ));
    }
    if let Some(&l) = test.labels.iter().find(|&&l| l >= classes) {
        return invalid(format!("test label {l} out of range for {classes} classes"));
    }
    let probe = SoftmaxProbe::fit(train, classes)?;
    Ok(evaluate(&probe, test, classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over episodes.
    pub std: f64,
    /// `std / sqrt(episodes)`.
    pub std_error: f64,
}

/// X-way Y-shot episodes: pick `x_way` classes, `y_shot` support rows each,
/// and classify every remaining row of those classes.
pub fn few_shot_probe(
    features: &Features,
    x_way: usize,
    y_shot: usize,
    episodes: usize,
    seed: u64,
) -> Result<FewShotResult> {
    if x_way == 0 || y_shot == 0 || episodes == 0 {
        return invalid("few-shot needs x_way, y_shot and episodes >= 1");
    }
    let classes = features.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in features.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let eligible: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() > y_shot).collect();
    if eligible.len() < x_way {
        return invalid(format!(
            "{x_way}-way {y_shot}-shot needs {x_way} classes with more than {y_shot} samples, found {}",
            eligible.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracies = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let chosen: Vec<usize> = eligible.choose_multiple(&mut rng, x_way).copied().collect();
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (local, &c) in chosen.iter().enumerate() {
            let mut rows = by_class[c].clone();
            rows.shuffle(&mut rng);
            support.extend(rows[..y_shot].iter().map(|&r| (r, local)));
            query.extend(rows[y_shot..].iter().map(|&r| (r, local)));
        }
        if x_way == 1 {
            accuracies.push(1.0);
            continue;
        }
        let relabel = |rows: &[(usize, usize)]| {
            let mut f = features.select(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
            f.labels = rows.iter().map(|r| r.1).collect();
            f
        };
        let result = linear_probe(&relabel(&support), &relabel(&query), x_way)?;
        accuracies.push(result.overall_accuracy);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = if accuracies.len() > 1 {
        accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(FewShotResult {
        accuracies,
        mean,
        std: var.sqrt(),
        std_error: var.sqrt() / n.sqrt(),
    })
}

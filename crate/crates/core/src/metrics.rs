//! Disentanglement scores over ground-truth factors, their class-conditional
//! versions, majority-vote clustering accuracy, and importance-weighted
//! likelihood bounds.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{FactorTable, ImageDataset};
use crate::distributions::{argmax, log_normal_density, log_standard_normal_density};
use crate::error::{Error, Result};
use crate::models::{one_hot, MeanCodes, Model, Variant};
use crate::tensor::{Container, Graph, RandomSource, Tensor};

/// Dimensions whose dataset standard deviation is below this are ignored.
pub const COLLAPSED_STD: f64 = 1e-6;
pub const DEFAULT_MIG_BINS: usize = 20;
pub const DEFAULT_MIN_CLASS_EXAMPLES: usize = 100;

/// Continuous posterior means, class responsibilities and the ground-truth
/// factors of the examples they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationDump {
    /// `[N, D]`
    pub reps: Tensor,
    /// `[N, d]`
    pub alpha: Tensor,
    pub factors: FactorTable,
}

impl RepresentationDump {
    pub fn new(reps: Tensor, alpha: Tensor, factors: FactorTable) -> Result<Self> {
        if reps.rank() != 2 || alpha.rank() != 2 {
            return Err(Error::shape("RepresentationDump", "reps and alpha must be rank 2"));
        }
        let n = reps.shape()[0];
        if alpha.shape()[0] != n || factors.len() != n {
            return Err(Error::shape(
                "RepresentationDump",
                format!(
                    "reps {:?}, alpha {:?}, {} factor rows",
                    reps.shape(),
                    alpha.shape(),
                    factors.len()
                ),
            ));
        }
        if !reps.data().iter().chain(alpha.data()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "RepresentationDump",
            });
        }
        Ok(RepresentationDump { reps, alpha, factors })
    }

    /// Public means followed by the private mean: the most likely mode's for
    /// the exact variant, the responsibility-weighted average of mode means
    /// for the approximate one.
    pub fn from_codes(codes: &MeanCodes, variant: Variant, factors: FactorTable) -> Result<Self> {
        let n = codes.z_mu.shape()[0];
        let pb = codes.z_mu.shape()[1];
        let d = codes.alpha.shape()[1];
        let pr = codes.w_mu.as_ref().map_or(0, |w| w.shape()[2]);
        let classes = codes.classes();
        let mut reps = Vec::with_capacity(n * (pb + pr));
        for (i, &class) in classes.iter().enumerate() {
            reps.extend_from_slice(&codes.z_mu.data()[i * pb..(i + 1) * pb]);
            if pr == 0 {
                continue;
            }
            match variant {
                Variant::Exact => reps.extend_from_slice(codes.private_mode(i, class).unwrap()),
                Variant::Approx | Variant::Joint => {
                    let alpha = &codes.alpha.data()[i * d..(i + 1) * d];
                    for j in 0..pr {
                        let mean: f64 = (0..d)
                            .map(|m| alpha[m] as f64 * codes.private_mode(i, m).unwrap()[j] as f64)
                            .sum();
                        reps.push(mean as f32);
                    }
                }
            }
        }
        RepresentationDump::new(Tensor::new(&[n, pb + pr], reps)?, codes.alpha.clone(), factors)
    }

    /// Encodes every example of `data` in batches of `batch`.
    pub fn from_model(model: &Model, data: &ImageDataset, batch: usize) -> Result<Self> {
        let codes = model.encode_dataset_means(data, batch)?;
        RepresentationDump::from_codes(&codes, model.config().variant, data.factors().clone())
    }

    pub fn len(&self) -> usize {
        self.reps.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most likely class per example.
    pub fn classes(&self) -> Vec<usize> {
        let d = self.alpha.shape()[1];
        self.alpha.data().chunks(d).map(argmax).collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert("reps", self.reps.clone());
        c.insert("alpha", self.alpha.clone());
        self.factors.write_into(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let reps = c.require("reps")?.clone();
        let n = reps.shape().first().copied().unwrap_or(0);
        let factors = FactorTable::from_container(c, n)?;
        RepresentationDump::new(reps, c.require("alpha")?.clone(), factors)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub value: f64,
    pub n: usize,
}

/// One evaluated metric. Conditional metrics also carry their per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub per_class: Vec<ClassScore>,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64, n: usize, seed: u64) -> Self {
        MetricReport {
            metric: metric.into(),
            value,
            per_class: Vec::new(),
            n,
            seed,
        }
    }

    pub fn conditional(metric: impl Into<String>, score: ConditionalScore, seed: u64) -> Self {
        MetricReport {
            metric: metric.into(),
            value: score.value,
            n: score.per_class.iter().map(|c| c.n).sum(),
            per_class: score.per_class,
            seed,
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "metric,value,class,seed,n";

/// One row per report plus one per class score; the overall row leaves `class` empty.
pub fn write_reports_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{REPORT_CSV_HEADER}").map_err(io)?;
    for r in reports {
        writeln!(w, "{},{},,{},{}", r.metric, r.value, r.seed, r.n).map_err(io)?;
        for c in &r.per_class {
            writeln!(w, "{},{},{},{},{}", r.metric, c.value, c.class, r.seed, c.n).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn column_stats(reps: &Tensor) -> Vec<(f64, f64)> {
    let (n, d) = (reps.shape()[0], reps.shape()[1]);
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| reps.data()[i * d + j] as f64).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|i| (reps.data()[i * d + j] as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            (mean, var.sqrt())
        })
        .collect()
}

fn check_rows(reps: &Tensor, factors: &FactorTable) -> Result<(usize, usize)> {
    match *reps.shape() {
        [n, d] if n == factors.len() && n > 0 && d > 0 => Ok((n, d)),
        ref s => Err(Error::Metric(format!(
            "representation {s:?} does not match {} factor rows",
            factors.len()
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorVaeConfig {
    pub batch: usize,
    pub train_votes: usize,
    pub eval_votes: usize,
}

impl Default for FactorVaeConfig {
    fn default() -> Self {
        FactorVaeConfig {
            batch: 64,
            train_votes: 800,
            eval_votes: 200,
        }
    }
}

/// Examples grouped by the value they take for each factor.
fn groups_by_value(factors: &FactorTable) -> Vec<Vec<Vec<usize>>> {
    (0..factors.num_factors())
        .map(|f| {
            let mut g = vec![Vec::new(); factors.cardinalities()[f]];
            for n in 0..factors.len() {
                g[factors.get(n, f)].push(n);
            }
            g
        })
        .collect()
}

/// One vote: fix a random value of a random active factor, draw a batch that
/// shares it, and return `(dimension with least normalized variance, factor)`.
#[allow(clippy::too_many_arguments)]
fn factorvae_vote(
    scaled: &[f64],
    dims: usize,
    active_dims: &[usize],
    active_factors: &[usize],
    groups: &[Vec<Vec<usize>>],
    factors: &FactorTable,
    batch: usize,
    rng: &mut RandomSource,
) -> (usize, usize) {
    let k = active_factors[rng.below(active_factors.len())];
    let v = factors.get(rng.below(factors.len()), k);
    let pool = &groups[k][v];
    let members: Vec<usize> = (0..batch).map(|_| pool[rng.below(pool.len())]).collect();
    let mut best = (f64::INFINITY, active_dims[0]);
    for &j in active_dims {
        let mean = members.iter().map(|&n| scaled[n * dims + j]).sum::<f64>() / batch as f64;
        let var = members
            .iter()
            .map(|&n| (scaled[n * dims + j] - mean).powi(2))
            .sum::<f64>()
            / batch as f64;
        if var < best.0 {
            best = (var, j);
        }
    }
    (best.1, k)
}

/// Majority-vote accuracy of predicting the fixed factor from the
/// least-varying normalized dimension. Factors constant over the table do
/// not take part.
pub fn factorvae_metric(
    reps: &Tensor,
    factors: &FactorTable,
    config: FactorVaeConfig,
    rng: &mut RandomSource,
) -> Result<f64> {
    let (n, dims) = check_rows(reps, factors)?;
    if config.batch == 0 || config.train_votes == 0 || config.eval_votes == 0 {
        return Err(Error::InvalidArgument(format!(
            "vote counts and batch must be positive: {config:?}"
        )));
    }
    let active_factors = factors.active_factors();
    if active_factors.len() < 2 {
        return Err(Error::Metric(format!(
            "FactorVAE metric needs at least two varying factors, found {}",
            active_factors.len()
        )));
    }
    let stats = column_stats(reps);
    let active_dims: Vec<usize> = (0..dims).filter(|&j| stats[j].1 >= COLLAPSED_STD).collect();
    if active_dims.is_empty() {
        return Err(Error::Metric("every representation dimension has collapsed".into()));
    }
    let mut scaled = vec![0.0f64; n * dims];
    for (i, row) in reps.data().chunks(dims).enumerate() {
        for &j in &active_dims {
            scaled[i * dims + j] = row[j] as f64 / stats[j].1;
        }
    }
    let groups = groups_by_value(factors);
    let vote = |rng: &mut RandomSource| {
        factorvae_vote(
            &scaled,
            dims,
            &active_dims,
            &active_factors,
            &groups,
            factors,
            config.batch,
            rng,
        )
    };
    let num_factors = factors.num_factors();
    let mut table = vec![0usize; dims * num_factors];
    for _ in 0..config.train_votes {
        let (j, k) = vote(rng);
        table[j * num_factors + k] += 1;
    }
    let classifier: Vec<usize> = table
        .chunks(num_factors)
        .map(|row| {
            let mut best = 0;
            for (k, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let correct = (0..config.eval_votes)
        .filter(|_| {
            let (j, k) = vote(rng);
            classifier[j] == k
        })
        .count();
    Ok(correct as f64 / config.eval_votes as f64)
}

/// Equal-count bins. Equal values share a bin, so the assignment depends
/// only on the order of the values.
pub fn quantile_bins(values: &[f64], num_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut bins = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let bin = start * num_bins / n;
        for &i in &order[start..end] {
            bins[i] = bin;
        }
        start = end;
    }
    bins
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between two discrete label vectors.
pub fn discrete_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; na * nb];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let n = n as f64;
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Per-factor normalized gap between the two most informative dimensions.
/// Factors with a single value give `None`.
pub fn mig_terms(reps: &Tensor, factors: &FactorTable, num_bins: usize) -> Result<Vec<Option<f64>>> {
    let (n, dims) = check_rows(reps, factors)?;
    if num_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "MIG needs at least 2 bins, got {num_bins}"
        )));
    }
    let binned: Vec<Vec<usize>> = (0..dims)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| reps.data()[i * dims + j] as f64).collect();
            quantile_bins(&col, num_bins)
        })
        .collect();
    Ok((0..factors.num_factors())
        .map(|f| {
            let values = factors.column(f);
            let h = entropy(&factors.value_counts(f), n);
            if h <= 0.0 {
                log::warn!("MIG: factor {} takes a single value and is skipped", factors.names()[f]);
                return None;
            }
            let mut mi: Vec<f64> = binned.iter().map(|b| discrete_mutual_information(b, &values)).collect();
            mi.sort_by(|a, b| b.total_cmp(a));
            let second = mi.get(1).copied().unwrap_or(0.0);
            Some(((mi[0] - second) / h).clamp(0.0, 1.0))
        })
        .collect())
}

/// Mean over varying factors of the mutual information gap.
pub fn mig(reps: &Tensor, factors: &FactorTable, num_bins: usize) -> Result<f64> {
    let terms: Vec<f64> = mig_terms(reps, factors, num_bins)?.into_iter().flatten().collect();
    if terms.is_empty() {
        return Err(Error::Metric("MIG: no factor takes more than one value".into()));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalScore {
    pub value: f64,
    pub per_class: Vec<ClassScore>,
}

/// `sum_c p(c) * metric(examples of class c)` with empirical class
/// frequencies. Factors constant inside a class drop out because the metrics
/// only use factors that vary over the table they are given.
pub fn conditional_metric<F>(
    mut metric: F,
    reps: &Tensor,
    factors: &FactorTable,
    labels: &[usize],
    min_examples: usize,
) -> Result<ConditionalScore>
where
    F: FnMut(&Tensor, &FactorTable) -> Result<f64>,
{
    let (n, dims) = check_rows(reps, factors)?;
    if labels.len() != n {
        return Err(Error::Metric(format!("{} labels for {n} examples", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut per_class = Vec::new();
    let mut value = 0.0;
    for (class, idx) in members.iter().enumerate().filter(|(_, m)| !m.is_empty()) {
        if idx.len() < min_examples {
            return Err(Error::Metric(format!(
                "class {class} has {} examples, fewer than the required {min_examples}",
                idx.len()
            )));
        }
        let rows: Vec<f32> = idx
            .iter()
            .flat_map(|&i| reps.data()[i * dims..(i + 1) * dims].iter().copied())
            .collect();
        let sub = Tensor::new(&[idx.len(), dims], rows)?;
        let score = metric(&sub, &factors.subset(idx))?;
        value += score * idx.len() as f64 / n as f64;
        per_class.push(ClassScore {
            class,
            value: score,
            n: idx.len(),
        });
    }
    Ok(ConditionalScore { value, per_class })
}

/// Accuracy after mapping each cluster to its most frequent true label.
pub fn unsupervised_accuracy(clusters: &[usize], labels: &[usize]) -> Result<f64> {
    if clusters.is_empty() {
        return Err(Error::Metric("accuracy of an empty prediction set".into()));
    }
    if clusters.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *counts.entry(c).or_default().entry(l).or_default() += 1;
    }
    let correct: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(correct as f64 / clusters.len() as f64)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Models that can produce importance weights `log p(x, h) - log q(h | x)`
/// for `k` posterior draws per example, with discrete latents summed out.
pub trait ImportanceSampler {
    /// Row-major `[batch, k]` log weights.
    fn log_weights(&self, x: &Tensor, k: usize, rng: &mut RandomSource) -> Result<Vec<f64>>;
}

/// Mean over the batch of `-log(1/K sum_k w_k)` in nats.
pub fn iwae_nll(model: &impl ImportanceSampler, x: &Tensor, k: usize, rng: &mut RandomSource) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "importance sample count must be at least 1".into(),
        ));
    }
    let lw = model.log_weights(x, k, rng)?;
    let rows = lw.len() / k;
    let total: f64 = lw.chunks(k).map(|w| -(log_sum_exp(w) - (k as f64).ln())).sum();
    Ok(total / rows as f64)
}

/// `z ~ N(0, 1)`, `x | z ~ N(z, sigma_x^2)` with a Gaussian proposal
/// `q(z | x) = N(q_gain * x, q_std^2)`. The marginal is `N(0, 1 + sigma_x^2)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussianToy {
    pub sigma_x: f64,
    pub q_gain: f64,
    pub q_std: f64,
}

impl LinearGaussianToy {
    /// Exact `-log p(x)`.
    pub fn exact_nll(&self, x: f64) -> f64 {
        let var = 1.0 + self.sigma_x * self.sigma_x;
        0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
    }
}

fn log_normal_1d(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - 0.5 * z * z
}

impl ImportanceSampler for LinearGaussianToy {
    fn log_weights(&self, x: &Tensor, k: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len() * k);
        for &xv in x.data() {
            let xv = xv as f64;
            let mean = self.q_gain * xv;
            for _ in 0..k {
                let z = mean + self.q_std * rng.normal();
                out.push(
                    log_normal_1d(z, 0.0, 1.0) + log_normal_1d(xv, z, self.sigma_x)
                        - log_normal_1d(z, mean, self.q_std),
                );
            }
        }
        Ok(out)
    }
}

/// Bernoulli log-likelihood `sum x log s(l) + (1 - x) log(1 - s(l))` of one image.
fn bernoulli_log_likelihood(x: &[f32], logits: &[f32]) -> f64 {
    x.iter()
        .zip(logits)
        .map(|(&x, &l)| {
            let (x, l) = (x as f64, l as f64);
            x * l - (l.max(0.0) + (-l.abs()).exp().ln_1p())
        })
        .sum()
}

impl ImportanceSampler for Model {
    /// `z` is drawn once per sample and shared by every class; the private
    /// variable is drawn from the class's own mode. The class prior is uniform
    /// and each mode's prior is `N(prior_c, I)`.
    fn log_weights(&self, x: &Tensor, k: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
        let cfg = self.config().clone();
        let (b, d, pb, pr) = (x.shape()[0], cfg.discrete_dim, cfg.public_dim, cfg.private_dim);
        let pixels = x.len() / b.max(1);
        let mut g = Graph::new();
        let out = self.encode(&mut g, x)?;
        let z_mu = g.value(out.z.mu).clone();
        let z_lv = g.value(out.z.logvar).clone();
        let w = out
            .w
            .as_ref()
            .map(|w| (g.value(w.mu).clone(), g.value(w.logvar).clone()));
        let rows = b * d;
        let classes: Vec<usize> = (0..rows).map(|r| r % d).collect();
        let discrete = one_hot(&classes, d);
        let log_class_prior = -(d as f64).ln();
        let zeros_pb = vec![0.0f32; pb];

        let mut lw = vec![0.0f64; b * k];
        for s in 0..k {
            let mut z = vec![0.0f32; rows * pb];
            let mut log_qz = vec![0.0f64; b];
            let mut log_pz = vec![0.0f64; b];
            for i in 0..b {
                let (mu, lv) = (&z_mu.data()[i * pb..(i + 1) * pb], &z_lv.data()[i * pb..(i + 1) * pb]);
                let zi: Vec<f32> = mu
                    .iter()
                    .zip(lv)
                    .map(|(&m, &l)| m + (0.5 * l).exp() * rng.normal() as f32)
                    .collect();
                log_qz[i] = log_normal_density(&zi, mu, lv);
                log_pz[i] = log_standard_normal_density(&zi, &zeros_pb);
                for c in 0..d {
                    z[(i * d + c) * pb..(i * d + c + 1) * pb].copy_from_slice(&zi);
                }
            }
            let mut log_w_terms = vec![0.0f64; rows];
            let w_tensor = match &w {
                Some((w_mu, w_lv)) => {
                    let mut wv = vec![0.0f32; rows * pr];
                    for r in 0..rows {
                        let (i, c) = (r / d, r % d);
                        let base = (i * d + c) * pr;
                        let (mu, lv) = (&w_mu.data()[base..base + pr], &w_lv.data()[base..base + pr]);
                        let wr: Vec<f32> = mu
                            .iter()
                            .zip(lv)
                            .map(|(&m, &l)| m + (0.5 * l).exp() * rng.normal() as f32)
                            .collect();
                        log_w_terms[r] =
                            log_standard_normal_density(&wr, self.prior().mode(c)) - log_normal_density(&wr, mu, lv);
                        wv[r * pr..(r + 1) * pr].copy_from_slice(&wr);
                    }
                    Some(Tensor::new(&[rows, pr], wv)?)
                }
                None => None,
            };
            let logits = self.decode_codes(Tensor::new(&[rows, pb], z)?, w_tensor, discrete.clone())?;
            let mut per_class = vec![0.0f64; d];
            for i in 0..b {
                let xi = &x.data()[i * pixels..(i + 1) * pixels];
                for (c, slot) in per_class.iter_mut().enumerate() {
                    let r = i * d + c;
                    let ll = bernoulli_log_likelihood(xi, &logits.data()[r * pixels..(r + 1) * pixels]);
                    *slot = ll + log_w_terms[r] + log_class_prior;
                }
                lw[i * k + s] = log_sum_exp(&per_class) + log_pz[i] - log_qz[i];
            }
        }
        if lw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "iwae_log_weights" });
        }
        Ok(lw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use proptest::prelude::*;

    fn grid_table(cards: &[usize]) -> FactorTable {
        let n: usize = cards.iter().product();
        let mut idx = Vec::with_capacity(n * cards.len());
        for mut i in 0..n {
            let mut row = vec![0u16; cards.len()];
            for f in (0..cards.len()).rev() {
                row[f] = (i % cards[f]) as u16;
                i /= cards[f];
            }
            idx.extend(row);
        }
        FactorTable::new((0..cards.len()).map(|f| format!("f{f}")).collect(), cards.to_vec(), idx).unwrap()
    }

    fn identity_reps(t: &FactorTable) -> Tensor {
        let data = (0..t.len())
            .flat_map(|n| t.row(n).iter().map(|&v| v as f32).collect::<Vec<_>>())
            .collect();
        Tensor::new(&[t.len(), t.num_factors()], data).unwrap()
    }

    #[test]
    fn identity_representation_scores_one() {
        let t = grid_table(&[4, 5, 6]);
        let s = factorvae_metric(
            &identity_reps(&t),
            &t,
            FactorVaeConfig::default(),
            &mut RandomSource::new(1),
        )
        .unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn constant_factor_is_left_out() {
        let base = grid_table(&[1, 5, 6]);
        let s = factorvae_metric(
            &identity_reps(&base),
            &base,
            FactorVaeConfig::default(),
            &mut RandomSource::new(2),
        )
        .unwrap();
        assert_eq!(s, 1.0);
        let single = grid_table(&[1, 7]);
        assert!(factorvae_metric(
            &identity_reps(&single),
            &single,
            FactorVaeConfig::default(),
            &mut RandomSource::new(2)
        )
        .is_err());
    }

    #[test]
    fn collapsed_representation_is_an_error() {
        let t = grid_table(&[3, 3]);
        let reps = Tensor::zeros(&[9, 2]);
        assert!(factorvae_metric(&reps, &t, FactorVaeConfig::default(), &mut RandomSource::new(0)).is_err());
    }

    #[test]
    fn quantile_bins_share_ties_and_balance_counts() {
        let b = quantile_bins(&[3.0, 1.0, 2.0, 1.0, 5.0, 4.0], 3);
        assert_eq!(b, vec![1, 0, 1, 0, 2, 2]);
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b = quantile_bins(&v, 20);
        assert!((0..20).all(|k| b.iter().filter(|&&x| x == k).count() == 5));
    }

    #[test]
    fn mutual_information_of_copy_is_entropy() {
        let a: Vec<usize> = (0..1000).map(|i| i % 4).collect();
        assert!((discrete_mutual_information(&a, &a) - 4f64.ln()).abs() < 1e-12);
        let b: Vec<usize> = (0..1000).map(|i| (i / 4) % 2).collect();
        assert!(discrete_mutual_information(&a, &b).abs() < 1e-12);
    }

    #[test]
    fn duplicated_best_dimension_closes_the_gap() {
        let t = grid_table(&[10, 10]);
        let mut rng = RandomSource::new(4);
        let data: Vec<f32> = (0..t.len())
            .flat_map(|n| [t.get(n, 0) as f32, t.get(n, 0) as f32, rng.normal() as f32])
            .collect();
        let terms = mig_terms(&Tensor::new(&[t.len(), 3], data).unwrap(), &t, 20).unwrap();
        assert!(terms[0].unwrap() < 1e-12);
    }

    #[test]
    fn conditional_weights_classes_by_frequency() {
        let t = grid_table(&[2, 100]);
        let reps = identity_reps(&t);
        let labels: Vec<usize> = (0..t.len()).map(|n| t.get(n, 0)).collect();
        let score = conditional_metric(
            |_, f| Ok(if f.get(0, 0) == 0 { 1.0 } else { 0.5 }),
            &reps,
            &t,
            &labels,
            100,
        )
        .unwrap();
        assert!((score.value - 0.75).abs() < 1e-12);
        assert_eq!(score.per_class.len(), 2);
        let err = conditional_metric(|_, _| Ok(1.0), &reps, &t, &labels, 101).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn single_class_equals_unconditional() {
        let t = grid_table(&[3, 4, 10]);
        let mut rng = RandomSource::new(5);
        let reps = rng.normal_tensor(&[t.len(), 4]);
        let labels = vec![0; t.len()];
        let cfg = FactorVaeConfig::default();
        let cond = conditional_metric(
            |r, f| factorvae_metric(r, f, cfg, &mut RandomSource::new(9)),
            &reps,
            &t,
            &labels,
            100,
        )
        .unwrap();
        let plain = factorvae_metric(&reps, &t, cfg, &mut RandomSource::new(9)).unwrap();
        assert_eq!(cond.value, plain);
    }

    #[test]
    fn majority_map_accuracy() {
        assert_eq!(unsupervised_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(unsupervised_accuracy(&[2, 0, 1], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(unsupervised_accuracy(&[5, 5, 5, 7], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(unsupervised_accuracy(&[], &[]).is_err());
        let mut rng = RandomSource::new(6);
        let n = 10_000;
        let clusters: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
        assert!((unsupervised_accuracy(&clusters, &labels).unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn single_sample_estimate_is_the_negative_log_weight() {
        let toy = LinearGaussianToy {
            sigma_x: 0.7,
            q_gain: 0.5,
            q_std: 0.8,
        };
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let lw = toy.log_weights(&x, 1, &mut RandomSource::new(1)).unwrap();
        let nll = iwae_nll(&toy, &x, 1, &mut RandomSource::new(1)).unwrap();
        assert!((nll + lw.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(iwae_nll(&toy, &x, 0, &mut RandomSource::new(1)).is_err());
    }

    #[test]
    fn toy_nll_is_calibrated() {
        let toy = LinearGaussianToy {
            sigma_x: 0.7,
            q_gain: 0.5,
            q_std: 0.8,
        };
        let xs = [0.3f32, -1.0, 1.5];
        let truth = xs.iter().map(|&x| toy.exact_nll(x as f64)).sum::<f64>() / 3.0;
        let x = Tensor::new(&[3], xs.to_vec()).unwrap();
        let mut rng = RandomSource::new(11);
        let est = (0..20)
            .map(|_| iwae_nll(&toy, &x, 1000, &mut rng).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!((est - truth).abs() < 0.05, "{est} vs {truth}");
    }

    #[test]
    fn model_log_weights_are_finite_for_every_variant() {
        for variant in [Variant::Exact, Variant::Approx, Variant::Joint] {
            let pr = if variant == Variant::Joint { 0 } else { 2 };
            let mut cfg = ModelConfig::new(variant, 3, pr, 4, 32);
            cfg.backbone = crate::models::Backbone::Mlp { hidden: 16 };
            let model = Model::new(cfg, &mut RandomSource::new(3)).unwrap();
            let mut rng = RandomSource::new(4);
            let x = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 7) % 3 == 0) as u8 as f32);
            let lw = model.log_weights(&x, 5, &mut rng).unwrap();
            assert_eq!(lw.len(), 10);
            assert!(lw.iter().all(|v| v.is_finite() && *v < 0.0));
            let nll = iwae_nll(&model, &x, 5, &mut rng).unwrap();
            assert!(nll > 0.0);
        }
    }

    #[test]
    fn more_samples_tighten_the_model_bound() {
        let mut cfg = ModelConfig::new(Variant::Exact, 2, 2, 3, 32);
        cfg.backbone = crate::models::Backbone::Mlp { hidden: 16 };
        let model = Model::new(cfg, &mut RandomSource::new(8)).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 5) % 4 == 0) as u8 as f32);
        let mut rng = RandomSource::new(9);
        let (mut k1, mut k100) = (0.0, 0.0);
        for _ in 0..50 {
            k1 += iwae_nll(&model, &x, 1, &mut rng).unwrap() / 50.0;
            k100 += iwae_nll(&model, &x, 100, &mut rng).unwrap() / 50.0;
        }
        assert!(k100 <= k1 + 0.1, "K=100 {k100} vs K=1 {k1}");
    }

    #[test]
    fn dump_round_trips_through_container() {
        let t = grid_table(&[2, 3]);
        let dump = RepresentationDump::new(
            Tensor::from_fn(&[6, 2], |i| i as f32),
            Tensor::from_fn(&[6, 2], |i| (i % 2) as f32),
            t,
        )
        .unwrap();
        assert_eq!(RepresentationDump::from_container(&dump.to_container()).unwrap(), dump);
        assert_eq!(dump.classes(), vec![1; 6]);
    }

    #[test]
    fn approx_private_rep_is_responsibility_weighted() {
        let codes = MeanCodes {
            z_mu: Tensor::new(&[1, 1], vec![7.0]).unwrap(),
            w_mu: Some(Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap()),
            alpha: Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap(),
        };
        let t = grid_table(&[1]);
        let approx = RepresentationDump::from_codes(&codes, Variant::Approx, t.clone()).unwrap();
        assert_eq!(approx.reps.data(), &[7.0, 3.5]);
        let exact = RepresentationDump::from_codes(&codes, Variant::Exact, t).unwrap();
        assert_eq!(exact.reps.data(), &[7.0, 4.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn factorvae_is_invariant_to_affine_rescaling(
            seed in 0u64..1000,
            scales in proptest::collection::vec(prop_oneof![-50.0f32..-0.1, 0.1f32..50.0], 4),
            shifts in proptest::collection::vec(-10.0f32..10.0, 4),
        ) {
            let t = grid_table(&[3, 4, 8]);
            let mut rng = RandomSource::new(seed);
            let reps = rng.normal_tensor(&[t.len(), 4]);
            let mut moved = reps.clone();
            for row in moved.data_mut().chunks_mut(4) {
                for j in 0..4 {
                    row[j] = row[j] * scales[j] + shifts[j];
                }
            }
            let cfg = FactorVaeConfig { batch: 16, train_votes: 100, eval_votes: 50 };
            let a = factorvae_metric(&reps, &t, cfg, &mut RandomSource::new(seed + 1)).unwrap();
            let b = factorvae_metric(&moved, &t, cfg, &mut RandomSource::new(seed + 1)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mig_is_invariant_to_monotone_maps(seed in 0u64..1000, dim in 0usize..3) {
            let t = grid_table(&[5, 8, 6]);
            let mut rng = RandomSource::new(seed);
            let reps = rng.normal_tensor(&[t.len(), 3]);
            let mut moved = reps.clone();
            for row in moved.data_mut().chunks_mut(3) {
                row[dim] = row[dim].powi(3) * 2.0;
            }
            prop_assert_eq!(mig_terms(&reps, &t, 20).unwrap(), mig_terms(&moved, &t, 20).unwrap());
        }

        #[test]
        fn accuracy_beats_the_majority_label(
            pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..200)
        ) {
            let (c, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let mut freq = [0usize; 4];
            l.iter().for_each(|&x| freq[x] += 1);
            let base = *freq.iter().max().unwrap() as f64 / l.len() as f64;
            prop_assert!(unsupervised_accuracy(&c, &l).unwrap() >= base - 1e-12);
        }
    }
}

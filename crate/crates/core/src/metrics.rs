//! Disentanglement scores and latent diagnostics.
//!
//! Metrics I and II are classification accuracies over (chosen latent,
//! factor) pairs; Metric III scores a LASSO importance matrix for
//! disentanglement, completeness and informativeness.
//!
//! All three consume a [`LatentTable`] of posterior means indexed like the
//! dataset's factor grid, so a model is encoded once per evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{FactorDataset, FactorSpace};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vae::VaeModel;

/// Columns whose dataset-wide std falls below this are treated as dead.
pub const DEAD_STD: f64 = 0.02;
/// Expected prior KL above which a latent counts as active.
pub const ACTIVE_KL: f64 = 0.5;

/// One latent vector per grid point, `n × d` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl LatentTable {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d || d == 0 {
            return Err(Error::Construction(format!(
                "latent table of {} values is not {n} × {d}",
                data.len()
            )));
        }
        Ok(LatentTable { n, d, data })
    }

    /// Posterior means of every image, encoded in chunks of `batch` rows.
    pub fn from_model(model: &VaeModel, ds: &FactorDataset, batch: usize) -> Result<Self> {
        let batch = batch.max(1);
        let mut data = Vec::with_capacity(ds.len() * model.latent_dim);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch) {
            let (means, _) = model.posterior(&ds.batch(chunk))?;
            data.extend_from_slice(means.data());
        }
        LatentTable::new(ds.len(), model.latent_dim, data)
    }

    /// Latents computed from each grid tuple (oracle and synthetic codes).
    pub fn from_fn<F>(space: &FactorSpace, mut f: F) -> Result<Self>
    where
        F: FnMut(&[usize]) -> Vec<f64>,
    {
        let n = space.total();
        let mut data = Vec::new();
        let mut d = 0;
        for i in 0..n {
            let row = f(&space.tuple_of(i)?);
            if i == 0 {
                d = row.len();
            } else if row.len() != d {
                return Err(Error::Construction(format!(
                    "latent row {i} has width {}, expected {d}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        LatentTable::new(n, d, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Dataset-wide population std of each column.
    pub fn column_stds(&self) -> Vec<f64> {
        (0..self.d)
            .map(|k| {
                let col = (0..self.n).map(|i| self.data[i * self.d + k]);
                std_of(col, self.n)
            })
            .collect()
    }
}

fn std_of(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteParams {
    /// Samples per pair.
    pub l: usize,
    pub num_pairs: usize,
    pub repeats: usize,
}

impl Default for VoteParams {
    fn default() -> Self {
        VoteParams {
            l: 100,
            num_pairs: 800,
            repeats: 10,
        }
    }
}

/// Counts of (chosen latent `u`, true factor `j`) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(d: usize, k: usize) -> Self {
        ContingencyTable {
            counts: vec![vec![0; k]; d],
        }
    }

    pub fn record(&mut self, u: usize, j: usize) {
        self.counts[u][j] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Training accuracy of predicting `j` from `u` by majority vote.
    pub fn majority_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: u64 = self
            .counts
            .iter()
            .map(|row| row.iter().copied().max().unwrap_or(0))
            .sum();
        hits as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteRule {
    /// Metric I: one factor fixed, pick the quietest latent.
    FixedArgmin,
    /// Metric II: one factor varied, pick the loudest latent.
    VariedArgmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteScore {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    pub tables: Vec<ContingencyTable>,
}

pub fn metric1(table: &LatentTable, space: &FactorSpace, p: VoteParams, rng: &Rng) -> Result<VoteScore> {
    vote_metric(table, space, p, rng, VoteRule::FixedArgmin)
}

pub fn metric2(table: &LatentTable, space: &FactorSpace, p: VoteParams, rng: &Rng) -> Result<VoteScore> {
    vote_metric(table, space, p, rng, VoteRule::VariedArgmax)
}

/// Repeat `r` draws from `rng.derive(r)`, so repeats are independent of
/// one another and of evaluation order.
pub fn vote_metric(
    table: &LatentTable,
    space: &FactorSpace,
    p: VoteParams,
    rng: &Rng,
    rule: VoteRule,
) -> Result<VoteScore> {
    if table.len() != space.total() {
        return Err(Error::Evaluation(format!(
            "latent table has {} rows but the factor grid has {}",
            table.len(),
            space.total()
        )));
    }
    if p.repeats == 0 || p.num_pairs == 0 {
        return Err(Error::Evaluation("need at least one repeat and one pair".into()));
    }
    let stds = table.column_stds();
    let active: Vec<usize> = (0..table.dim()).filter(|&k| stds[k] >= DEAD_STD).collect();
    if active.is_empty() {
        return Err(Error::Evaluation("no active latents".into()));
    }
    let k = space.num_factors();
    let mut tables = Vec::with_capacity(p.repeats);
    let mut accuracies = Vec::with_capacity(p.repeats);
    for r in 0..p.repeats {
        let mut rng = rng.derive(r as u64);
        let mut ct = ContingencyTable::new(table.dim(), k);
        for _ in 0..p.num_pairs {
            let j = rng.below(k);
            let tuples = match rule {
                VoteRule::FixedArgmin => space.sample_one_fixed(j, p.l, &mut rng)?,
                VoteRule::VariedArgmax => space.sample_one_varied(j, p.l, &mut rng)?,
            };
            let rows: Vec<usize> = tuples
                .iter()
                .map(|t| space.index_of(t))
                .collect::<Result<_>>()?;
            let u = choose_latent(table, &rows, &active, &stds, rule);
            ct.record(u, j);
        }
        accuracies.push(ct.majority_accuracy());
        tables.push(ct);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(VoteScore {
        mean,
        std,
        accuracies,
        tables,
    })
}

/// Normalized sample variance extremum over active dims; ties go to the
/// lowest index.
fn choose_latent(table: &LatentTable, rows: &[usize], active: &[usize], stds: &[f64], rule: VoteRule) -> usize {
    let mut best = active[0];
    let mut best_v = f64::NAN;
    for &k in active {
        let col = rows.iter().map(|&i| table.row(i)[k] / stds[k]);
        let v = std_of(col, rows.len()).powi(2);
        let better = match rule {
            VoteRule::FixedArgmin => v < best_v,
            VoteRule::VariedArgmax => v > best_v,
        };
        if best_v.is_nan() || better {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Mean and sample std (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Result of [`lasso_fit`]. Coefficients live in standardized predictor
/// units; [`LassoFit::coef`] maps them back.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub coef_standardized: Vec<f64>,
    pub x_means: Vec<f64>,
    pub x_stds: Vec<f64>,
    pub y_mean: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep, starting with the all-zero fit.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    /// Coefficients and intercept in the original predictor units.
    pub fn coef(&self) -> (Vec<f64>, f64) {
        let w: Vec<f64> = self
            .coef_standardized
            .iter()
            .zip(&self.x_stds)
            .map(|(w, s)| if *s > 0.0 { w / s } else { 0.0 })
            .collect();
        let b = self.y_mean - w.iter().zip(&self.x_means).map(|(w, m)| w * m).sum::<f64>();
        (w, b)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.y_mean
            + x.iter()
                .enumerate()
                .filter(|(j, _)| self.x_stds[*j] > 0.0)
                .map(|(j, v)| self.coef_standardized[j] * (v - self.x_means[j]) / self.x_stds[j])
                .sum::<f64>()
    }
}

pub const LASSO_TOL: f64 = 1e-6;
pub const LASSO_MAX_SWEEPS: usize = 1000;

fn soft_threshold(v: f64, a: f64) -> f64 {
    if v > a {
        v - a
    } else if v < -a {
        v + a
    } else {
        0.0
    }
}

/// Coordinate descent on `(1/2n)‖y − Xw‖² + α‖w‖₁` with standardized
/// columns and centred `y`. Constant columns keep a zero coefficient.
pub fn lasso_fit(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<LassoFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::Evaluation(format!(
            "lasso needs ≥ 2 matching rows, got {n} predictors and {} targets",
            y.len()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Evaluation(format!("lasso penalty {alpha} must be ≥ 0")));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Evaluation("ragged predictor rows".into()));
    }
    let nf = n as f64;
    let x_means: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let x_stds: Vec<f64> = (0..p)
        .map(|j| {
            let s = std_of(x.iter().map(|r| r[j]), n);
            if s > 1e-12 {
                s
            } else {
                0.0
            }
        })
        .collect();
    // column-major standardized design
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            if x_stds[j] == 0.0 {
                vec![0.0; n]
            } else {
                x.iter().map(|r| (r[j] - x_means[j]) / x_stds[j]).collect()
            }
        })
        .collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; p];
    let objective = |resid: &[f64], w: &[f64]| {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * nf) + alpha * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut trace = vec![objective(&resid, &w)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if x_stds[j] == 0.0 {
                continue;
            }
            let col = &cols[j];
            let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + w[j];
            let new = soft_threshold(rho, alpha);
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(col) {
                    *r -= delta * a;
                }
                w[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        trace.push(objective(&resid, &w));
        if max_change < LASSO_TOL {
            converged = true;
            break;
        }
    }
    Ok(LassoFit {
        coef_standardized: w,
        x_means,
        x_stds,
        y_mean,
        sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Non-negative `[d × K]` importances of latent `k` for factor `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    pub r: Vec<Vec<f64>>,
}

impl ImportanceMatrix {
    pub fn new(r: Vec<Vec<f64>>) -> Result<Self> {
        let k = r.first().map_or(0, Vec::len);
        if r.is_empty() || k == 0 || r.iter().any(|row| row.len() != k) {
            return Err(Error::Evaluation("importance matrix must be a non-empty rectangle".into()));
        }
        if r.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Evaluation("importances must be finite and ≥ 0".into()));
        }
        Ok(ImportanceMatrix { r })
    }

    pub fn latents(&self) -> usize {
        self.r.len()
    }

    pub fn factors(&self) -> usize {
        self.r[0].len()
    }

    pub fn is_zero(&self) -> bool {
        self.r.iter().flatten().all(|v| *v == 0.0)
    }

    /// `Σ_k ρ_k (1 − H_K(row_k)/log K)`, `ρ_k` the row's share of the
    /// total importance.
    pub fn disentanglement(&self) -> f64 {
        let total: f64 = self.r.iter().flatten().sum();
        if total == 0.0 {
            return 0.0;
        }
        let k = self.factors();
        self.r
            .iter()
            .map(|row| {
                let mass: f64 = row.iter().sum();
                if mass == 0.0 {
                    0.0
                } else {
                    mass / total * (1.0 - normalized_entropy(row, k))
                }
            })
            .sum()
    }

    /// Mean over factors of `1 − H_d(col_j)/log d`.
    pub fn completeness(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let d = self.latents();
        let k = self.factors();
        (0..k)
            .map(|j| {
                let col: Vec<f64> = self.r.iter().map(|row| row[j]).collect();
                if col.iter().sum::<f64>() == 0.0 {
                    0.0
                } else {
                    1.0 - normalized_entropy(&col, d)
                }
            })
            .sum::<f64>()
            / k as f64
    }
}

/// Entropy (nats) of `w / Σw` divided by `log base`; 0 for `base ≤ 1`.
fn normalized_entropy(w: &[f64], base: usize) -> f64 {
    if base <= 1 {
        return 0.0;
    }
    let s: f64 = w.iter().sum();
    let h: f64 = w
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / s;
            -p * p.ln()
        })
        .sum();
    h / (base as f64).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric3 {
    pub d: f64,
    pub c: f64,
    /// Mean normalized RMSE on the held-out split (lower is better).
    pub i: f64,
    pub importance: ImportanceMatrix,
    /// Every importance was zero; D and C are zero by convention.
    pub degenerate: bool,
    pub all_converged: bool,
}

/// Share of rows held out for the informativeness error.
pub const HOLDOUT_FRACTION: f64 = 0.2;

pub fn metric3(table: &LatentTable, space: &FactorSpace, alpha: f64, rng: &Rng) -> Result<Metric3> {
    let n = table.len();
    if n != space.total() {
        return Err(Error::Evaluation(format!(
            "latent table has {n} rows but the factor grid has {}",
            space.total()
        )));
    }
    let mut rng = rng.clone();
    let perm = rng.permutation(n);
    let n_test = ((n as f64) * HOLDOUT_FRACTION).round().max(1.0) as usize;
    if n - n_test < 2 {
        return Err(Error::Evaluation(format!("{n} rows are too few to split")));
    }
    let (test, train) = perm.split_at(n_test);
    let labels: Vec<Vec<f64>> = (0..n)
        .map(|i| Ok(space.scaled(&space.tuple_of(i)?)))
        .collect::<Result<_>>()?;
    let x_train: Vec<Vec<f64>> = train.iter().map(|&i| table.row(i).to_vec()).collect();
    let k = space.num_factors();
    let mut r = vec![vec![0.0; k]; table.dim()];
    let mut errors = Vec::with_capacity(k);
    let mut all_converged = true;
    for j in 0..k {
        let y: Vec<f64> = train.iter().map(|&i| labels[i][j]).collect();
        let fit = lasso_fit(&x_train, &y, alpha)?;
        all_converged &= fit.converged;
        for (row, w) in r.iter_mut().zip(&fit.coef_standardized) {
            row[j] = w.abs();
        }
        let truth: Vec<f64> = test.iter().map(|&i| labels[i][j]).collect();
        let mse = test
            .iter()
            .zip(&truth)
            .map(|(&i, t)| (fit.predict(table.row(i)) - t).powi(2))
            .sum::<f64>()
            / test.len() as f64;
        let spread = std_of(truth.iter().copied(), truth.len());
        errors.push(if spread > 0.0 { mse.sqrt() / spread } else { mse.sqrt() });
    }
    let importance = ImportanceMatrix::new(r)?;
    Ok(Metric3 {
        d: importance.disentanglement(),
        c: importance.completeness(),
        i: errors.iter().sum::<f64>() / k as f64,
        degenerate: importance.is_zero(),
        all_converged,
        importance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlReport {
    pub per_dim: Vec<f64>,
    /// Dims whose expected prior KL exceeds [`ACTIVE_KL`].
    pub active: usize,
}

/// Dataset mean of the closed-form prior KL per dimension.
pub fn expected_prior_kl_report(model: &VaeModel, ds: &FactorDataset, batch: usize) -> Result<KlReport> {
    let d = model.latent_dim;
    let mut acc = vec![0.0; d];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (m, ls) = model.posterior(&ds.batch(chunk))?;
        for (i, (mv, lv)) in m.data().iter().zip(ls.data()).enumerate() {
            let s2 = (2.0 * lv).exp();
            acc[i % d] += 0.5 * (mv * mv + s2 - 1.0 - 2.0 * lv);
        }
    }
    let per_dim: Vec<f64> = acc.iter().map(|a| a / ds.len().max(1) as f64).collect();
    let active = per_dim.iter().filter(|v| **v > ACTIVE_KL).count();
    Ok(KlReport { per_dim, active })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceSummary {
    pub relevant: Vec<usize>,
    pub nuisance: Vec<usize>,
    pub undecided: Vec<usize>,
    /// Rows relevant / nuisance / undecided; columns KL > 0.5 yes / no.
    pub cross: [[usize; 2]; 3],
}

pub fn relevance_report(r: &[f64], kl: &[f64], hi: f64, lo: f64) -> Result<RelevanceSummary> {
    if r.len() != kl.len() {
        return Err(Error::Evaluation(format!(
            "{} relevances but {} KL values",
            r.len(),
            kl.len()
        )));
    }
    let mut s = RelevanceSummary {
        relevant: vec![],
        nuisance: vec![],
        undecided: vec![],
        cross: [[0; 2]; 3],
    };
    for (j, (&rj, &kj)) in r.iter().zip(kl).enumerate() {
        if !(0.0..=1.0).contains(&rj) {
            return Err(Error::Evaluation(format!("relevance {rj} outside [0, 1]")));
        }
        let class = if rj > hi {
            s.relevant.push(j);
            0
        } else if rj < lo {
            s.nuisance.push(j);
            1
        } else {
            s.undecided.push(j);
            2
        };
        s.cross[class][usize::from(kj <= ACTIVE_KL)] += 1;
    }
    Ok(s)
}

/// One model's evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub metric1_mean: f64,
    pub metric1_std: f64,
    pub metric2_mean: f64,
    pub metric2_std: f64,
    pub metric3_d: f64,
    pub metric3_c: f64,
    pub metric3_i: f64,
    pub kl_per_dim: Vec<f64>,
    pub relevance: Option<Vec<f64>>,
}

pub const CSV_HEADER: &str = "dataset,model,metric,value,std";

impl MetricReport {
    /// Long-format rows: one per scalar score, then one per latent dim.
    pub fn csv_rows(&self) -> Vec<(String, f64, Option<f64>)> {
        let mut rows = vec![
            ("metric1".to_string(), self.metric1_mean, Some(self.metric1_std)),
            ("metric2".to_string(), self.metric2_mean, Some(self.metric2_std)),
            ("metric3_d".to_string(), self.metric3_d, None),
            ("metric3_c".to_string(), self.metric3_c, None),
            ("metric3_i_nrmse".to_string(), self.metric3_i, None),
            (
                "kl_active".to_string(),
                self.kl_per_dim.iter().filter(|v| **v > ACTIVE_KL).count() as f64,
                None,
            ),
        ];
        for (j, v) in self.kl_per_dim.iter().enumerate() {
            rows.push((format!("kl_{j}"), *v, None));
        }
        for (j, v) in self.relevance.iter().flatten().enumerate() {
            rows.push((format!("r_{j}"), *v, None));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (metric, value, std) in self.csv_rows() {
            let std = std.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{metric},{value},{std}", self.dataset, self.model);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}  dataset: {}", self.model, self.dataset);
        let _ = writeln!(out, "Metric I   {:.4} ± {:.4}", self.metric1_mean, self.metric1_std);
        let _ = writeln!(out, "Metric II  {:.4} ± {:.4}", self.metric2_mean, self.metric2_std);
        let _ = writeln!(out, "Metric III (LASSO)  D / C / I(nRMSE)");
        let _ = writeln!(
            out,
            "           {:.4} / {:.4} / {:.4}",
            self.metric3_d, self.metric3_c, self.metric3_i
        );
        let kl: Vec<String> = self.kl_per_dim.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(out, "expected prior KL  [{}]", kl.join(", "));
        if let Some(r) = &self.relevance {
            let rs: Vec<String> = r.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(out, "relevance          [{}]", rs.join(", "));
        }
        out
    }
}

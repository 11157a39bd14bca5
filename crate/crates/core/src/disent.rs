//! Disentangling objectives and their alternating trainer.
//!
//! Five objectives share one breakdown:
//!
//! | kind     | prior KL weight        | TC term (γ · mean logit)    | relevance terms      |
//! |----------|------------------------|-----------------------------|----------------------|
//! | vanilla  | 1                      | –                           | –                    |
//! | beta     | β                      | –                           | –                    |
//! | factor   | 1                      | D(z)                        | –                    |
//! | rfvae0   | λ_min on R, λ_max off R | D(z_R)                      | –                    |
//! | rfvae    | λ(r_j)                 | D(r ∘ z)                    | η_S‖r‖₁ + η_H H(r)   |
//!
//! Total correlation is estimated with the density-ratio trick: a
//! discriminator is trained to tell posterior samples from samples of the
//! product of their marginals, and its logit is the log-ratio. Marginal
//! samples come from shuffling each latent column independently across the
//! held-out half of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, MlpSpec};
use crate::rng::Rng;
use crate::tensor::{sigmoid, softplus, Graph, Reduce, Tensor, Var};
use crate::vae::VaeModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Vanilla,
    Beta,
    Factor,
    #[serde(rename = "rfvae0")]
    RfVae0,
    #[serde(rename = "rfvae")]
    RfVae,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vanilla => "vanilla",
            ObjectiveKind::Beta => "beta",
            ObjectiveKind::Factor => "factor",
            ObjectiveKind::RfVae0 => "rfvae0",
            ObjectiveKind::RfVae => "rfvae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisentConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta_s: f64,
    pub eta_h: f64,
    /// Relevant latent indices, rfvae0 only.
    pub known_r: Option<Vec<usize>>,
}

impl Default for DisentConfig {
    fn default() -> Self {
        DisentConfig {
            kind: ObjectiveKind::RfVae,
            beta: 4.0,
            gamma: 6.0,
            lambda_min: 0.1,
            lambda_max: 10.0,
            eta_s: 0.1,
            eta_h: 0.1,
            known_r: None,
        }
    }
}

impl DisentConfig {
    pub fn of_kind(kind: ObjectiveKind) -> Self {
        DisentConfig {
            kind,
            ..DisentConfig::default()
        }
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if !(self.lambda_min < self.lambda_max) {
            return Err(Error::Config(format!(
                "lambda_min {} must be below lambda_max {}",
                self.lambda_min, self.lambda_max
            )));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta_s", self.eta_s),
            ("eta_h", self.eta_h),
            ("lambda_min", self.lambda_min),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        match (&self.known_r, self.kind) {
            (None, ObjectiveKind::RfVae0) => {
                return Err(Error::Config("rfvae0 needs known_r".into()));
            }
            (Some(_), k) if k != ObjectiveKind::RfVae0 => {
                return Err(Error::Config(format!(
                    "known_r is only meaningful for rfvae0, not {}",
                    k.name()
                )));
            }
            (Some(r), _) => {
                let mut sorted = r.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if r.is_empty() || sorted.len() != r.len() || sorted.iter().any(|&j| j >= latent_dim) {
                    return Err(Error::Config(format!(
                        "known_r {r:?} must be distinct indices below {latent_dim}"
                    )));
                }
            }
            (None, _) => {}
        }
        Ok(())
    }

    /// The objective carries a TC term and therefore a discriminator.
    pub fn uses_discriminator(&self) -> bool {
        self.gamma > 0.0
            && matches!(
                self.kind,
                ObjectiveKind::Factor | ObjectiveKind::RfVae0 | ObjectiveKind::RfVae
            )
    }

    pub fn discriminator_width(&self, latent_dim: usize) -> usize {
        match (&self.known_r, self.kind) {
            (Some(r), ObjectiveKind::RfVae0) => r.len(),
            _ => latent_dim,
        }
    }

    /// Constant prior-KL weights for the non-learned kinds.
    fn fixed_kl_weights(&self, d: usize) -> Vec<f64> {
        match self.kind {
            ObjectiveKind::Beta => vec![self.beta; d],
            ObjectiveKind::RfVae0 => {
                let r = self.known_r.as_deref().unwrap_or(&[]);
                (0..d)
                    .map(|j| if r.contains(&j) { self.lambda_min } else { self.lambda_max })
                    .collect()
            }
            _ => vec![1.0; d],
        }
    }
}

/// Relevance logits `ρ`; the relevance vector is `r = σ(ρ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector {
    pub logits: Tensor,
}

impl RelevanceVector {
    /// `ρ = 0`, so every `r_j` starts at exactly 0.5.
    pub fn new(d: usize) -> Self {
        RelevanceVector {
            logits: Tensor::zeros(&[d]),
        }
    }

    pub fn from_logits(logits: Vec<f64>) -> Self {
        RelevanceVector {
            logits: Tensor::vector(logits),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&p| sigmoid(p)).collect()
    }
}

/// Anything that maps latent rows to one logit per row.
pub trait Critic {
    fn input_width(&self) -> usize;
    fn logits(&self, g: &mut Graph, z: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub mlp: Mlp,
}

pub const DEFAULT_DISC_HIDDEN: [usize; 3] = [128, 128, 128];
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl Discriminator {
    pub fn new(input_width: usize, hidden: &[usize], slope: f64, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![input_width];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let spec = MlpSpec::new(&widths, Activation::LeakyRelu(slope), Activation::Identity)?;
        Ok(Discriminator {
            mlp: Mlp::init(spec, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.spec().output_width() != 1 {
            return Err(Error::Config(format!(
                "discriminator must output one logit, got width {}",
                mlp.spec().output_width()
            )));
        }
        Ok(Discriminator { mlp })
    }
}

impl Critic for Discriminator {
    fn input_width(&self) -> usize {
        self.mlp.spec().input_width()
    }

    fn logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        Ok(self.mlp.forward(g, z, false)?.output)
    }
}

/// Shuffles every column independently across rows. Column multisets are
/// preserved exactly; cross-column dependence is destroyed.
pub fn permute_dims(z: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if z.shape().len() != 2 {
        return Err(dim_err("permute_dims", z.shape(), &[2]));
    }
    let (b, d) = (z.shape()[0], z.shape()[1]);
    if b < 2 {
        return Err(Error::Contract(format!(
            "permute_dims needs at least 2 rows, got {b}"
        )));
    }
    let src = z.data();
    let mut out = vec![0.0; b * d];
    for j in 0..d {
        let perm = rng.permutation(b);
        for (i, &p) in perm.iter().enumerate() {
            out[i * d + j] = src[p * d + j];
        }
    }
    Tensor::new(vec![b, d], out)
}

/// Batch mean of the critic logit: the density-ratio estimate of TC.
pub fn tc_logratio<C: Critic + ?Sized>(g: &mut Graph, critic: &C, z: Var) -> Result<Var> {
    let zs = g.shape(z);
    if zs.len() != 2 || zs[1] != critic.input_width() {
        return Err(dim_err("tc_logratio", zs, &[critic.input_width()]));
    }
    let l = critic.logits(g, z)?;
    g.mean(l)
}

/// `−[mean log σ(ℓ_joint) + mean log(1 − σ(ℓ_marginal))]`, from logits.
/// Returns the loss and the discriminator's parameter vars.
pub fn discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    joint: Var,
    marginal: Var,
) -> Result<(Var, Vec<Var>)> {
    let w = disc.mlp.spec().input_width();
    for v in [joint, marginal] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != w {
            return Err(dim_err("discriminator_loss", s, &[w]));
        }
    }
    let params: Vec<Var> = disc.mlp.params().iter().map(|p| g.param(p)).collect();
    let lj = disc.mlp.forward_with(g, joint, &params)?;
    let lm = disc.mlp.forward_with(g, marginal, &params)?;
    // −log σ(ℓ) = softplus(−ℓ); −log(1 − σ(ℓ)) = softplus(ℓ)
    let nlj = g.neg(lj)?;
    let a = g.softplus(nlj)?;
    let b = g.softplus(lm)?;
    let ma = g.mean(a)?;
    let mb = g.mean(b)?;
    Ok((g.add(ma, mb)?, params))
}

/// Linear decreasing map with `λ(0) = λ_max` and `λ(1) = λ_min`.
pub fn lambda_of_r(r: f64, lambda_min: f64, lambda_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Domain {
            op: "lambda_of_r",
            detail: format!("relevance {r} outside [0, 1]"),
        });
    }
    Ok(lambda_max + (lambda_min - lambda_max) * r)
}

/// Binary entropy (nats) of `r = σ(ρ)` summed over dims, built from the
/// logits so it stays finite for saturated `r`:
/// `H = Σ r·softplus(−ρ) + (1 − r)·softplus(ρ)`.
pub fn relevance_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let r = g.sigmoid(logits)?;
    let neg = g.neg(logits)?;
    let sp_neg = g.softplus(neg)?;
    let sp_pos = g.softplus(logits)?;
    let one_minus_r = g.neg(r)?;
    let one_minus_r = g.offset(one_minus_r, 1.0)?;
    let a = g.mul(r, sp_neg)?;
    let b = g.mul(one_minus_r, sp_pos)?;
    let s = g.add(a, b)?;
    g.sum(s)
}

/// Plain-value binary entropy for `r ∈ (0, 1)^d`.
pub fn binary_entropy(r: &[f64]) -> f64 {
    r.iter()
        .map(|&p| {
            let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
            h(p) + h(1.0 - p)
        })
        .sum()
}

/// Per-step loss terms. `total` is
/// `recon + weighted_kl + gamma·tc_estimate + eta_s·l1_r + eta_h·entropy_r`
/// using the effective weights stored alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_per_dim: Vec<f64>,
    pub weighted_kl: f64,
    pub tc_estimate: f64,
    pub l1_r: f64,
    pub entropy_r: f64,
    pub total: f64,
    pub gamma: f64,
    pub eta_s: f64,
    pub eta_h: f64,
    /// `σ(ρ)` at this step; empty unless the relevance vector is learned.
    pub relevance: Vec<f64>,
}

impl LossBreakdown {
    pub fn recomposed_total(&self) -> f64 {
        self.recon
            + self.weighted_kl
            + self.gamma * self.tc_estimate
            + self.eta_s * self.l1_r
            + self.eta_h * self.entropy_r
    }

    /// Name of the first non-finite term, in breakdown order.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.recon.is_finite() {
            return Some("recon".into());
        }
        if let Some(j) = self.kl_per_dim.iter().position(|v| !v.is_finite()) {
            return Some(format!("kl_{j}"));
        }
        for (name, v) in [
            ("weighted_kl", self.weighted_kl),
            ("tc", self.tc_estimate),
            ("l1_r", self.l1_r),
            ("entropy_r", self.entropy_r),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some(name.into());
            }
        }
        None
    }
}

/// Graph vars the objective is built from.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub recon: Var,
    /// `[d]`, unweighted expected prior KL per dimension.
    pub kl_per_dim: Var,
    /// Posterior samples used for the TC expectation, `[n × d]`.
    pub z_tc: Var,
}

/// Builds the scalar objective for `cfg.kind`.
///
/// `disc` is required when the config uses a discriminator; `rho` (the
/// relevance logits, `[d]`) is required for rfvae.
pub fn objective(
    g: &mut Graph,
    cfg: &DisentConfig,
    terms: ObjectiveTerms,
    disc: Option<&dyn Critic>,
    rho: Option<Var>,
) -> Result<(Var, LossBreakdown)> {
    let d = g.shape(terms.kl_per_dim)[0];
    cfg.validate(d)?;
    let uses_d = cfg.uses_discriminator();
    if uses_d && disc.is_none() {
        return Err(Error::Config(format!(
            "{} with gamma {} needs a discriminator",
            cfg.kind.name(),
            cfg.gamma
        )));
    }
    let learned = cfg.kind == ObjectiveKind::RfVae;
    if learned && rho.is_none() {
        return Err(Error::Config("rfvae needs relevance logits".into()));
    }

    let mut total = terms.recon;
    let mut r_var = None;
    let weighted = if learned {
        let rho = rho.unwrap();
        if g.shape(rho) != [d] {
            return Err(dim_err("relevance", g.shape(rho), &[d]));
        }
        let r = g.sigmoid(rho)?;
        r_var = Some(r);
        let slope = g.scale(r, cfg.lambda_min - cfg.lambda_max)?;
        let lambda = g.offset(slope, cfg.lambda_max)?;
        let w = g.mul(lambda, terms.kl_per_dim)?;
        g.sum(w)?
    } else {
        let w = g.constant(Tensor::vector(cfg.fixed_kl_weights(d)));
        let wk = g.mul(w, terms.kl_per_dim)?;
        g.sum(wk)?
    };
    total = g.add(total, weighted)?;

    let mut tc_estimate = 0.0;
    if uses_d {
        let critic = disc.unwrap();
        let tc_in = match cfg.kind {
            ObjectiveKind::RfVae0 => g.columns(terms.z_tc, cfg.known_r.as_deref().unwrap())?,
            ObjectiveKind::RfVae => {
                let r_row = g.reshape(r_var.unwrap(), &[1, d])?;
                g.mul(terms.z_tc, r_row)?
            }
            _ => terms.z_tc,
        };
        let tc = tc_logratio(g, critic, tc_in)?;
        tc_estimate = g.item(tc);
        let weighted_tc = g.scale(tc, cfg.gamma)?;
        total = g.add(total, weighted_tc)?;
    }

    let (mut l1_r, mut entropy_r) = (0.0, 0.0);
    if let (Some(r), Some(rho)) = (r_var, rho.filter(|_| learned)) {
        let l1 = g.sum(r)?;
        let h = relevance_entropy(g, rho)?;
        l1_r = g.item(l1);
        entropy_r = g.item(h);
        let wl1 = g.scale(l1, cfg.eta_s)?;
        let wh = g.scale(h, cfg.eta_h)?;
        total = g.add(total, wl1)?;
        total = g.add(total, wh)?;
    }

    let breakdown = LossBreakdown {
        recon: g.item(terms.recon),
        kl_per_dim: g.value(terms.kl_per_dim).data().to_vec(),
        weighted_kl: g.item(weighted),
        tc_estimate,
        l1_r,
        entropy_r,
        total: g.item(total),
        gamma: if uses_d { cfg.gamma } else { 0.0 },
        eta_s: if learned { cfg.eta_s } else { 0.0 },
        eta_h: if learned { cfg.eta_h } else { 0.0 },
        relevance: r_var.map(|r| g.value(r).data().to_vec()).unwrap_or_default(),
    };
    Ok((total, breakdown))
}

/// Total correlation of a zero-mean Gaussian with covariance `cov`:
/// `½(Σ_j log Σ_jj − log det Σ)`.
pub fn gaussian_tc_oracle(cov: &[Vec<f64>]) -> Result<f64> {
    let n = cov.len();
    let domain = |detail: String| Error::Domain {
        op: "gaussian_tc_oracle",
        detail,
    };
    for (i, row) in cov.iter().enumerate() {
        if row.len() != n {
            return Err(domain(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        for j in 0..i {
            if (row[j] - cov[j][i]).abs() > 1e-12 * (1.0 + row[j].abs()) {
                return Err(domain("covariance is not symmetric".into()));
            }
        }
    }
    // Cholesky: log det = 2 Σ log L_ii
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(domain("covariance is not positive definite".into()));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let log_det: f64 = 2.0 * (0..n).map(|i| l[i][i].ln()).sum::<f64>();
    let log_diag: f64 = (0..n).map(|i| cov[i][i].ln()).sum();
    Ok(0.5 * (log_diag - log_det))
}

/// Optimizer and network settings for [`train_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub objective: DisentConfig,
    pub vae_adam: AdamConfig,
    pub disc_adam: AdamConfig,
    pub disc_hidden: Vec<usize>,
    pub disc_slope: f64,
}

impl TrainerConfig {
    pub fn new(objective: DisentConfig) -> Self {
        TrainerConfig {
            objective,
            vae_adam: AdamConfig::with_lr(1e-3),
            disc_adam: AdamConfig::with_lr(1e-4),
            disc_hidden: DEFAULT_DISC_HIDDEN.to_vec(),
            disc_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Random streams derived from one master seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const EPS: u64 = 2;
    pub const PERM: u64 = 3;
    pub const MODEL_INIT: u64 = 10;
    pub const DISC_INIT: u64 = 11;
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub model: VaeModel,
    pub relevance: Option<RelevanceVector>,
    pub discriminator: Option<Discriminator>,
    /// Over encoder, decoder and (rfvae) relevance logits, in that order.
    pub vae_adam: AdamState,
    pub disc_adam: Option<AdamState>,
    pub eps_rng: Rng,
    pub perm_rng: Rng,
}

impl TrainState {
    pub fn new(model: VaeModel, cfg: &TrainerConfig, master_seed: u64) -> Result<Self> {
        let d = model.latent_dim;
        cfg.objective.validate(d)?;
        let relevance = (cfg.objective.kind == ObjectiveKind::RfVae).then(|| RelevanceVector::new(d));
        let discriminator = if cfg.objective.uses_discriminator() {
            let mut rng = Rng::with_stream(master_seed, streams::DISC_INIT);
            Some(Discriminator::new(
                cfg.objective.discriminator_width(d),
                &cfg.disc_hidden,
                cfg.disc_slope,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut sizes: Vec<usize> = model
            .encoder
            .params()
            .iter()
            .chain(model.decoder.params())
            .map(Tensor::len)
            .collect();
        if relevance.is_some() {
            sizes.push(d);
        }
        let vae_adam = AdamState::new(cfg.vae_adam, &sizes)?;
        let disc_adam = match &discriminator {
            Some(disc) => Some(AdamState::new(
                cfg.disc_adam,
                &disc.mlp.params().iter().map(Tensor::len).collect::<Vec<_>>(),
            )?),
            None => None,
        };
        Ok(TrainState {
            step: 0,
            model,
            relevance,
            discriminator,
            vae_adam,
            disc_adam,
            eps_rng: Rng::with_stream(master_seed, streams::EPS),
            perm_rng: Rng::with_stream(master_seed, streams::PERM),
        })
    }
}

/// One alternation: a discriminator update on the step's posterior samples,
/// then a VAE (and relevance) update against the refreshed, frozen
/// discriminator.
pub fn train_step(state: &mut TrainState, batch: &Tensor, cfg: &TrainerConfig) -> Result<LossBreakdown> {
    let obj = &cfg.objective;
    let b = batch.rows();
    let d = state.model.latent_dim;
    let uses_d = obj.uses_discriminator();
    if uses_d && b < 4 {
        return Err(Error::Contract(format!(
            "batch of {b} cannot be split into joint and marginal halves"
        )));
    }
    let half = b / 2;

    let eps = state.eps_rng.normal_tensor(&[b, d]);
    let mut g = Graph::new();
    let fwd = state.model.forward(&mut g, batch, &eps, true)?;
    let rho = state.relevance.as_ref().map(|r| g.param(&r.logits));

    if uses_d {
        let disc = state.discriminator.as_mut().expect("discriminator present");
        let adam = state.disc_adam.as_mut().expect("discriminator optimizer present");
        let z = g.value(fwd.z);
        let masked = match obj.kind {
            ObjectiveKind::RfVae0 => select_columns(z, obj.known_r.as_deref().unwrap()),
            ObjectiveKind::RfVae => {
                let r = state.relevance.as_ref().unwrap().values();
                scale_columns(z, &r)
            }
            _ => z.clone(),
        };
        let joint = take_rows(&masked, 0, half);
        let marginal = permute_dims(&take_rows(&masked, half, b), &mut state.perm_rng)?;
        let mut gd = Graph::new();
        let jv = gd.constant(joint);
        let mv = gd.constant(marginal);
        let (loss, params) = discriminator_loss(&mut gd, disc, jv, mv)?;
        gd.backward(loss)?;
        let grads: Vec<&[f64]> = params.iter().map(|v| gd.grad(*v).unwrap()).collect();
        let mut ps: Vec<&mut Tensor> = disc.mlp.params_mut().iter_mut().collect();
        adam.step(&mut ps, &grads)?;
    }

    let z_tc = if uses_d { g.rows(fwd.z, 0, half)? } else { fwd.z };
    let terms = ObjectiveTerms {
        recon: fwd.recon,
        kl_per_dim: fwd.kl_per_dim,
        z_tc,
    };
    let critic = state.discriminator.as_ref().map(|x| x as &dyn Critic);
    let (total, breakdown) = objective(&mut g, obj, terms, critic, rho)?;
    if let Some(term) = breakdown.first_non_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            term,
        });
    }
    g.backward(total)?;

    let mut vars: Vec<Var> = fwd.encoder_params.iter().chain(&fwd.decoder_params).copied().collect();
    vars.extend(rho);
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).map_or_else(|| vec![0.0; g.value(*v).len()], <[f64]>::to_vec))
        .collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut Tensor> = state
        .model
        .encoder
        .params_mut()
        .iter_mut()
        .chain(state.model.decoder.params_mut().iter_mut())
        .collect();
    if let Some(r) = state.relevance.as_mut() {
        params.push(&mut r.logits);
    }
    state.vae_adam.step(&mut params, &grad_refs)?;
    state.step += 1;
    Ok(breakdown)
}

fn take_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec()).expect("row slice")
}

fn select_columns(t: &Tensor, cols: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| cols.iter().map(|&j| t.row(i)[j]).collect())
        .collect();
    Tensor::from_rows(&rows).expect("column selection")
}

fn scale_columns(t: &Tensor, s: &[f64]) -> Tensor {
    let c = t.cols();
    let data = t.data().iter().enumerate().map(|(i, v)| v * s[i % c]).collect();
    Tensor::new(t.shape().to_vec(), data).expect("column scaling")
}

/// Analytic log density ratio of a zero-mean bivariate Gaussian with unit
/// variances and correlation `rho` against the product of its marginals.
#[derive(Clone, Copy, Debug)]
pub struct GaussianRatioCritic {
    pub rho: f64,
}

impl GaussianRatioCritic {
    pub fn log_ratio(&self, x: f64, y: f64) -> f64 {
        let p = self.rho;
        let q = 1.0 - p * p;
        -0.5 * q.ln() - (x * x - 2.0 * p * x * y + y * y) / (2.0 * q) + 0.5 * (x * x + y * y)
    }
}

impl Critic for GaussianRatioCritic {
    fn input_width(&self) -> usize {
        2
    }

    fn logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let t = g.value(z);
        let rows: Vec<Vec<f64>> = (0..t.rows())
            .map(|i| vec![self.log_ratio(t.row(i)[0], t.row(i)[1])])
            .collect();
        Ok(g.constant(Tensor::from_rows(&rows)?))
    }
}

/// Mean discriminator cross entropy on plain values (for diagnostics).
pub fn discriminator_loss_value(disc: &Discriminator, joint: &Tensor, marginal: &Tensor) -> Result<f64> {
    let lj = disc.mlp.eval(joint.clone())?;
    let lm = disc.mlp.eval(marginal.clone())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let a: Vec<f64> = lj.data().iter().map(|&l| softplus(-l)).collect();
    let b: Vec<f64> = lm.data().iter().map(|&l| softplus(l)).collect();
    Ok(mean(&a) + mean(&b))
}

/// Column-wise sample mean of a plain `[n × d]` tensor.
pub fn column_means(t: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let m = g.reduce(Reduce::Mean, v, Some(0)).expect("2-D input");
    g.value(m).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny_model(seed: u64) -> VaeModel {
        let mut rng = Rng::new(seed);
        VaeModel::new(4, 3, &[16], &[16], &mut rng).unwrap()
    }

    fn binary_batch(n: usize, pixels: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..n * pixels).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![n, pixels], data).unwrap()
    }

    fn total_for(cfg: &DisentConfig, critic: Option<&dyn Critic>, rho: Option<&Tensor>) -> LossBreakdown {
        let model = tiny_model(3);
        let x = binary_batch(8, 16, 5);
        let eps = Rng::new(9).normal_tensor(&[8, 3]);
        let mut g = Graph::new();
        let f = model.forward(&mut g, &x, &eps, false).unwrap();
        let rho = rho.map(|t| g.param(t));
        let terms = ObjectiveTerms {
            recon: f.recon,
            kl_per_dim: f.kl_per_dim,
            z_tc: f.z,
        };
        objective(&mut g, cfg, terms, critic, rho).unwrap().1
    }

    #[test]
    fn lambda_endpoints_and_domain() {
        assert_eq!(lambda_of_r(0.0, 0.1, 10.0).unwrap(), 10.0);
        assert!((lambda_of_r(1.0, 0.1, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((lambda_of_r(0.5, 0.1, 10.0).unwrap() - 5.05).abs() < 1e-12);
        assert!(matches!(lambda_of_r(1.2, 0.1, 10.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn entropy_from_logits_matches_closed_form() {
        let logits = vec![0.0, 2.0, -3.5, 30.0, -40.0];
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(logits.clone()));
        let h = relevance_entropy(&mut g, v).unwrap();
        let r: Vec<f64> = logits.iter().map(|&p| sigmoid(p)).collect();
        assert!((g.item(h) - binary_entropy(&r)).abs() < 1e-9);
        assert!(g.item(h).is_finite());
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.0]));
        let h = relevance_entropy(&mut g, v).unwrap();
        assert!((g.item(h) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn permute_dims_preserves_column_multisets() {
        let mut rng = Rng::new(1);
        let z = rng.normal_tensor(&[50, 3]);
        let p = permute_dims(&z, &mut rng).unwrap();
        for j in 0..3 {
            let mut a: Vec<f64> = (0..50).map(|i| z.row(i)[j]).collect();
            let mut b: Vec<f64> = (0..50).map(|i| p.row(i)[j]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert_ne!(z, p);
        let single = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(permute_dims(&single, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_tc_reference_values() {
        let c = |p: f64| vec![vec![1.0, p], vec![p, 1.0]];
        assert!((gaussian_tc_oracle(&c(0.5)).unwrap() - 0.143841).abs() < 1e-6);
        assert!((gaussian_tc_oracle(&c(0.8)).unwrap() - 0.510826).abs() < 1e-6);
        assert!(gaussian_tc_oracle(&c(0.0)).unwrap().abs() < 1e-15);
        assert!(matches!(gaussian_tc_oracle(&c(1.5)), Err(Error::Domain { .. })));
    }

    #[test]
    fn analytic_ratio_critic_recovers_tc() {
        let rho = 0.5;
        let critic = GaussianRatioCritic { rho };
        let mut rng = Rng::new(4);
        let n = 200_000;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.normal();
            let b = rho * a + (1.0 - rho * rho).sqrt() * rng.normal();
            rows.push(vec![a, b]);
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&rows).unwrap());
        let tc = tc_logratio(&mut g, &critic, z).unwrap();
        assert!((g.item(tc) - 0.143841).abs() < 0.01);
    }

    #[test]
    fn beta_one_is_vanilla() {
        let v = total_for(&DisentConfig::of_kind(ObjectiveKind::Vanilla), None, None);
        let mut b = DisentConfig::of_kind(ObjectiveKind::Beta);
        b.beta = 1.0;
        let b = total_for(&b, None, None);
        assert!((v.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn factor_with_zero_gamma_is_vanilla() {
        let v = total_for(&DisentConfig::of_kind(ObjectiveKind::Vanilla), None, None);
        let mut f = DisentConfig::of_kind(ObjectiveKind::Factor);
        f.gamma = 0.0;
        let f = total_for(&f, None, None);
        assert!((v.total - f.total).abs() < 1e-12);
    }

    #[test]
    fn breakdown_recomposes_total() {
        let mut rng = Rng::new(2);
        let disc = Discriminator::new(3, &[8, 8], 0.01, &mut rng).unwrap();
        let rho = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let b = total_for(&DisentConfig::default(), Some(&disc), Some(&rho));
        assert!((b.total - b.recomposed_total()).abs() < 1e-9);
        assert_eq!(b.relevance.len(), 3);
        let mut f = DisentConfig::of_kind(ObjectiveKind::Factor);
        f.gamma = 2.5;
        let b = total_for(&f, Some(&disc), None);
        assert!((b.total - b.recomposed_total()).abs() < 1e-9);
    }

    #[test]
    fn saturated_relevance_matches_known_relevance() {
        let known = vec![0usize, 2];
        let mut rng = Rng::new(7);
        let small = Discriminator::new(2, &[8, 8], 0.01, &mut rng).unwrap();
        // Lift to full width by giving the nuisance dim zero input weights.
        let mut full_params = small.mlp.params().to_vec();
        let w0 = &small.mlp.params()[0];
        let mut rows = vec![w0.row(0).to_vec(), vec![0.0; 8], w0.row(1).to_vec()];
        rows[1].iter_mut().for_each(|v| *v = 0.37);
        full_params[0] = Tensor::from_rows(&rows).unwrap();
        let spec = MlpSpec::new(&[3, 8, 8, 1], Activation::LeakyRelu(0.01), Activation::Identity).unwrap();
        let flat: Vec<f64> = full_params.iter().flat_map(|t| t.data().to_vec()).collect();
        let full = Discriminator::from_mlp(Mlp::from_flat(spec, &flat).unwrap()).unwrap();

        let mut r0 = DisentConfig::of_kind(ObjectiveKind::RfVae0);
        r0.known_r = Some(known);
        let a = total_for(&r0, Some(&small), None);
        let mut rf = DisentConfig::default();
        rf.eta_s = 0.0;
        rf.eta_h = 0.0;
        let rho = Tensor::vector(vec![20.0, -20.0, 20.0]);
        let b = total_for(&rf, Some(&full), Some(&rho));
        assert!((a.total - b.total).abs() < 1e-6, "{} vs {}", a.total, b.total);
    }

    #[test]
    fn relevance_gradient_matches_finite_differences() {
        let model = tiny_model(11);
        let x = binary_batch(6, 16, 12);
        let eps = Rng::new(13).normal_tensor(&[6, 3]);
        let mut rng = Rng::new(14);
        let disc = Discriminator::new(3, &[8], 0.01, &mut rng).unwrap();
        let cfg = DisentConfig::default();
        let rho = Tensor::vector(vec![0.4, -0.7, 1.3]);
        let err = grad_check(
            |g, vars| {
                let f = model.forward(g, &x, &eps, false)?;
                let terms = ObjectiveTerms {
                    recon: f.recon,
                    kl_per_dim: f.kl_per_dim,
                    z_tc: f.z,
                };
                Ok(objective(g, &cfg, terms, Some(&disc), Some(vars[0]))?.0)
            },
            &[rho],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "gradient error {err}");
    }

    #[test]
    fn config_validation() {
        let mut c = DisentConfig::default();
        c.lambda_min = 10.0;
        assert!(matches!(c.validate(4), Err(Error::Config(_))));
        let c = DisentConfig::of_kind(ObjectiveKind::RfVae0);
        assert!(matches!(c.validate(4), Err(Error::Config(_))));
        let mut c = DisentConfig::of_kind(ObjectiveKind::RfVae0);
        c.known_r = Some(vec![1, 5]);
        assert!(matches!(c.validate(4), Err(Error::Config(_))));
        c.known_r = Some(vec![1, 3]);
        assert!(c.validate(4).is_ok());
        assert_eq!(c.discriminator_width(4), 2);
    }

    #[test]
    fn train_step_updates_everything_and_is_deterministic() {
        let run = || {
            let model = tiny_model(21);
            let cfg = TrainerConfig::new(DisentConfig::default());
            let mut st = TrainState::new(model, &cfg, 99).unwrap();
            let mut log = Vec::new();
            for s in 0..5 {
                let x = binary_batch(8, 16, 100 + s);
                log.push(train_step(&mut st, &x, &cfg).unwrap());
            }
            (st, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.model.encoder.flat(), b.model.encoder.flat());
        assert_eq!(a.step, 5);
        let r = a.relevance.as_ref().unwrap();
        assert!(r.logits.data().iter().all(|&p| p != 0.0));
        let fresh = Discriminator::new(3, &DEFAULT_DISC_HIDDEN, DEFAULT_LEAKY_SLOPE, &mut Rng::with_stream(99, streams::DISC_INIT)).unwrap();
        assert_ne!(fresh.mlp.flat(), a.discriminator.unwrap().mlp.flat());
    }

    #[test]
    fn tiny_batches_are_rejected_when_tc_is_on() {
        let cfg = TrainerConfig::new(DisentConfig::of_kind(ObjectiveKind::Factor));
        let mut st = TrainState::new(tiny_model(1), &cfg, 1).unwrap();
        let x = binary_batch(2, 16, 1);
        assert!(matches!(train_step(&mut st, &x, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn discriminator_learns_to_separate_correlated_pairs() {
        let mut rng = Rng::new(31);
        let mut disc = Discriminator::new(2, &[32, 32], 0.01, &mut rng).unwrap();
        let sizes: Vec<usize> = disc.mlp.params().iter().map(Tensor::len).collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &sizes).unwrap();
        let sample = |rng: &mut Rng, n: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let a = rng.normal();
                    vec![a, 0.95 * a + 0.3122 * rng.normal()]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let before = {
            let j = sample(&mut rng, 256);
            let m = permute_dims(&sample(&mut rng, 256), &mut rng).unwrap();
            discriminator_loss_value(&disc, &j, &m).unwrap()
        };
        for _ in 0..300 {
            let j = sample(&mut rng, 64);
            let m = permute_dims(&sample(&mut rng, 64), &mut rng).unwrap();
            let mut g = Graph::new();
            let jv = g.constant(j);
            let mv = g.constant(m);
            let (loss, vars) = discriminator_loss(&mut g, &disc, jv, mv).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<&[f64]> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();
            let mut ps: Vec<&mut Tensor> = disc.mlp.params_mut().iter_mut().collect();
            adam.step(&mut ps, &grads).unwrap();
        }
        let j = sample(&mut rng, 256);
        let m = permute_dims(&sample(&mut rng, 256), &mut rng).unwrap();
        let after = discriminator_loss_value(&disc, &j, &m).unwrap();
        assert!(after < before - 0.2, "{before} -> {after}");
    }
}

//! Gaussian-posterior VAE on flattened images.
//!
//! The encoder emits `2d` values per row: posterior means followed by
//! log-standard-deviations. The decoder emits one Bernoulli logit per pixel.

use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Graph, Reduce, Tensor, Var};

/// Log-std head is clamped into this range before use.
pub const LOG_STD_RANGE: (f64, f64) = (-6.0, 4.0);

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub latent_dim: usize,
    pub resolution: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct PosteriorBatch {
    pub means: Var,
    pub log_stds: Var,
}

/// Graph handles from one full VAE pass.
pub struct VaeForward {
    pub posterior: PosteriorBatch,
    pub z: Var,
    pub logits: Var,
    pub recon: Var,
    pub kl_per_dim: Var,
    pub encoder_params: Vec<Var>,
    pub decoder_params: Vec<Var>,
}

impl VaeModel {
    pub fn new(
        resolution: usize,
        latent_dim: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let pix = resolution * resolution;
        let mut enc = vec![pix];
        enc.extend_from_slice(encoder_hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend_from_slice(decoder_hidden);
        dec.push(pix);
        let encoder = Mlp::init(MlpSpec::new(&enc, Activation::Relu, Activation::Identity)?, rng)?;
        let decoder = Mlp::init(MlpSpec::new(&dec, Activation::Relu, Activation::Identity)?, rng)?;
        VaeModel::from_parts(resolution, encoder, decoder)
    }

    pub fn from_parts(resolution: usize, encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let pix = resolution * resolution;
        let out = encoder.spec().output_width();
        if out % 2 != 0 {
            return Err(Error::Config(format!("encoder output width {out} is odd")));
        }
        let d = out / 2;
        if encoder.spec().input_width() != pix
            || decoder.spec().input_width() != d
            || decoder.spec().output_width() != pix
        {
            return Err(Error::Config(format!(
                "encoder {:?} and decoder {:?} do not fit resolution {resolution}",
                encoder.spec().layer_widths,
                decoder.spec().layer_widths
            )));
        }
        Ok(VaeModel {
            latent_dim: d,
            resolution,
            encoder,
            decoder,
        })
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn encode(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(PosteriorBatch, Vec<Var>)> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.pixels() {
            return Err(dim_err("encode", xs, &[self.pixels()]));
        }
        let f = self.encoder.forward(g, x, trainable)?;
        let d = self.latent_dim;
        let mean_cols: Vec<usize> = (0..d).collect();
        let std_cols: Vec<usize> = (d..2 * d).collect();
        let means = g.columns(f.output, &mean_cols)?;
        let raw = g.columns(f.output, &std_cols)?;
        let log_stds = g.clamp(raw, LOG_STD_RANGE.0, LOG_STD_RANGE.1)?;
        Ok((PosteriorBatch { means, log_stds }, f.params))
    }

    pub fn decode(&self, g: &mut Graph, z: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let f = self.decoder.forward(g, z, trainable)?;
        Ok((f.output, f.params))
    }

    /// Encode, sample with `eps`, decode, and build recon and per-dim KL.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, eps: &Tensor, trainable: bool) -> Result<VaeForward> {
        check_unit_interval(x)?;
        let xv = g.constant(x.clone());
        let (posterior, encoder_params) = self.encode(g, xv, trainable)?;
        let ev = g.constant(eps.clone());
        let z = reparameterize(g, posterior, ev)?;
        let (logits, decoder_params) = self.decode(g, z, trainable)?;
        let recon = bernoulli_recon(g, logits, xv)?;
        let kl_per_dim = prior_kl_per_dim(g, posterior)?;
        Ok(VaeForward {
            posterior,
            z,
            logits,
            recon,
            kl_per_dim,
            encoder_params,
            decoder_params,
        })
    }

    /// Posterior means and log-stds for a batch, without gradients.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (p, _) = self.encode(&mut g, xv, false)?;
        Ok((g.value(p.means).clone(), g.value(p.log_stds).clone()))
    }

    /// Pixel probabilities `σ(logits)` for latent codes.
    pub fn decode_probs(&self, z: Tensor) -> Result<Tensor> {
        let logits = self.decoder.eval(z)?;
        let shape = logits.shape().to_vec();
        Tensor::new(shape, logits.data().iter().map(|&l| sigmoid(l)).collect())
    }
}

fn check_unit_interval(x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "recon_loss",
            detail: format!("target pixel {v} outside [0, 1]"),
        });
    }
    Ok(())
}

/// `z = m + exp(log_std) ⊙ eps`.
pub fn reparameterize(g: &mut Graph, post: PosteriorBatch, eps: Var) -> Result<Var> {
    if g.shape(eps) != g.shape(post.means) {
        return Err(dim_err("reparameterize", g.shape(post.means), g.shape(eps)));
    }
    let std = g.exp(post.log_stds)?;
    let noise = g.mul(std, eps)?;
    g.add(post.means, noise)
}

/// Batch mean of the per-image summed Bernoulli cross entropy,
/// `Σ softplus(ℓ) − x·ℓ`, evaluated from logits.
pub fn bernoulli_recon(g: &mut Graph, logits: Var, x: Var) -> Result<Var> {
    check_unit_interval(g.value(x))?;
    if g.shape(logits) != g.shape(x) {
        return Err(dim_err("recon_loss", g.shape(logits), g.shape(x)));
    }
    let batch = g.shape(x)[0].max(1) as f64;
    let sp = g.softplus(logits)?;
    let xl = g.mul(x, logits)?;
    let ce = g.sub(sp, xl)?;
    let total = g.sum(ce)?;
    g.scale(total, 1.0 / batch)
}

/// Decodes `z` and scores it against `x`.
pub fn recon_loss(model: &VaeModel, g: &mut Graph, x: &Tensor, z: Var, trainable: bool) -> Result<Var> {
    check_unit_interval(x)?;
    let xv = g.constant(x.clone());
    let (logits, _) = model.decode(g, z, trainable)?;
    bernoulli_recon(g, logits, xv)
}

/// Batch mean of `KL(N(m, s²) ‖ N(0, 1)) = ½(m² + s² − 1 − 2 log s)` per
/// latent dimension; shape `[d]`.
pub fn prior_kl_per_dim(g: &mut Graph, post: PosteriorBatch) -> Result<Var> {
    let m2 = g.square(post.means)?;
    let two_ls = g.scale(post.log_stds, 2.0)?;
    let s2 = g.exp(two_ls)?;
    let a = g.add(m2, s2)?;
    let b = g.sub(a, two_ls)?;
    let c = g.offset(b, -1.0)?;
    let half = g.scale(c, 0.5)?;
    g.reduce(Reduce::Mean, half, Some(0))
}

/// Recon + Σ_j KL_j and its two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Negative ELBO on a fresh graph; returns the loss var for backward.
pub fn elbo_loss(model: &VaeModel, g: &mut Graph, x: &Tensor, eps: &Tensor) -> Result<(Var, VaeForward, ElboParts)> {
    let f = model.forward(g, x, eps, true)?;
    let kl = g.sum(f.kl_per_dim)?;
    let total = g.add(f.recon, kl)?;
    let parts = ElboParts {
        recon: g.item(f.recon),
        kl: g.item(kl),
        total: g.item(total),
    };
    Ok((total, f, parts))
}

/// Decoded images while sweeping latent `j` of the seed's posterior mean.
pub fn latent_traversal(model: &VaeModel, x_seed: &[f64], j: usize, values: &[f64]) -> Result<Vec<Vec<f64>>> {
    if j >= model.latent_dim {
        return Err(Error::Index(format!(
            "latent {j} of {}",
            model.latent_dim
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "latent_traversal",
            detail: format!("traversal value {v}"),
        });
    }
    let x = Tensor::new(vec![1, x_seed.len()], x_seed.to_vec())?;
    let (means, _) = model.posterior(&x)?;
    let d = model.latent_dim;
    let mut codes = Vec::with_capacity(values.len() * d);
    for &v in values {
        let mut row = means.data().to_vec();
        row[j] = v;
        codes.extend(row);
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let probs = model.decode_probs(Tensor::new(vec![values.len(), d], codes)?)?;
    Ok((0..values.len()).map(|i| probs.row(i).to_vec()).collect())
}

/// Largest per-pixel standard deviation across a traversal grid.
pub fn max_pixel_std(images: &[Vec<f64>]) -> f64 {
    let Some(first) = images.first() else {
        return 0.0;
    };
    let n = images.len() as f64;
    (0..first.len())
        .map(|p| {
            let mean = images.iter().map(|im| im[p]).sum::<f64>() / n;
            (images.iter().map(|im| (im[p] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .fold(0.0, f64::max)
}

/// `count` evenly spaced values over `[-span, span]`.
pub fn traversal_values(span: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|i| -span + 2.0 * span * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Binary graymap (P5) with the images laid side by side in one row.
pub fn traversal_pgm(images: &[Vec<f64>], resolution: usize) -> Vec<u8> {
    let width = resolution * images.len();
    let mut out = format!("P5\n{width} {resolution}\n255\n").into_bytes();
    for y in 0..resolution {
        for im in images {
            for x in 0..resolution {
                out.push((im[y * resolution + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

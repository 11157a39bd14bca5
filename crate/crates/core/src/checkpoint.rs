//! RFVL checkpoints: everything needed to resume training bit-exactly.
//!
//! Layout (little-endian): magic `RFVL`, version u32, step u64, latent dim
//! and resolution u32, encoder and decoder MLPs, optional relevance logits,
//! optional discriminator, Adam states, then named RNG positions. An MLP is
//! its width list (u32 count, u32 each), activation codes and the flat
//! parameters in layer order.

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::disent::{Discriminator, RelevanceVector, TrainState};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, MlpSpec};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

const MAGIC: &[u8; 4] = b"RFVL";
const VERSION: u32 = 1;

/// Trainer state plus any extra RNGs owned by the caller.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub extra_rngs: Vec<(String, RngState)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(st.step);
        w.u32(st.model.latent_dim as u32);
        w.u32(st.model.resolution as u32);
        write_mlp(&mut w, &st.model.encoder);
        write_mlp(&mut w, &st.model.decoder);
        match &st.relevance {
            Some(r) => {
                w.u8(1);
                w.u32(r.logits.len() as u32);
                w.f64s(r.logits.data());
            }
            None => w.u8(0),
        }
        match &st.discriminator {
            Some(d) => {
                w.u8(1);
                write_mlp(&mut w, &d.mlp);
            }
            None => w.u8(0),
        }
        write_adam(&mut w, &st.vae_adam);
        match &st.disc_adam {
            Some(a) => {
                w.u8(1);
                write_adam(&mut w, a);
            }
            None => w.u8(0),
        }
        let mut rngs = vec![
            ("eps".to_string(), st.eps_rng.state()),
            ("perm".to_string(), st.perm_rng.state()),
        ];
        rngs.extend(self.extra_rngs.iter().cloned());
        w.u32(rngs.len() as u32);
        for (name, s) in &rngs {
            w.str(name);
            w.u64(s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let latent_dim = r.u32()? as usize;
        let resolution = r.u32()? as usize;
        let encoder = read_mlp(&mut r)?;
        let decoder = read_mlp(&mut r)?;
        let at = r.offset();
        let model = VaeModel::from_parts(resolution, encoder, decoder).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
        if model.latent_dim != latent_dim {
            return r.fail(format!(
                "header latent dim {latent_dim} disagrees with encoder width {}",
                model.latent_dim
            ));
        }
        let relevance = if flag(&mut r)? {
            let n = r.u32()? as usize;
            if n != latent_dim {
                return r.fail(format!("relevance length {n} is not {latent_dim}"));
            }
            Some(RelevanceVector::from_logits(r.f64s(n)?))
        } else {
            None
        };
        let discriminator = if flag(&mut r)? {
            let at = r.offset();
            Some(Discriminator::from_mlp(read_mlp(&mut r)?).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?)
        } else {
            None
        };
        let vae_adam = read_adam(&mut r)?;
        let disc_adam = if flag(&mut r)? { Some(read_adam(&mut r)?) } else { None };
        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.str()?;
            let state = RngState {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            };
            named.push((name, state));
        }
        r.expect_end()?;
        let mut take = |name: &str| -> Result<Rng> {
            match named.iter().position(|(n, _)| n == name) {
                Some(i) => Ok(Rng::from_state(named.remove(i).1)),
                None => Err(Error::Format {
                    offset: buf.len(),
                    reason: format!("missing rng state {name:?}"),
                }),
            }
        };
        let eps_rng = take("eps")?;
        let perm_rng = take("perm")?;
        Ok(Checkpoint {
            state: TrainState {
                step,
                model,
                relevance,
                discriminator,
                vae_adam,
                disc_adam,
                eps_rng,
                perm_rng,
            },
            extra_rngs: named,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn extra_rng(&self, name: &str) -> Option<Rng> {
        self.extra_rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| Rng::from_state(*s))
    }
}

fn flag(r: &mut ByteReader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => r.fail(format!("bad presence flag {b}")),
    }
}

fn write_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    let spec = mlp.spec();
    w.u32(spec.layer_widths.len() as u32);
    for &width in &spec.layer_widths {
        w.u32(width as u32);
    }
    for act in [spec.hidden_activation, spec.output_activation] {
        let (code, slope) = act.code();
        w.u8(code);
        w.f64(slope);
    }
    w.f64s(&mlp.flat());
}

fn read_mlp(r: &mut ByteReader) -> Result<Mlp> {
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return r.fail(format!("implausible layer count {n}"));
    }
    let mut widths = Vec::with_capacity(n);
    for _ in 0..n {
        widths.push(r.u32()? as usize);
    }
    let mut acts = [Activation::Identity; 2];
    for a in &mut acts {
        let at = r.offset();
        let code = r.u8()?;
        let slope = r.f64()?;
        *a = Activation::from_code(code, slope).ok_or(Error::Format {
            offset: at,
            reason: format!("unknown activation code {code}"),
        })?;
    }
    let at = r.offset();
    let spec = MlpSpec::new(&widths, acts[0], acts[1]).map_err(|e| Error::Format {
        offset: at,
        reason: e.to_string(),
    })?;
    let flat = r.f64s(spec.param_count())?;
    Mlp::from_flat(spec, &flat).map_err(|e| Error::Format {
        offset: at,
        reason: e.to_string(),
    })
}

fn write_adam(w: &mut ByteWriter, a: &AdamState) {
    let c = a.config;
    w.f64s(&[c.lr, c.beta1, c.beta2, c.epsilon]);
    w.u64(a.step_count);
    w.u32(a.first_moment.len() as u32);
    for (m, v) in a.first_moment.iter().zip(&a.second_moment) {
        w.u32(m.len() as u32);
        w.f64s(m);
        w.f64s(v);
    }
}

fn read_adam(r: &mut ByteReader) -> Result<AdamState> {
    let c = r.f64s(4)?;
    let config = AdamConfig {
        lr: c[0],
        beta1: c[1],
        beta2: c[2],
        epsilon: c[3],
    };
    let step_count = r.u64()?;
    let n = r.u32()? as usize;
    let mut first_moment = Vec::with_capacity(n.min(1024));
    let mut second_moment = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u32()? as usize;
        first_moment.push(r.f64s(len)?);
        second_moment.push(r.f64s(len)?);
    }
    Ok(AdamState {
        config,
        step_count,
        first_moment,
        second_moment,
    })
}

/// Parameter tensors of a state, in checkpoint order (for comparisons).
pub fn all_params(state: &TrainState) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = state
        .model
        .encoder
        .params()
        .iter()
        .chain(state.model.decoder.params())
        .collect();
    out.extend(state.relevance.as_ref().map(|r| &r.logits));
    if let Some(d) = &state.discriminator {
        out.extend(d.mlp.params());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disent::{train_step, DisentConfig, TrainerConfig};

    fn trained(steps: usize) -> (TrainState, TrainerConfig) {
        let cfg = TrainerConfig::new(DisentConfig::default());
        let model = VaeModel::new(4, 3, &[8], &[8], &mut Rng::new(1)).unwrap();
        let mut st = TrainState::new(model, &cfg, 5).unwrap();
        let mut data = Rng::new(77);
        for _ in 0..steps {
            let x = Tensor::new(vec![8, 16], (0..128).map(|_| (data.below(2)) as f64).collect()).unwrap();
            train_step(&mut st, &x, &cfg).unwrap();
        }
        (st, cfg)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (st, _) = trained(3);
        let ck = Checkpoint {
            state: st,
            extra_rngs: vec![("data".into(), Rng::with_stream(9, 1).state())],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.step, 3);
        assert_eq!(all_params(&back.state), all_params(&ck.state));
        assert_eq!(back.state.vae_adam, ck.state.vae_adam);
        assert_eq!(back.extra_rng("data").unwrap().state(), Rng::with_stream(9, 1).state());
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let (mut a, cfg) = trained(2);
        let mut b = Checkpoint::from_bytes(&Checkpoint { state: a.clone(), extra_rngs: vec![] }.to_bytes())
            .unwrap()
            .state;
        let x = Tensor::new(vec![8, 16], (0..128).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let la = train_step(&mut a, &x, &cfg).unwrap();
        let lb = train_step(&mut b, &x, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(all_params(&a), all_params(&b));
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let (st, _) = trained(0);
        let bytes = Checkpoint { state: st, extra_rngs: vec![] }.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format { offset: 8, .. })));
    }
}

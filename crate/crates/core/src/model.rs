//! The complete codec: analysis, entropy models and synthesis.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::entropy::{quantize, CdfTable, FactorizedDensity, GaussianConditional, QuantMode};
use crate::error::{Error, Result};
use crate::fusion::{HyperDecoder, Synthesis};
use crate::nn::checkpoint::{self, Payload, Record};
use crate::nn::ParamStore;
use crate::split::{PerSplit, Split, SplitMask};
use crate::tensor::{Float, Tensor};
use crate::transform::{hyper_encoders, AnalysisTransform, HyperEncoder};

/// Quantized tables used by the coder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyTables {
    /// One context per hyper-latent channel.
    pub z: PerSplit<CdfTable>,
    /// One context per scale-table entry.
    pub y: CdfTable,
}

/// Per-split latents and their quantized forms.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    pub y: PerSplit<Tensor>,
    pub z: PerSplit<Tensor>,
    pub y_hat: PerSplit<Tensor>,
    pub z_hat: PerSplit<Tensor>,
    pub sigma: PerSplit<Tensor>,
}

/// Graph nodes of one forward pass.
pub struct Forward {
    pub x_hat: Var,
    pub y: PerSplit<Var>,
    pub y_hat: PerSplit<Var>,
    pub z_hat: PerSplit<Var>,
    pub sigma: PerSplit<Var>,
    /// Bits of `ŷ_k` under the Gaussian conditional.
    pub y_bits: PerSplit<Var>,
    /// Bits of `ẑ_k` under the factorized density.
    pub z_bits: PerSplit<Var>,
    /// Number of predicted scales raised to the lower bound.
    pub clamped_scales: usize,
}

pub struct Codec {
    config: ModelConfig,
    store: ParamStore,
    pub analysis: AnalysisTransform,
    pub hyper_enc: PerSplit<HyperEncoder>,
    pub hyper_dec: PerSplit<HyperDecoder>,
    pub densities: PerSplit<FactorizedDensity>,
    pub gaussian: GaussianConditional,
    pub synthesis: Synthesis,
    tables: OnceLock<EntropyTables>,
}

impl Clone for Codec {
    fn clone(&self) -> Self {
        let tables = OnceLock::new();
        if let Some(t) = self.tables.get() {
            let _ = tables.set(t.clone());
        }
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            analysis: self.analysis.clone(),
            hyper_enc: self.hyper_enc.clone(),
            hyper_dec: self.hyper_dec.clone(),
            densities: self.densities.clone(),
            gaussian: self.gaussian.clone(),
            synthesis: self.synthesis.clone(),
            tables,
        }
    }
}

impl Codec {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let analysis = AnalysisTransform::new(&mut store, &config, &mut rng)?;
        let hyper_enc = hyper_encoders(&mut store, &config, &mut rng)?;
        let hyper_dec =
            PerSplit::try_from_fn(|s| HyperDecoder::new(&mut store, &format!("hyper_dec.{s}"), &config, &mut rng))?;
        let densities = PerSplit::try_from_fn(|s| {
            FactorizedDensity::new(&mut store, &format!("entropy.z.{s}"), config.hyper_channels, &mut rng)
        })?;
        let synthesis = Synthesis::new(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            analysis,
            hyper_enc,
            hyper_dec,
            densities,
            gaussian: GaussianConditional::default(),
            synthesis,
            tables: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> u64 {
        self.config.model_id()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameters; cached coding tables are dropped.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.tables = OnceLock::new();
        &mut self.store
    }

    /// Coding tables, built from the current parameters on first use.
    pub fn tables(&self) -> Result<&EntropyTables> {
        if let Some(t) = self.tables.get() {
            return Ok(t);
        }
        let z = PerSplit::try_from_fn(|s| {
            CdfTable::factorized(&self.densities[s].cumulative(&self.store), self.config.hyper_channels)
        })?;
        let y = CdfTable::gaussian(&self.gaussian)?;
        Ok(self.tables.get_or_init(|| EntropyTables { z, y }))
    }

    /// `x → (y_k, z_k)` for every split.
    pub fn encode_latents<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<(PerSplit<Var>, PerSplit<Var>)> {
        let y = self.analysis.analyze(tape, x)?;
        let z = PerSplit::try_from_fn(|s| self.hyper_enc[s].forward(tape, y[s]))?;
        Ok((y, z))
    }

    /// Training / evaluation graph. Rates are computed for every split; the
    /// reconstruction uses only the splits in `mask`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        mode: QuantMode,
        mut rng: Option<&mut ChaCha8Rng>,
        mask: SplitMask,
    ) -> Result<Forward> {
        let (y, z) = self.encode_latents(tape, x)?;
        let mut y_hat = Vec::with_capacity(3);
        let mut z_hat = Vec::with_capacity(3);
        let mut sigma = Vec::with_capacity(3);
        let mut y_bits = Vec::with_capacity(3);
        let mut z_bits = Vec::with_capacity(3);
        let mut clamped_scales = 0;
        for s in Split::ALL {
            let zq = quantize(tape, z[s], mode, rng.as_deref_mut())?;
            let pz = self.densities[s].likelihood(tape, zq)?;
            z_bits.push(tape.neg_log2_sum(pz)?);
            let sg = self.hyper_dec[s].forward(tape, zq)?;
            let yq = quantize(tape, y[s], mode, rng.as_deref_mut())?;
            if tape.value(sg).shape() != tape.value(yq).shape() {
                return Err(Error::Shape(format!(
                    "split {s}: scales {:?} vs latents {:?}",
                    tape.value(sg).shape(),
                    tape.value(yq).shape()
                )));
            }
            let (py, clamped) = self.gaussian.likelihood(tape, yq, sg)?;
            clamped_scales += clamped;
            y_bits.push(tape.neg_log2_sum(py)?);
            y_hat.push(yq);
            z_hat.push(zq);
            sigma.push(sg);
        }
        let y_hat = PerSplit(y_hat.try_into().expect("3 splits"));
        let opt = PerSplit::from_fn(|s| Some(y_hat[s]));
        let x_hat = self.synthesis.reconstruct(tape, &opt, mask)?;
        Ok(Forward {
            x_hat,
            y,
            y_hat,
            z_hat: PerSplit(z_hat.try_into().expect("3 splits")),
            sigma: PerSplit(sigma.try_into().expect("3 splits")),
            y_bits: PerSplit(y_bits.try_into().expect("3 splits")),
            z_bits: PerSplit(z_bits.try_into().expect("3 splits")),
            clamped_scales,
        })
    }

    /// Round-mode latents of one image `[1, 3, H, W]`.
    pub fn latents(&self, x: &Tensor) -> Result<LatentBundle> {
        let mut tape = Tape::inference(&self.store);
        let xv = tape.constant(x.clone());
        let (y, z) = self.encode_latents(&mut tape, xv)?;
        let z_hat = PerSplit::from_fn(|s| tape.round_ste(z[s]));
        let sigma = PerSplit::try_from_fn(|s| self.hyper_dec[s].forward(&mut tape, z_hat[s]))?;
        let y_hat = PerSplit::from_fn(|s| tape.round_ste(y[s]));
        let grab = |v: &PerSplit<Var>| PerSplit::from_fn(|s| tape.value(v[s]).clone());
        Ok(LatentBundle { y: grab(&y), z: grab(&z), y_hat: grab(&y_hat), z_hat: grab(&z_hat), sigma: grab(&sigma) })
    }

    /// Scales predicted from a quantized hyper-latent.
    pub fn scales(&self, split: Split, z_hat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let z = tape.constant(z_hat.clone());
        let s = self.hyper_dec[split].forward(&mut tape, z)?;
        Ok(tape.value(s).clone())
    }

    /// Decoder-side reconstruction from quantized latents.
    pub fn synthesize(&self, y_hat: &PerSplit<Option<Tensor>>, mask: SplitMask) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let vars = PerSplit::from_fn(|s| y_hat[s].as_ref().map(|t| tape.constant(t.clone())));
        let x = self.synthesis.reconstruct(&mut tape, &vars, mask)?;
        Ok(tape.value(x).clone())
    }

    /// Round-mode forward reconstruction, as the training graph computes it.
    pub fn reconstruct_direct(&self, x: &Tensor, mask: SplitMask) -> Result<Tensor> {
        let mut tape = Tape::inference(&self.store);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, QuantMode::Round, None, mask)?;
        Ok(tape.value(out.x_hat).clone())
    }

    /// Checkpoint records: config, parameters, coding tables.
    pub fn to_records(&self) -> Result<Vec<Record>> {
        let text: Vec<u16> = self.config.to_text().bytes().map(u16::from).collect();
        let mut records = vec![Record::u16("meta.config", &[text.len()], text)];
        for (_, name, t) in self.store.iter() {
            records.push(Record::f32(name, t.shape(), t.data().to_vec()));
        }
        let tables = self.tables()?;
        for s in Split::ALL {
            records.extend(tables.z[s].to_records(&format!("z.{s}")));
        }
        records.extend(tables.y.to_records("y"));
        Ok(records)
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let meta = records
            .iter()
            .find(|r| r.name == "meta.config")
            .ok_or_else(|| Error::Format("checkpoint has no `meta.config` record".into()))?;
        let Payload::U16(raw) = &meta.payload else {
            return Err(Error::Format("`meta.config` must be integer".into()));
        };
        let text: String = raw.iter().map(|&c| char::from(c as u8)).collect();
        let config = ModelConfig::from_text(&text).map_err(|e| Error::Format(format!("bad stored config: {e}")))?;
        let mut codec = Self::new(config, 0)?;
        let mut seen = 0;
        for r in records {
            if r.name.starts_with("meta.") || r.name.starts_with("cdf.") {
                continue;
            }
            let id = codec
                .store
                .id(&r.name)
                .ok_or_else(|| Error::ModelMismatch(format!("unexpected parameter `{}`", r.name)))?;
            let Payload::F32(data) = &r.payload else {
                return Err(Error::Format(format!("parameter `{}` is not f32", r.name)));
            };
            let t = Tensor::new(&r.dims, data.clone())?;
            codec.store.set(id, t).map_err(|e| Error::ModelMismatch(e.to_string()))?;
            seen += 1;
        }
        if seen != codec.store.len() {
            return Err(Error::ModelMismatch(format!(
                "checkpoint has {seen} of {} parameters",
                codec.store.len()
            )));
        }
        if records.iter().any(|r| r.name.starts_with("cdf.")) {
            let z = PerSplit::try_from_fn(|s| CdfTable::from_records(records, &format!("z.{s}")))?;
            let y = CdfTable::from_records(records, "y")?;
            let _ = codec.tables.set(EntropyTables { z, y });
        }
        Ok(codec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.to_records()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_records(&checkpoint::load(path)?)
    }

    /// Loads and checks the stored architecture against `expected`.
    pub fn load_expecting(path: &std::path::Path, expected: &ModelConfig) -> Result<Self> {
        let codec = Self::load(path)?;
        if codec.config != *expected {
            return Err(Error::ModelMismatch(format!(
                "checkpoint model id {:016x} does not match configured {:016x}",
                codec.model_id(),
                expected.model_id()
            )));
        }
        Ok(codec)
    }
}

/// Uniform random image in `[0, 1]` for smoke tests.
pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[1, 3, h, w], |_| rng.gen::<f32>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { base_channels: 8, latent_channels: 8, hyper_channels: 4, attention_reduction: 4, ..ModelConfig::desk() }
    }

    #[test]
    fn forward_shapes_and_rates() {
        let codec = Codec::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 64, 64);
        let mut tape = Tape::with_params(codec.params());
        let xv = tape.constant(x);
        let out = codec.forward(&mut tape, xv, QuantMode::Noise, Some(&mut rng), SplitMask::FULL).unwrap();
        assert_eq!(tape.value(out.x_hat).shape(), &[1, 3, 64, 64]);
        for s in Split::ALL {
            assert!(tape.value(out.y_bits[s]).item() > 0.0);
            assert!(tape.value(out.z_bits[s]).item() > 0.0);
        }
        assert_eq!(tape.value(out.y_hat[Split::High]).shape(), &[1, 8, 4, 4]);
        assert_eq!(tape.value(out.z_hat[Split::High]).shape(), &[1, 4, 1, 1]);
    }

    #[test]
    fn round_latents_are_integers() {
        let codec = Codec::new(tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = codec.latents(&random_image(&mut rng, 64, 64)).unwrap();
        for s in Split::ALL {
            assert!(b.y_hat[s].data().iter().all(|v| v.fract() == 0.0));
            assert!(b.z_hat[s].data().iter().all(|v| v.fract() == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::new(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fotw");
        codec.save(&path).unwrap();
        let back = Codec::load_expecting(&path, &tiny()).unwrap();
        for ((_, n1, t1), (_, n2, t2)) in codec.params().iter().zip(back.params().iter()) {
            assert_eq!((n1, t1), (n2, t2));
        }
        assert_eq!(back.tables().unwrap(), codec.tables().unwrap());
        let other = ModelConfig { hyper_channels: 8, ..tiny() };
        assert!(matches!(Codec::load_expecting(&path, &other), Err(Error::ModelMismatch(_))));
    }
}

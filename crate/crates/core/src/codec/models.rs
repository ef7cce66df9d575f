use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::entropy::{init_entropy, ContextModel, EntropyConfig};
use crate::error::{Error, Result};
use crate::flow::{init_refine, ModelId, RefineConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::prediction::{init_prediction, PredictConfig};
use crate::residual::{init_coder, CoderConfig};

pub const INTRA_PREFIX: &str = "intra.";
pub const ENTROPY_SKIP_PREFIX: &str = "ent.skip.";
pub const ENTROPY_PLAIN_PREFIX: &str = "ent.plain.";
const META_CHANNELS: &str = "meta.channels";

/// Architecture of every bundle in a weight file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub coder: CoderConfig,
    pub predict: PredictConfig,
    pub refine: RefineConfig,
    pub entropy: EntropyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            coder: CoderConfig::default(),
            predict: PredictConfig::default(),
            refine: RefineConfig::default(),
            entropy: EntropyConfig::default(),
        }
    }
}

/// `m12.`, `m33.` or `m66.`.
pub fn bundle_prefix(model: ModelId) -> String {
    format!("{}.", model.tag())
}

pub fn refine_prefix(model: ModelId) -> String {
    format!("{}refine.", bundle_prefix(model))
}

pub fn predict_prefix(model: ModelId) -> String {
    format!("{}pred.", bundle_prefix(model))
}

pub fn coder_prefix(model: Option<ModelId>) -> String {
    match model {
        Some(m) => format!("{}coder.", bundle_prefix(m)),
        None => format!("{INTRA_PREFIX}coder."),
    }
}

/// Freshly initialized parameters for the intra bundle, one bundle per
/// bi-prediction model and both entropy models.
pub fn init_models(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    if !(cfg.channels == 1 || cfg.channels == 3) {
        return Err(Error::InvalidArgument(format!("{} channels; only 1 or 3 are supported", cfg.channels)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert(META_CHANNELS, Tensor::full(&[1], cfg.channels as f32));
    init_coder(&mut store, &coder_prefix(None), cfg.coder, cfg.channels, &mut rng)?;
    for m in ModelId::ALL {
        init_refine(&mut store, &refine_prefix(m), cfg.refine, cfg.channels, &mut rng);
        init_prediction(&mut store, &predict_prefix(m), cfg.predict, cfg.channels, &mut rng);
        init_coder(&mut store, &coder_prefix(Some(m)), cfg.coder, cfg.channels, &mut rng)?;
    }
    // Both entropy models share their initial masked layers so they differ
    // only in the skip connection.
    let ent_seed = rng.gen();
    let mut ent_rng = ChaCha8Rng::seed_from_u64(ent_seed);
    init_entropy(&mut store, ENTROPY_SKIP_PREFIX, EntropyConfig { temporal_skip: true, ..cfg.entropy }, &mut ent_rng)?;
    let mut ent_rng = ChaCha8Rng::seed_from_u64(ent_seed);
    init_entropy(&mut store, ENTROPY_PLAIN_PREFIX, EntropyConfig { temporal_skip: false, ..cfg.entropy }, &mut ent_rng)?;
    Ok(store)
}

/// A loaded weight file with its identity.
#[derive(Clone, Debug)]
pub struct Models {
    store: ParamStore,
    channels: usize,
    digest: [u8; 32],
    arch_hash: u64,
    entropy_skip: ContextModel,
    entropy_plain: ContextModel,
}

impl Models {
    pub fn new(store: ParamStore) -> Result<Self> {
        let channels = match store.get(META_CHANNELS).map(|t| t.data()) {
            Some([c]) if *c == 1.0 || *c == 3.0 => *c as usize,
            _ => return Err(Error::MissingParam(META_CHANNELS.into())),
        };
        let mut required = vec![format!("{}enc.conv.w", coder_prefix(None))];
        for m in ModelId::ALL {
            required.push(format!("{}enc0.w", refine_prefix(m)));
            required.push(format!("{}ctx.w", predict_prefix(m)));
            required.push(format!("{}enc.conv.w", coder_prefix(Some(m))));
        }
        if let Some(missing) = required.iter().find(|n| !store.contains(n)) {
            return Err(Error::MissingParam(missing.clone()));
        }
        let entropy_skip = ContextModel::from_store(&store, ENTROPY_SKIP_PREFIX)?;
        let entropy_plain = ContextModel::from_store(&store, ENTROPY_PLAIN_PREFIX)?;
        let digest: [u8; 32] = Sha256::digest(store.to_bytes()?).into();
        let mut h = Sha256::new();
        for (name, t) in store.iter() {
            h.update(format!("{name}:{:?};", t.shape()).as_bytes());
        }
        let arch_hash = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
        Ok(Models { store, channels, digest, arch_hash, entropy_skip, entropy_plain })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Models::new(ParamStore::load(std::fs::File::open(path)?)?)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// SHA-256 of the serialized weight file.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Hash of parameter names and shapes.
    pub fn arch_hash(&self) -> u64 {
        self.arch_hash
    }

    pub fn entropy_model(&self, temporal_skip: bool) -> &ContextModel {
        if temporal_skip {
            &self.entropy_skip
        } else {
            &self.entropy_plain
        }
    }
}

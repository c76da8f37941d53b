//! The full network: encoder, fusion, halting policy and classifier in one
//! store, the baseline in another.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ectl::{BaselineNet, ClassifierNet, PolicyNet};
use crate::error::{KvecError, Result};
use crate::kvrl::{EncodeContext, EncoderConfig, EncoderParams, EncoderPass, FusionCell};
use crate::numerics::{checkpoint, AdamConfig, ParameterStore};
use crate::sequence::{Schema, TangledSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Initial policy bias; negative values start the policy out waiting.
    pub policy_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            policy_bias_init: 0.0,
        }
    }
}

/// What a checkpoint needs to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub config: ModelConfig,
    pub schema: Schema,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct KvecModel {
    pub config: ModelConfig,
    pub schema: Schema,
    pub classes: usize,
    pub store: ParameterStore,
    pub baseline_store: ParameterStore,
    pub encoder: EncoderParams,
    pub policy: PolicyNet,
    pub classifier: ClassifierNet,
    pub baseline: BaselineNet,
}

impl KvecModel {
    pub fn new(config: ModelConfig, schema: Schema, classes: usize, seed: u64) -> Result<Self> {
        config.encoder.check()?;
        schema.check()?;
        if classes < 2 {
            return Err(KvecError::Config("at least two classes are required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(AdamConfig::default());
        let encoder = EncoderParams::register(&mut store, &config.encoder, &schema, &mut rng);
        let h = config.encoder.hidden;
        let policy = PolicyNet::register(&mut store, h, config.policy_bias_init, &mut rng);
        let classifier = ClassifierNet::register(&mut store, h, classes, &mut rng);
        let mut baseline_store = ParameterStore::new(AdamConfig::default());
        let baseline = BaselineNet::register(&mut baseline_store, h, &mut rng);
        Ok(KvecModel {
            config,
            schema,
            classes,
            store,
            baseline_store,
            encoder,
            policy,
            classifier,
            baseline,
        })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn pass<'m>(&'m self, seq: &'m TangledSequence, dropout: Option<ChaCha8Rng>) -> EncoderPass<'m> {
        EncoderPass::new(&self.encoder, &self.config.encoder, &self.store, seq, dropout)
    }

    pub fn context(&self, cache_kv: bool) -> EncodeContext<'_> {
        EncodeContext::new(&self.encoder, &self.config.encoder, &self.store, self.schema.clone(), cache_kv)
    }

    pub fn fusion(&self) -> FusionCell<'_> {
        self.encoder.fusion(&self.store)
    }

    /// Same parameters, different mask clauses. Used for SRN-style evaluation.
    pub fn with_correlations(&self, key_correlation: bool, value_correlation: bool) -> KvecModel {
        let mut m = self.clone();
        m.config.encoder.key_correlation = key_correlation;
        m.config.encoder.value_correlation = value_correlation;
        m
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            config: self.config.clone(),
            schema: self.schema.clone(),
            classes: self.classes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            serde_json::to_value(self.metadata())?,
            &[&self.store, &self.baseline_store],
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(serde_json::to_value(self.metadata())?, &[&self.store, &self.baseline_store])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: ModelMetadata = serde_json::from_value(ckpt.metadata.clone())?;
        let mut model = KvecModel::new(meta.config, meta.schema, meta.classes, 0)?;
        ckpt.load_into(&mut model.store)?;
        ckpt.load_into(&mut model.baseline_store)?;
        Ok(model)
    }
}

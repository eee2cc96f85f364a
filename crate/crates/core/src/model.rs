//! The full two-stream network and its parameter naming.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::backbones::{AttnTrace, CnnBackbone, EpochAttention, LayerInfo, SpecTransformer};
use crate::config::ModelConfig;
use crate::contrastive::Projection;
use crate::diffcore::{checkpoint, Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::sequence::SequenceModel;

/// Parameter groups frozen during fine-tuning.
pub const BACKBONE_PREFIXES: [&str; 4] = ["cnn.", "spec.", "pool_sg.", "pool_sp."];

#[derive(Clone, Debug)]
pub struct SleepNet {
    pub cfg: ModelConfig,
    pub cnn: CnnBackbone,
    pub spec: SpecTransformer,
    pub pool_sg: EpochAttention,
    pub pool_sp: EpochAttention,
    pub proj_sg: Projection,
    pub proj_sp: Projection,
    pub seq: SequenceModel,
}

/// Pooled per-epoch features, `[N, d_model]` each.
#[derive(Clone, Copy, Debug)]
pub struct EpochFeatures {
    pub sg: Var,
    pub sp: Var,
}

impl SleepNet {
    pub fn new<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(SleepNet, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let net = SleepNet {
            cfg: cfg.clone(),
            cnn: CnnBackbone::new(&mut store, &mut rng, "cnn", cfg)?,
            spec: SpecTransformer::new(&mut store, &mut rng, "spec", cfg)?,
            pool_sg: EpochAttention::new(&mut store, &mut rng, "pool_sg", d, cfg.attn_size)?,
            pool_sp: EpochAttention::new(&mut store, &mut rng, "pool_sp", d, cfg.attn_size)?,
            proj_sg: Projection::new(&mut store, &mut rng, "proj_sg", d, cfg.proj_dim)?,
            proj_sp: Projection::new(&mut store, &mut rng, "proj_sp", d, cfg.proj_dim)?,
            seq: SequenceModel::new(&mut store, &mut rng, "seq", "head", cfg)?,
        };
        Ok((net, store))
    }

    /// `raw[N,1,3000]`, `spec[N,29,129]` → pooled features.
    pub fn encode_epochs<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, raw: Var, spec: Var, trace: &mut AttnTrace) -> Result<EpochFeatures> {
        let z_sg = self.cnn.forward(g, store, raw)?;
        let sg = self.pool_sg.forward(g, store, z_sg)?.output;
        let z_sp = self.spec.forward(g, store, spec, trace)?;
        let sp = self.pool_sp.forward(g, store, z_sp)?.output;
        Ok(EpochFeatures { sg, sp })
    }

    pub fn encode_raw<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, raw: Var) -> Result<Var> {
        let z = self.cnn.forward(g, store, raw)?;
        Ok(self.pool_sg.forward(g, store, z)?.output)
    }

    pub fn encode_spec<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, spec: Var, trace: &mut AttnTrace) -> Result<Var> {
        let z = self.spec.forward(g, store, spec, trace)?;
        Ok(self.pool_sp.forward(g, store, z)?.output)
    }

    /// Layer table in parameter order.
    pub fn describe(&self) -> Vec<LayerInfo> {
        let mut v = self.cnn.infos("cnn");
        v.extend(self.spec.infos("spec"));
        v.extend(self.pool_sg.infos("pool_sg"));
        v.extend(self.pool_sp.infos("pool_sp"));
        v.extend(self.proj_sg.infos("proj_sg"));
        v.extend(self.proj_sp.infos("proj_sp"));
        v.extend(self.seq.infos("seq", "head"));
        v
    }

    pub fn save(&self, dir: &Path, store: &ParamStore<f32>, stage: &str, extra: serde_json::Value) -> Result<()> {
        let meta = json!({ "model": self.cfg, "stage": stage, "extra": extra });
        checkpoint::save(dir, store, meta)
    }

    /// Rebuilds the network described by a checkpoint and loads its values.
    pub fn load(dir: &Path) -> Result<(SleepNet, ParamStore<f32>, serde_json::Value)> {
        let (saved, meta) = checkpoint::load::<f32>(dir)?;
        let cfg: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let (net, mut store) = SleepNet::new::<f32>(&cfg, 0)?;
        let loaded = store.load_from(&saved)?;
        if loaded != store.len() {
            return Err(Error::Format(format!("checkpoint holds {loaded} of {} parameters", store.len())));
        }
        for p in store.iter_mut() {
            p.trainable = saved.by_name(&p.name).map(|s| s.trainable).unwrap_or(true);
        }
        Ok((net, store, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn describe_matches_store() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper()] {
            let (net, store) = SleepNet::new::<f32>(&cfg, 1).unwrap();
            let total: usize = net.describe().iter().map(|l| l.params).sum();
            assert_eq!(total, store.num_elements());
            for p in BACKBONE_PREFIXES {
                assert!(store.count_prefix(p) > 0);
            }
        }
    }

    #[test]
    fn encode_shapes_desk() {
        let cfg = ModelConfig::desk();
        let (net, store) = SleepNet::new::<f32>(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let raw = g.constant(Tensor::zeros(&[3, 1, 3000]));
        let spec = g.constant(Tensor::zeros(&[3, 29, 129]));
        let f = net.encode_epochs(&mut g, &store, raw, spec, &mut AttnTrace::default()).unwrap();
        assert_eq!(g.shape(f.sg), &[3, 8]);
        assert_eq!(g.shape(f.sp), &[3, 8]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (net, mut store) = SleepNet::new::<f32>(&ModelConfig::desk(), 3).unwrap();
        store.set_trainable("cnn.", false);
        net.save(dir.path(), &store, "pretrain", json!({})).unwrap();
        let (_, back, meta) = SleepNet::load(dir.path()).unwrap();
        assert_eq!(meta["stage"], "pretrain");
        assert_eq!(back.hash_prefixes(&["cnn.", "seq."]), store.hash_prefixes(&["cnn.", "seq."]));
        assert!(!back.by_name("cnn.block0.conv0.w").unwrap().trainable);
        assert!(back.by_name("seq.mask_token_sg").unwrap().trainable);
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::{FeatureDims, Sample};
use crate::afm::{AfmModel, AfmVars, Component};
use crate::backbone::ToyBackbone;
use crate::numerics::{Graph, Mode, ParamStore, Var};
use crate::{Error, Result};

/// A full scoring model: the fusion module, the toy backbone when the
/// quality feature is computed from pixels, and their parameters.
#[derive(Debug, Clone)]
pub struct FusionNet {
    config: TrainConfig,
    dims: FeatureDims,
    backbone: Option<ToyBackbone>,
    afm: AfmModel,
    store: ParamStore,
}

impl FusionNet {
    /// Parameters are drawn from a ChaCha8 stream seeded by `config.seed`,
    /// backbone first.
    pub fn new(config: &TrainConfig, dims: FeatureDims) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = if config.uses_backbone() {
            if dims.quality != config.backbone.patch_count() {
                return Err(Error::Incompatible(format!(
                    "backbone yields {} patches, quality_dim is {}",
                    config.backbone.patch_count(),
                    dims.quality
                )));
            }
            Some(ToyBackbone::new(&mut store, config.backbone, &mut rng)?)
        } else {
            None
        };
        let afm = AfmModel::new(
            &mut store,
            config.afm_config(dims.quality, dims.semantic),
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            dims,
            backbone,
            afm,
            store,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn afm(&self) -> &AfmModel {
        &self.afm
    }

    pub fn backbone(&self) -> Option<&ToyBackbone> {
        self.backbone.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Record a forward pass over a minibatch; the score node is `B x 1`.
    pub fn forward_batch(&self, g: &mut Graph, batch: &[&Sample]) -> Result<AfmVars> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(self.afm.blocks().len());
        for (c, _) in self.afm.blocks() {
            let x = match (c, &self.backbone) {
                (Component::Quality, Some(bb)) => self.backbone_rows(g, bb, batch)?,
                _ => self.stack_rows(g, *c, batch)?,
            };
            inputs.push(x);
        }
        self.afm.forward_graph(g, &self.store, &inputs)
    }

    fn stack_rows(&self, g: &mut Graph, c: Component, batch: &[&Sample]) -> Result<Var> {
        let dim = self.afm.config().input_dim(c);
        let mut data = Vec::with_capacity(batch.len() * dim);
        for s in batch {
            let f = s.features.get(c).ok_or_else(|| Error::PartialFeature {
                id: s.image_id.clone(),
                missing: c.as_char(),
            })?;
            if f.len() != dim {
                return Err(Error::Incompatible(format!(
                    "image {:?} feature '{}' has {} values, model expects {dim}",
                    s.image_id,
                    c.as_char(),
                    f.len()
                )));
            }
            data.extend_from_slice(f);
        }
        Ok(g.input(batch.len(), dim, data))
    }

    fn backbone_rows(&self, g: &mut Graph, bb: &ToyBackbone, batch: &[&Sample]) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let img = s.image.as_ref().ok_or_else(|| Error::PartialFeature {
                id: s.image_id.clone(),
                missing: 'q',
            })?;
            let out = bb.forward_graph(g, &self.store, img)?;
            rows.push(bb.quality_feature_graph(g, out)?);
        }
        // rows are 1 x p; side by side then folded into B x p
        let wide = g.concat(&rows)?;
        g.reshape(wide, batch.len(), self.dims.quality)
    }

    /// Eval-mode score for one sample. Pure, so safe to call concurrently.
    pub fn predict(&self, sample: &Sample) -> Result<f64> {
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward_batch(&mut g, &[sample])?;
        Ok(g.scalar(out.score))
    }

    /// Scores for every sample, computed in parallel, in input order.
    pub fn predict_all(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let results: Vec<Result<f64>> = samples.par_iter().map(|s| self.predict(s)).collect();
        results.into_iter().collect()
    }

    /// Gate weights for one sample, `None` without a gate.
    pub fn gate_weights(&self, sample: &Sample) -> Result<Option<Vec<f64>>> {
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward_batch(&mut g, &[sample])?;
        Ok(out.alpha.map(|a| g.value(a).to_vec()))
    }
}

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::manifest::{DatasetManifest, Record, Source};
use crate::afm::{Component, FeatureSet};
use crate::cache::{CacheEntry, CacheTag, FeatureCache};
use crate::image::Image;
use crate::numerics::Tensor1;
use crate::semantic::{fnv1a, synth_features, SynthFeatureConfig};
use crate::{Error, Result};

/// Feature caches available to a run. Either may be absent when the
/// component mask does not need it.
#[derive(Debug, Clone, Copy, Default)]
pub struct FeatureSources<'a> {
    /// Tags `a` and `b`.
    pub semantic: Option<&'a FeatureCache>,
    /// Tag `q`.
    pub quality: Option<&'a FeatureCache>,
}

/// Input widths of the quality and semantic features; 0 when unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureDims {
    pub quality: usize,
    pub semantic: usize,
}

/// One resolved training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub mos: f64,
    pub features: FeatureSet,
    /// Present when the quality feature comes from the backbone.
    pub image: Option<Image>,
}

/// Feature widths implied by `config` and the available sources.
pub fn feature_dims(config: &TrainConfig, sources: FeatureSources<'_>) -> Result<FeatureDims> {
    let mask = config.components;
    let mut dims = FeatureDims::default();
    if mask.quality {
        dims.quality = if config.uses_backbone() {
            config.backbone.patch_count()
        } else {
            sources
                .quality
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "component 'q' uses cached features but no quality cache was given".into(),
                    )
                })?
                .hidden_size()
        };
    }
    if mask.existence || mask.coherence {
        dims.semantic = sources
            .semantic
            .ok_or_else(|| Error::InvalidConfig("components 'a'/'b' need a semantic cache".into()))?
            .hidden_size();
    }
    Ok(dims)
}

/// Collect the features every id needs under `config`. A missing vector
/// anywhere fails the whole call, naming the first offending id in `ids`
/// order.
pub fn resolve(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    ids: &[String],
    sources: FeatureSources<'_>,
) -> Result<Vec<Sample>> {
    feature_dims(config, sources)?;
    let index: HashMap<&str, &Record> = manifest
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let results: Vec<Result<Sample>> = ids
        .par_iter()
        .map(|id| {
            let record = index.get(id.as_str()).ok_or_else(|| Error::NotFound {
                id: id.clone(),
                tag: '-',
                nearest: Vec::new(),
            })?;
            resolve_one(config, manifest, record, sources)
        })
        .collect();
    results.into_iter().collect()
}

fn resolve_one(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    record: &Record,
    sources: FeatureSources<'_>,
) -> Result<Sample> {
    let id = record.image_id.as_str();
    let fetch = |cache: Option<&FeatureCache>, tag: CacheTag| -> Result<Tensor1> {
        let cache = cache.expect("checked by feature_dims");
        match cache.get(id, tag) {
            Some(e) => Ok(Tensor1::new(e.to_f64())),
            None => Err(Error::PartialFeature {
                id: id.to_string(),
                missing: tag.as_char(),
            }),
        }
    };
    let mut features = FeatureSet::default();
    let mut image = None;
    for c in config.components.components() {
        match c {
            Component::Quality if config.uses_backbone() => {
                let bb = &config.backbone;
                let img = record.source.load(&manifest.base_dir, bb.image_size)?;
                if (img.channels(), img.height(), img.width())
                    != (bb.channels, bb.image_size, bb.image_size)
                {
                    return Err(Error::Incompatible(format!(
                        "image {id:?} is {}x{}x{}, backbone expects {}x{}x{}",
                        img.channels(),
                        img.height(),
                        img.width(),
                        bb.channels,
                        bb.image_size,
                        bb.image_size
                    )));
                }
                image = Some(img);
            }
            Component::Quality => features.quality = Some(fetch(sources.quality, CacheTag::Q)?),
            Component::Existence => {
                features.existence = Some(fetch(sources.semantic, CacheTag::A)?)
            }
            Component::Coherence => {
                features.coherence = Some(fetch(sources.semantic, CacheTag::B)?)
            }
        }
    }
    Ok(Sample {
        image_id: id.to_string(),
        mos: record.mos,
        features,
        image,
    })
}

/// Parameters of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    /// Width of the semantic vectors (tags `a`, `b`).
    pub dim: usize,
    /// Width of the cached quality vectors (tag `q`).
    pub quality_dim: usize,
    pub seed: u64,
    /// Fixes the feature directions; datasets that share it are draws
    /// from one generator.
    pub generator_seed: u64,
    pub mos_signal: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub semantic: Vec<CacheEntry>,
    pub quality: Vec<CacheEntry>,
}

pub const SYNTH_MOS_RANGE: (f64, f64) = (1.0, 5.0);

/// A seeded dataset where MOS is uniform on `[1, 5]` (two decimals), each
/// image source is a synthetic render whose degradation tracks MOS, and
/// every feature vector is a MOS-aligned direction blended with noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.n < super::split::MIN_SPLIT_SIZE {
        return Err(Error::TooSmall {
            n: spec.n,
            min: super::split::MIN_SPLIT_SIZE,
        });
    }
    let (lo, hi) = SYNTH_MOS_RANGE;
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[b"mos", &spec.seed.to_le_bytes()]));
    let records: Vec<Record> = (0..spec.n)
        .map(|i| {
            let mos = (rng.random_range(lo..=hi) * 100.0).round() / 100.0;
            // MOS has two decimals, so four keep the quality exact and readable
            let quality = ((mos - lo) / (hi - lo) * 1e4).round() / 1e4;
            Record {
                image_id: format!("img{i:05}"),
                source: Source::Synth {
                    seed: fnv1a(&[
                        b"image",
                        &spec.seed.to_le_bytes(),
                        &(i as u64).to_le_bytes(),
                    ]),
                    quality,
                },
                mos,
            }
        })
        .collect();
    let manifest = DatasetManifest::new(format!("synth-{}", spec.seed), records)?;
    let pairs = || {
        manifest
            .records
            .iter()
            .map(|r| (r.image_id.as_str(), r.mos))
    };
    let semantic = synth_features(
        pairs(),
        &[CacheTag::A, CacheTag::B],
        &SynthFeatureConfig {
            dim: spec.dim,
            seed: spec.seed,
            direction_seed: spec.generator_seed,
            mos_signal: spec.mos_signal,
        },
    )?;
    let quality = synth_features(
        pairs(),
        &[CacheTag::Q],
        &SynthFeatureConfig {
            dim: spec.quality_dim,
            seed: spec.seed,
            direction_seed: spec.generator_seed,
            mos_signal: spec.mos_signal,
        },
    )?;
    Ok(SynthDataset {
        manifest,
        semantic,
        quality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            n,
            dim: 8,
            quality_dim: 5,
            seed: 7,
            generator_seed: 0,
            mos_signal: 0.9,
        }
    }

    #[test]
    fn synthetic_mos_spans_range() {
        let ds = generate_synthetic(&spec(500)).unwrap();
        let mos: Vec<f64> = ds.manifest.records.iter().map(|r| r.mos).collect();
        assert!(mos.iter().all(|m| (1.0..=5.0).contains(m)));
        let distinct: BTreeSet<u64> = mos.iter().map(|m| m.to_bits()).collect();
        assert!(distinct.len() >= 10);
        assert!(mos.iter().cloned().fold(f64::INFINITY, f64::min) < 1.2);
        assert!(mos.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 4.8);
        assert_eq!(ds.semantic.len(), 1000);
        assert_eq!(ds.quality.len(), 500);
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = generate_synthetic(&spec(20)).unwrap();
        let b = generate_synthetic(&spec(20)).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.semantic, b.semantic);
        let c = generate_synthetic(&SynthSpec {
            seed: 8,
            ..spec(20)
        })
        .unwrap();
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn missing_tag_is_reported_with_id() {
        let ds = generate_synthetic(&spec(12)).unwrap();
        let semantic: Vec<CacheEntry> = ds
            .semantic
            .iter()
            .filter(|e| !(e.image_id == "img00004" && e.tag == CacheTag::B))
            .cloned()
            .collect();
        let semantic = FeatureCache::from_entries(semantic).unwrap();
        let quality = FeatureCache::from_entries(ds.quality).unwrap();
        let sources = FeatureSources {
            semantic: Some(&semantic),
            quality: Some(&quality),
        };
        let ids: Vec<String> = ds
            .manifest
            .records
            .iter()
            .map(|r| r.image_id.clone())
            .collect();
        let cfg = TrainConfig::with_seed(1);
        match resolve(&cfg, &ds.manifest, &ids, sources) {
            Err(Error::PartialFeature { id, missing }) => {
                assert_eq!((id.as_str(), missing), ("img00004", 'b'))
            }
            other => panic!("{other:?}"),
        }
        let mut qa = cfg.clone();
        qa.components = "qa".parse().unwrap();
        assert_eq!(resolve(&qa, &ds.manifest, &ids, sources).unwrap().len(), 12);
    }

    #[test]
    fn backbone_source_loads_images() {
        let ds = generate_synthetic(&spec(10)).unwrap();
        let mut cfg = TrainConfig::with_seed(1);
        cfg.components = "q".parse().unwrap();
        cfg.quality_source = super::super::config::QualitySource::Backbone;
        cfg.backbone.image_size = 16;
        let ids = vec!["img00001".to_string()];
        let s = resolve(&cfg, &ds.manifest, &ids, FeatureSources::default()).unwrap();
        assert_eq!(s[0].image.as_ref().unwrap().height(), 16);
        assert!(s[0].features.quality.is_none());
        assert_eq!(
            feature_dims(&cfg, FeatureSources::default())
                .unwrap()
                .quality,
            4
        );
    }
}

//! Quality-aware features from per-patch scores and weights.
//!
//! A backbone maps an image to a score `S[i]` and a non-negative weight
//! `W[i]` per patch. The classic rating is the weight-normalised score
//! `sum(S * W) / sum(W)`; the fusion model instead consumes the unpooled
//! elementwise product `f1 = S * W`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{cache_read, CacheTag};
use crate::image::Image;
use crate::numerics::{AffineLayer, Graph, Mode, ParamStore, Tensor1, Var};
use crate::{Error, Result};

/// Per-patch scores and weights, equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores {
    scores: Vec<f64>,
    weights: Vec<f64>,
}

impl PatchScores {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if scores.len() != weights.len() {
            return Err(Error::shape(
                "patch scores/weights",
                scores.len(),
                weights.len(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| w.is_nan() || **w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "patch weight {w} is negative or NaN"
            )));
        }
        Ok(Self { scores, weights })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Weighted mean of patch scores: `sum(S * W) / sum(W)`.
pub fn rating(ps: &PatchScores) -> Result<f64> {
    let wsum: f64 = ps.weights.iter().sum();
    if wsum.is_nan() || wsum <= 0.0 {
        return Err(Error::DegenerateWeights { sum: wsum });
    }
    let num: f64 = ps.scores.iter().zip(&ps.weights).map(|(s, w)| s * w).sum();
    Ok(num / wsum)
}

/// Quality-aware feature `f1[i] = S[i] * W[i]`.
pub fn quality_feature(ps: &PatchScores) -> Tensor1 {
    ps.scores
        .iter()
        .zip(&ps.weights)
        .map(|(s, w)| s * w)
        .collect::<Vec<_>>()
        .into()
}

/// Read a stored quality feature (tag `q`) from a feature cache file.
pub fn load_cached_quality(path: impl AsRef<Path>, image_id: &str) -> Result<Tensor1> {
    let cache = cache_read(path)?;
    Ok(Tensor1::new(cache.require(image_id, CacheTag::Q)?.to_f64()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Number of attention mixing blocks; 0 disables patch interaction.
    pub depth: usize,
    /// Square input side length, in pixels.
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            channels: 1,
            hidden: 16,
            depth: 2,
            image_size: 56,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "backbone patch_size, channels and hidden must be > 0".into(),
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Residual softmax attention over patch embeddings.
#[derive(Debug, Clone, Copy)]
struct MixingBlock {
    query: AffineLayer,
    key: AffineLayer,
    value: AffineLayer,
}

/// Small trainable patch-scoring network.
///
/// Patches are embedded by an affine map followed by ReLU, mixed by
/// `depth` attention blocks, then read out by a linear score head and a
/// sigmoid weight head that see the same representation. There are no
/// positional embeddings, so the network is equivariant to patch order.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    config: BackboneConfig,
    embed: AffineLayer,
    blocks: Vec<MixingBlock>,
    score_head: AffineLayer,
    weight_head: AffineLayer,
}

/// Graph handles for one backbone pass; both are `p x 1`.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub scores: Var,
    pub weights: Var,
}

impl ToyBackbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let embed = AffineLayer::new(store, "backbone.embed", config.patch_len(), h, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(MixingBlock {
                query: AffineLayer::new(store, &format!("backbone.mix{i}.query"), h, h, rng)?,
                key: AffineLayer::new(store, &format!("backbone.mix{i}.key"), h, h, rng)?,
                value: AffineLayer::new(store, &format!("backbone.mix{i}.value"), h, h, rng)?,
            });
        }
        Ok(Self {
            config,
            embed,
            blocks,
            score_head: AffineLayer::new(store, "backbone.score_head", h, 1, rng)?,
            weight_head: AffineLayer::new(store, "backbone.weight_head", h, 1, rng)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Set both head layers to zero.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        for l in [self.score_head, self.weight_head] {
            for id in [l.weight, l.bias] {
                store.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Image,
    ) -> Result<BackboneVars> {
        if image.channels() != self.config.channels {
            return Err(Error::shape(
                "backbone channels",
                self.config.channels,
                image.channels(),
            ));
        }
        let (p, plen, patches) = image.patches(self.config.patch_size)?;
        let x = g.input(p, plen, patches);
        let x = g.affine(store, &self.embed, x)?;
        let mut x = g.relu(x);
        let scale = 1.0 / (self.config.hidden as f64).sqrt();
        for b in &self.blocks {
            let q = g.affine(store, &b.query, x)?;
            let k = g.affine(store, &b.key, x)?;
            let v = g.affine(store, &b.value, x)?;
            let att = g.matmul_t(q, k)?;
            let att = g.scale(att, scale);
            let att = g.softmax_rows(att);
            let mixed = g.matmul(att, v)?;
            x = g.add(x, mixed)?;
        }
        let scores = g.affine(store, &self.score_head, x)?;
        let w = g.affine(store, &self.weight_head, x)?;
        let weights = g.sigmoid(w);
        Ok(BackboneVars { scores, weights })
    }

    /// `1 x p` node holding `S * W`.
    pub fn quality_feature_graph(&self, g: &mut Graph, out: BackboneVars) -> Result<Var> {
        let f = g.mul(out.scores, out.weights)?;
        let p = g.shape(f).0;
        g.reshape(f, 1, p)
    }

    /// `1 x 1` node holding the weighted rating.
    pub fn rating_graph(&self, g: &mut Graph, out: BackboneVars) -> Result<Var> {
        let sw = g.mul(out.scores, out.weights)?;
        let num = g.sum_all(sw);
        let den = g.sum_all(out.weights);
        g.div(num, den)
    }

    /// Eval-mode scores and weights.
    pub fn forward(&self, store: &ParamStore, image: &Image) -> Result<PatchScores> {
        let mut g = Graph::new(Mode::Eval);
        let out = self.forward_graph(&mut g, store, image)?;
        PatchScores::new(g.value(out.scores).to_vec(), g.value(out.weights).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synth_image;
    use crate::numerics::check::{finite_difference_grads, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rating_examples() {
        assert_eq!(
            rating(&PatchScores::new(vec![2.0, 4.0], vec![1.0, 1.0]).unwrap()).unwrap(),
            3.0
        );
        assert_eq!(
            rating(&PatchScores::new(vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0]).unwrap()).unwrap(),
            3.0
        );
        assert!(matches!(
            rating(&PatchScores::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap()),
            Err(Error::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn feature_examples() {
        let f = quality_feature(&PatchScores::new(vec![1.0, 2.0], vec![1.0, 0.0]).unwrap());
        assert_eq!(&*f, &[1.0, 0.0]);
        let s = vec![0.3, -1.2, 4.0];
        let f = quality_feature(&PatchScores::new(s.clone(), vec![1.0; 3]).unwrap());
        assert_eq!(&*f, &s[..]);
        assert!(matches!(
            PatchScores::new(vec![1.0], vec![1.0, 2.0]),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn rating_is_weight_scale_invariant_and_bounded(
            sw in prop::collection::vec((-10.0f64..10.0, 0.01f64..5.0), 1..40),
            c in 0.01f64..100.0,
        ) {
            let s: Vec<f64> = sw.iter().map(|p| p.0).collect();
            let w: Vec<f64> = sw.iter().map(|p| p.1).collect();
            let r = rating(&PatchScores::new(s.clone(), w.clone()).unwrap()).unwrap();
            let scaled = rating(&PatchScores::new(s.clone(), w.iter().map(|v| v * c).collect()).unwrap()).unwrap();
            prop_assert!((r - scaled).abs() <= 1e-12 * r.abs().max(1.0));
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
        }

        #[test]
        fn feature_is_bilinear_in_weights(
            rows in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0, 0.0f64..5.0), 1..40),
        ) {
            let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let w1: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let w2: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
            let f = quality_feature(&PatchScores::new(s.clone(), sum).unwrap());
            let f1 = quality_feature(&PatchScores::new(s.clone(), w1).unwrap());
            let f2 = quality_feature(&PatchScores::new(s, w2).unwrap());
            for i in 0..f.len() {
                prop_assert!((f[i] - (f1[i] + f2[i])).abs() <= 1e-12 * f[i].abs().max(1.0));
            }
        }
    }

    fn small_config(depth: usize) -> BackboneConfig {
        BackboneConfig {
            patch_size: 8,
            channels: 1,
            hidden: 4,
            depth,
            image_size: 16,
        }
    }

    #[test]
    fn forward_shape_and_zero_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = ToyBackbone::new(&mut store, small_config(2), &mut rng).unwrap();
        let img = synth_image(1, 0.5, 16);
        let ps = bb.forward(&store, &img).unwrap();
        assert_eq!(ps.len(), 4);
        assert!(ps.weights().iter().all(|&w| w > 0.0 && w < 1.0));

        bb.zero_heads(&mut store);
        let ps = bb.forward(&store, &Image::zeros(1, 16, 16)).unwrap();
        assert!(ps.scores().iter().all(|&s| s == ps.scores()[0]));
        assert!(ps.weights().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let bb = ToyBackbone::new(&mut store, small_config(2), &mut rng).unwrap();
        let img = synth_image(2, 0.1, 16);
        assert_eq!(
            bb.forward(&store, &img).unwrap(),
            bb.forward(&store, &img).unwrap()
        );
    }

    #[test]
    fn rejects_non_divisible_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = ToyBackbone::new(&mut store, small_config(0), &mut rng).unwrap();
        assert!(matches!(
            bb.forward(&store, &Image::zeros(1, 12, 16)),
            Err(Error::Shape { .. })
        ));
    }

    /// Swapping the two patch rows of the image swaps the corresponding
    /// patch outputs when mixing is disabled.
    #[test]
    fn patch_row_permutation_is_equivariant_without_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let bb = ToyBackbone::new(&mut store, small_config(0), &mut rng).unwrap();
        let img = synth_image(3, 0.4, 16);
        let mut swapped = vec![0.0; 256];
        for y in 0..16 {
            let src = (y + 8) % 16;
            for x in 0..16 {
                swapped[y * 16 + x] = img.get(0, src, x);
            }
        }
        let swapped = Image::new(1, 16, 16, swapped).unwrap();
        let a = bb.forward(&store, &img).unwrap();
        let b = bb.forward(&store, &swapped).unwrap();
        // patch order: (0,0) (0,1) (1,0) (1,1)
        let perm = [2, 3, 0, 1];
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(a.scores()[i].to_bits(), b.scores()[j].to_bits());
            assert_eq!(a.weights()[i].to_bits(), b.weights()[j].to_bits());
        }
    }

    #[test]
    fn rating_and_feature_gradients_match_finite_differences() {
        for point in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + point);
            let mut store = ParamStore::new();
            let bb = ToyBackbone::new(&mut store, small_config(2), &mut rng).unwrap();
            let img = synth_image(point, 0.3, 16);
            let probe: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let build = |s: &ParamStore| {
                let mut g = Graph::new(Mode::Eval);
                let out = bb.forward_graph(&mut g, s, &img).unwrap();
                let r = bb.rating_graph(&mut g, out).unwrap();
                let f = bb.quality_feature_graph(&mut g, out).unwrap();
                let pv = g.vector(&probe);
                let fp = g.mul(f, pv).unwrap();
                let fp = g.sum_all(fp);
                let both = g.concat(&[r, fp]).unwrap();
                let loss = g.mse_loss(both, &[0.7, -0.3]).unwrap();
                (g, loss)
            };
            store.zero_grads();
            let (g, loss) = build(&store);
            let value = g.scalar(loss);
            g.backward(loss, &mut store).unwrap();
            let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
            let numeric = finite_difference_grads(&mut store, 1e-5, |s| {
                let (g, l) = build(s);
                g.scalar(l)
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "point {point}: loss {value}, rel err {err}");
        }
    }
}

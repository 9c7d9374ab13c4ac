//! Semantic feature pathway: the two fixed prompts, token averaging of a
//! multimodal model's last hidden layer, cache lookup, and a seeded
//! synthetic generator that stands in for the multimodal model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cache::{CacheEntry, CacheTag, FeatureCache};
use crate::numerics::Tensor1;
use crate::{Error, Result};

/// Hidden width of the reference multimodal extractor.
pub const LMM_HIDDEN_SIZE: usize = 4096;

pub const PROMPT_A: &str = "Evaluate the input image to determine if its quality is compromised due to a lack of meaningful semantic content.";
pub const PROMPT_B: &str =
    "Evaluate if the image quality is compromised due to violations of coherence.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptTag {
    /// Existence of semantic content.
    A,
    /// Coherence of semantic content.
    B,
}

impl PromptTag {
    pub const ALL: [PromptTag; 2] = [PromptTag::A, PromptTag::B];

    pub fn text(self) -> &'static str {
        match self {
            PromptTag::A => PROMPT_A,
            PromptTag::B => PROMPT_B,
        }
    }

    pub fn cache_tag(self) -> CacheTag {
        match self {
            PromptTag::A => CacheTag::A,
            PromptTag::B => CacheTag::B,
        }
    }

    pub fn as_char(self) -> char {
        self.cache_tag().as_char()
    }
}

/// Plain-text registry consumed by external extractors: one prompt per
/// line, `<tag>\t<prompt>`.
pub fn prompt_registry() -> String {
    PromptTag::ALL
        .iter()
        .map(|t| format!("{}\t{}\n", t.as_char(), t.text()))
        .collect()
}

pub fn parse_prompt_registry(text: &str) -> Result<Vec<(PromptTag, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (tag, prompt) = line.split_once('\t').ok_or_else(|| Error::Format {
            offset: i,
            message: format!("registry line {} has no tab separator", i + 1),
        })?;
        let tag = match tag {
            "a" => PromptTag::A,
            "b" => PromptTag::B,
            other => {
                return Err(Error::Format {
                    offset: i,
                    message: format!("registry line {}: unknown tag {other:?}", i + 1),
                })
            }
        };
        out.push((tag, prompt.to_string()));
    }
    Ok(out)
}

/// Last-layer hidden states for the answer tokens, `rows` tokens by `cols`
/// hidden units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenHiddenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenHiddenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("token matrix", rows * cols, data.len()));
        }
        if cols == 0 {
            return Err(Error::EmptyInput(
                "token matrix with zero hidden units".into(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "token matrix".into(),
                detail: format!("contains {v}"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }
}

/// Column mean over tokens: `vec[j] = (1/rows) * sum_k m[k][j]`.
pub fn average_tokens(m: &TokenHiddenMatrix) -> Result<Tensor1> {
    if m.rows == 0 {
        return Err(Error::EmptyInput("token matrix has no tokens".into()));
    }
    let mut acc = vec![0.0; m.cols];
    for row in m.data.chunks_exact(m.cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = m.rows as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Tensor1::new(acc))
}

/// Both prompt features for one image, in `(a, b)` order.
pub fn lookup(cache: &FeatureCache, image_id: &str) -> Result<(Tensor1, Tensor1)> {
    let get = |tag: PromptTag| {
        cache
            .get(image_id, tag.cache_tag())
            .map(|e| Tensor1::new(e.to_f64()))
            .ok_or_else(|| Error::PartialFeature {
                id: image_id.to_string(),
                missing: tag.as_char(),
            })
    };
    Ok((get(PromptTag::A)?, get(PromptTag::B)?))
}

/// Settings for [`synth_features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthFeatureConfig {
    pub dim: usize,
    /// Seeds the per-image noise.
    pub seed: u64,
    /// Seeds the MOS-aligned directions. Datasets sharing it come from the
    /// same generator.
    pub direction_seed: u64,
    /// Blend between the MOS-aligned direction (1) and pure noise (0).
    pub mos_signal: f64,
}

impl SynthFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "dim must be >= 2, got {}",
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.mos_signal) {
            return Err(Error::InvalidConfig(format!(
                "mos_signal must be in [0, 1], got {}",
                self.mos_signal
            )));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a, used to derive stable per-item seeds from strings.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") != ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fixed unit-norm direction for a tag; the probe against which synthetic
/// features correlate with MOS.
pub fn synth_direction(tag: CacheTag, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(fnv1a(&[b"direction", &seed.to_le_bytes(), &[tag.byte()]]));
    let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.iter_mut().for_each(|v| *v /= norm);
    d
}

/// One synthetic vector: `mos_signal * mos * direction + (1 - mos_signal) * noise`
/// with standard-normal noise seeded by `(seed, tag, image_id)`.
pub fn synth_vector(
    image_id: &str,
    mos: f64,
    tag: CacheTag,
    direction: &[f64],
    cfg: &SynthFeatureConfig,
) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
        b"noise",
        &cfg.seed.to_le_bytes(),
        &[tag.byte()],
        image_id.as_bytes(),
    ]));
    direction
        .iter()
        .map(|&d| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            (cfg.mos_signal * mos * d + (1.0 - cfg.mos_signal) * noise) as f32
        })
        .collect()
}

/// Synthetic cache entries for `(image_id, mos)` records, one per tag.
pub fn synth_features<'a, I>(
    records: I,
    tags: &[CacheTag],
    cfg: &SynthFeatureConfig,
) -> Result<Vec<CacheEntry>>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    cfg.validate()?;
    let directions: Vec<Vec<f64>> = tags
        .iter()
        .map(|&t| synth_direction(t, cfg.dim, cfg.direction_seed))
        .collect();
    let mut out = Vec::new();
    for (id, mos) in records {
        for (&tag, dir) in tags.iter().zip(&directions) {
            out.push(CacheEntry::new(
                id,
                tag,
                synth_vector(id, mos, tag, dir, cfg),
            ));
        }
    }
    Ok(out)
}

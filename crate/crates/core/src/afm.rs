//! Adaptive fusion of quality-aware and semantic features.
//!
//! Each enabled feature passes through its own transform block into a
//! shared `d`-dimensional space. A gating network (one affine layer and a
//! sigmoid) reads the concatenated transformed features and emits one
//! weight per feature; the fused vector is the weighted sum, and a single
//! affine layer regresses the score.
//!
//! Gate weights are independent sigmoids, not a softmax: they lie in
//! `(0, 1)` but need not sum to one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{ensure_finite, AffineLayer, Graph, Mode, ParamStore, Tensor1, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    /// Quality-aware patch feature `f1`.
    Quality,
    /// Semantic-existence feature `f_a`.
    Existence,
    /// Semantic-coherence feature `f_b`.
    Coherence,
}

impl Component {
    pub const ALL: [Component; 3] = [
        Component::Quality,
        Component::Existence,
        Component::Coherence,
    ];

    pub fn as_char(self) -> char {
        match self {
            Component::Quality => 'q',
            Component::Existence => 'a',
            Component::Coherence => 'b',
        }
    }
}

/// Which of the three features a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComponentMask {
    pub quality: bool,
    pub existence: bool,
    pub coherence: bool,
}

impl ComponentMask {
    pub const FULL: ComponentMask = ComponentMask {
        quality: true,
        existence: true,
        coherence: true,
    };

    pub fn contains(&self, c: Component) -> bool {
        match c {
            Component::Quality => self.quality,
            Component::Existence => self.existence,
            Component::Coherence => self.coherence,
        }
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|&c| self.contains(c))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.components().len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// The seven non-empty masks: singles, then pairs, then the full set.
    pub fn ablation_order() -> [ComponentMask; 7] {
        let m = |quality, existence, coherence| ComponentMask {
            quality,
            existence,
            coherence,
        };
        [
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }
}

impl fmt::Display for ComponentMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.components() {
            write!(f, "{}", c.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for ComponentMask {
    type Err = Error;

    /// Parses letters from `{q, a, b}`, e.g. `"qab"` or `"qb"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = ComponentMask {
            quality: false,
            existence: false,
            coherence: false,
        };
        for ch in s.chars() {
            let slot = match ch {
                'q' => &mut m.quality,
                'a' => &mut m.existence,
                'b' => &mut m.coherence,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown component {other:?} in mask {s:?}; use letters from \"qab\""
                    )))
                }
            };
            if *slot {
                return Err(Error::InvalidConfig(format!(
                    "component {ch:?} repeated in {s:?}"
                )));
            }
            *slot = true;
        }
        if m.is_empty() {
            return Err(Error::InvalidConfig(
                "component mask must enable at least one feature".into(),
            ));
        }
        Ok(m)
    }
}

impl Serialize for ComponentMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ComponentMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// A single affine layer.
    Quality,
    /// Affine, ReLU, dropout.
    Semantic,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformBlock {
    pub kind: BlockKind,
    pub affine: AffineLayer,
    pub dropout: f64,
}

impl TransformBlock {
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, n) = g.shape(x);
        if n != self.affine.in_dim {
            return Err(Error::shape(
                format!("{:?} transform block input", self.kind),
                self.affine.in_dim,
                n,
            ));
        }
        let y = g.affine(store, &self.affine, x)?;
        match self.kind {
            BlockKind::Quality => Ok(y),
            BlockKind::Semantic => {
                let y = g.relu(y);
                g.dropout(y, self.dropout)
            }
        }
    }
}

/// Affine map `k*d -> k` followed by a sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct GateNetwork {
    pub affine: AffineLayer,
}

impl GateNetwork {
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.affine.out_dim {
            return Err(Error::shape(
                "gate inputs",
                self.affine.out_dim,
                parts.len(),
            ));
        }
        let cat = g.concat(parts)?;
        let (_, n) = g.shape(cat);
        if n != self.affine.in_dim {
            return Err(Error::shape(
                "gate concatenated input",
                self.affine.in_dim,
                n,
            ));
        }
        let pre = g.affine(store, &self.affine, cat)?;
        Ok(g.sigmoid(pre))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Fusion {
    /// One feature; no gate, weight fixed at 1.
    Single,
    Gated(GateNetwork),
    /// Baseline without gating: concatenated features feed the head.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfmConfig {
    pub d: usize,
    pub quality_dim: usize,
    pub semantic_dim: usize,
    pub dropout: f64,
    pub mask: ComponentMask,
    pub moe: bool,
}

impl AfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be > 0".into()));
        }
        if self.mask.is_empty() {
            return Err(Error::InvalidConfig("component mask is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.mask.quality && self.quality_dim == 0 {
            return Err(Error::InvalidConfig("quality_dim must be > 0".into()));
        }
        if (self.mask.existence || self.mask.coherence) && self.semantic_dim == 0 {
            return Err(Error::InvalidConfig("semantic_dim must be > 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self, c: Component) -> usize {
        match c {
            Component::Quality => self.quality_dim,
            _ => self.semantic_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AfmModel {
    config: AfmConfig,
    blocks: Vec<(Component, TransformBlock)>,
    fusion: Fusion,
    head: AffineLayer,
}

/// Graph handles from one fusion pass.
#[derive(Debug, Clone)]
pub struct AfmVars {
    pub score: Var,
    /// Gate output, `1 x k`; `None` when there is no gate.
    pub alpha: Option<Var>,
    pub transformed: Vec<Var>,
}

/// Raw input features for one image; entries needed by the mask must be set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub quality: Option<Tensor1>,
    pub existence: Option<Tensor1>,
    pub coherence: Option<Tensor1>,
}

impl FeatureSet {
    pub fn get(&self, c: Component) -> Option<&Tensor1> {
        match c {
            Component::Quality => self.quality.as_ref(),
            Component::Existence => self.existence.as_ref(),
            Component::Coherence => self.coherence.as_ref(),
        }
    }
}

impl AfmModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: AfmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let comps = config.mask.components();
        let mut blocks = Vec::with_capacity(comps.len());
        for &c in &comps {
            let name = format!("afm.transform_{}", c.as_char());
            let affine = AffineLayer::new(store, &name, config.input_dim(c), d, rng)?;
            let kind = match c {
                Component::Quality => BlockKind::Quality,
                _ => BlockKind::Semantic,
            };
            blocks.push((
                c,
                TransformBlock {
                    kind,
                    affine,
                    dropout: if kind == BlockKind::Semantic {
                        config.dropout
                    } else {
                        0.0
                    },
                },
            ));
        }
        let k = comps.len();
        let (fusion, head_in) = if k == 1 {
            (Fusion::Single, d)
        } else if config.moe {
            let affine = AffineLayer::new(store, "afm.gate", k * d, k, rng)?;
            (Fusion::Gated(GateNetwork { affine }), d)
        } else {
            (Fusion::Concat, k * d)
        };
        let head = AffineLayer::new(store, "afm.regression", head_in, 1, rng)?;
        Ok(Self {
            config,
            blocks,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &AfmConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[(Component, TransformBlock)] {
        &self.blocks
    }

    pub fn block(&self, c: Component) -> Option<&TransformBlock> {
        self.blocks.iter().find(|(bc, _)| *bc == c).map(|(_, b)| b)
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn gate(&self) -> Option<&GateNetwork> {
        match &self.fusion {
            Fusion::Gated(g) => Some(g),
            _ => None,
        }
    }

    pub fn head(&self) -> &AffineLayer {
        &self.head
    }

    /// `inputs` are `1 x dim` nodes in component order (q, a, b) restricted
    /// to the mask.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Var],
    ) -> Result<AfmVars> {
        if inputs.len() != self.blocks.len() {
            return Err(Error::shape(
                "fusion inputs",
                self.blocks.len(),
                inputs.len(),
            ));
        }
        let mut transformed = Vec::with_capacity(inputs.len());
        for (&x, (c, block)) in inputs.iter().zip(&self.blocks) {
            let y = block.forward_graph(g, store, x)?;
            ensure_finite(&format!("transform '{}'", c.as_char()), g.value(y))?;
            transformed.push(y);
        }
        let (fused, alpha) = match &self.fusion {
            Fusion::Single => (transformed[0], None),
            Fusion::Gated(gate) => {
                let alpha = gate.forward_graph(g, store, &transformed)?;
                ensure_finite("gate", g.value(alpha))?;
                let fused = g.weighted_sum(&transformed, alpha)?;
                (fused, Some(alpha))
            }
            Fusion::Concat => (g.concat(&transformed)?, None),
        };
        ensure_finite("fusion", g.value(fused))?;
        let score = g.affine(store, &self.head, fused)?;
        ensure_finite("regression", g.value(score))?;
        Ok(AfmVars {
            score,
            alpha,
            transformed,
        })
    }

    fn input_vars(&self, g: &mut Graph, features: &FeatureSet) -> Result<Vec<Var>> {
        self.blocks
            .iter()
            .map(|(c, _)| {
                let f = features.get(*c).ok_or_else(|| Error::PartialFeature {
                    id: String::new(),
                    missing: c.as_char(),
                })?;
                Ok(g.vector(f))
            })
            .collect()
    }

    /// Score one feature set.
    pub fn predict(&self, store: &ParamStore, features: &FeatureSet, mode: Mode) -> Result<f64> {
        let mut g = Graph::new(mode);
        let inputs = self.input_vars(&mut g, features)?;
        let out = self.forward_graph(&mut g, store, &inputs)?;
        Ok(g.scalar(out.score))
    }

    /// Gate weights for one feature set, `None` without a gate.
    pub fn gate_weights(
        &self,
        store: &ParamStore,
        features: &FeatureSet,
    ) -> Result<Option<Vec<f64>>> {
        let mut g = Graph::new(Mode::Eval);
        let inputs = self.input_vars(&mut g, features)?;
        let out = self.forward_graph(&mut g, store, &inputs)?;
        Ok(out.alpha.map(|a| g.value(a).to_vec()))
    }
}

/// Apply one transform block to a plain vector.
pub fn transform(
    store: &ParamStore,
    block: &TransformBlock,
    f: &[f64],
    mode: Mode,
) -> Result<Tensor1> {
    let mut g = Graph::new(mode);
    let x = g.vector(f);
    let y = block.forward_graph(&mut g, store, x)?;
    Ok(Tensor1::new(g.value(y).to_vec()))
}

/// Gate weights for already-transformed features.
pub fn gate(store: &ParamStore, gn: &GateNetwork, parts: &[&[f64]]) -> Result<Vec<f64>> {
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = parts.iter().map(|p| g.vector(p)).collect();
    let alpha = gn.forward_graph(&mut g, store, &vars)?;
    Ok(g.value(alpha).to_vec())
}

/// `g[j] = sum_i alpha[i] * parts[i][j]`.
pub fn fuse(parts: &[&[f64]], alpha: &[f64]) -> Result<Tensor1> {
    if parts.len() != alpha.len() {
        return Err(Error::shape("fuse weights", parts.len(), alpha.len()));
    }
    let Some(first) = parts.first() else {
        return Err(Error::EmptyInput("fuse of zero features".into()));
    };
    let d = first.len();
    let mut out = vec![0.0; d];
    for (p, a) in parts.iter().zip(alpha) {
        if p.len() != d {
            return Err(Error::shape("fuse feature length", d, p.len()));
        }
        for (o, v) in out.iter_mut().zip(*p) {
            *o += a * v;
        }
    }
    Ok(Tensor1::new(out))
}

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::{feature_dims, resolve, FeatureDims, FeatureSources, Sample};
use super::manifest::DatasetManifest;
use super::model::FusionNet;
use super::split::{split, SplitAssignment, SplitMix64, SplitPart};
use crate::afm::{ComponentMask, Fusion};
use crate::metrics::EvalReport;
use crate::numerics::{Adam, Graph, Mode};
use crate::{Error, Result};

/// Salt separating the minibatch-order stream from the split stream.
const ORDER_SALT: u64 = 0x6f72_6465_7273_6565;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample MSE over the epoch's minibatches.
    pub train_loss: f64,
    /// `None` when validation correlations are undefined, e.g. constant
    /// predictions.
    pub val: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub split_sizes: (usize, usize, usize),
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn selected(&self) -> &EpochLog {
        &self.epochs[self.selected_epoch - 1]
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Tab-separated log: a header line, one line per epoch
    /// (`epoch train_loss n srcc plcc krcc rmse`, `-` for undefined
    /// validation metrics), then `selected <epoch>`.
    pub fn to_log(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tn\tsrcc\tplcc\tkrcc\trmse\n");
        for e in &self.epochs {
            let val = e
                .val
                .as_ref()
                .map_or_else(|| "-\t-\t-\t-\t-".to_string(), EvalReport::to_record);
            let _ = writeln!(out, "{}\t{}\t{}", e.epoch, e.train_loss, val);
        }
        let _ = writeln!(out, "selected\t{}", self.selected_epoch);
        out
    }
}

/// Samples for each split part, resolved once and shared between runs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: SplitAssignment,
    pub dims: FeatureDims,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn part(&self, p: SplitPart) -> &[Sample] {
        match p {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Split the manifest with `config.seed` and resolve every feature the
/// config needs. Fails before any training if a feature is missing.
pub fn prepare(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    sources: FeatureSources<'_>,
) -> Result<PreparedData> {
    config.validate()?;
    let dims = feature_dims(config, sources)?;
    let split = split(manifest, config.seed)?;
    let train = resolve(config, manifest, &split.train, sources)?;
    let val = resolve(config, manifest, &split.val, sources)?;
    let test = resolve(config, manifest, &split.test, sources)?;
    Ok(PreparedData {
        split,
        dims,
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub net: FusionNet,
    pub data: PreparedData,
}

pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    sources: FeatureSources<'_>,
) -> Result<TrainedRun> {
    let data = prepare(config, manifest, sources)?;
    let (record, net) = train_prepared(config, &data)?;
    Ok(TrainedRun { record, net, data })
}

fn divergence(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { stage, detail } => Error::Divergence {
            epoch,
            batch,
            detail: format!("{stage}: {detail}"),
        },
        other => other,
    }
}

/// Minibatch MSE training with per-epoch validation. The returned network
/// holds the parameters of the epoch with the highest validation
/// `srcc + plcc`; ties keep the earlier epoch.
pub fn train_prepared(config: &TrainConfig, data: &PreparedData) -> Result<(RunRecord, FusionNet)> {
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training part is empty".into()));
    }
    let mut net = FusionNet::new(config, data.dims)?;
    let mut adam = Adam::new(config.optim, net.store())?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut order_rng = SplitMix64::new(config.seed ^ ORDER_SALT);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;

    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_no = b + 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let dropout_seed =
                SplitMix64::new(config.seed ^ ((epoch as u64) << 32) ^ b as u64).next_u64();
            let mut g = Graph::new(Mode::Train { seed: dropout_seed });
            let out = net
                .forward_batch(&mut g, &batch)
                .map_err(divergence(epoch, batch_no))?;
            let targets: Vec<f64> = batch.iter().map(|s| s.mos).collect();
            let loss = g.mse_loss(out.score, &targets)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_no,
                    detail: format!("loss is {l}"),
                });
            }
            net.store_mut().zero_grads();
            g.backward(loss, net.store_mut())?;
            adam.step(net.store_mut())
                .map_err(divergence(epoch, batch_no))?;
            loss_sum += l * batch.len() as f64;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val = if data.val.is_empty() {
            None
        } else {
            let pred = net.predict_all(&data.val).map_err(divergence(epoch, 0))?;
            let truth: Vec<f64> = data.val.iter().map(|s| s.mos).collect();
            EvalReport::compute(&pred, &truth).ok()
        };
        if let Some(r) = &val {
            let score = r.selection_score();
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, net.store().snapshot()));
            }
        }
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val,
        });
    }

    // Without any defined validation report the last epoch is kept.
    let selected_epoch = match best {
        Some((_, epoch, snapshot)) => {
            net.store_mut().restore(&snapshot);
            epoch
        }
        None => config.epochs,
    };
    let record = RunRecord {
        config: config.clone(),
        split_sizes: data.split.sizes(),
        epochs,
        selected_epoch,
        checkpoint: None,
    };
    Ok((record, net))
}

/// Metrics of `net` on already-resolved samples.
pub fn evaluate_samples(net: &FusionNet, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let pred = net.predict_all(samples)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    EvalReport::compute(&pred, &truth)
}

fn check_compatible(net: &FusionNet, dims: FeatureDims) -> Result<()> {
    let want = net.dims();
    if want != dims {
        return Err(Error::Incompatible(format!(
            "checkpoint expects quality_dim={} semantic_dim={}, data provides quality_dim={} semantic_dim={}",
            want.quality, want.semantic, dims.quality, dims.semantic
        )));
    }
    Ok(())
}

/// Evaluate on one part of `manifest`, split with the checkpoint's seed.
pub fn evaluate(
    net: &FusionNet,
    manifest: &DatasetManifest,
    part: SplitPart,
    sources: FeatureSources<'_>,
) -> Result<EvalReport> {
    let config = net.config();
    check_compatible(net, feature_dims(config, sources)?)?;
    let split = split(manifest, config.seed)?;
    let samples = resolve(config, manifest, split.part(part), sources)?;
    evaluate_samples(net, &samples)
}

/// Evaluate on the test part of another dataset under the same seed.
pub fn cross_evaluate(
    net: &FusionNet,
    other: &DatasetManifest,
    sources: FeatureSources<'_>,
) -> Result<EvalReport> {
    evaluate(net, other, SplitPart::Test, sources)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Single,
    Moe,
    Concat,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Single => "single",
            FusionKind::Moe => "moe",
            FusionKind::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub components: ComponentMask,
    pub fusion: FusionKind,
    pub record: RunRecord,
    pub test: EvalReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.fusion {
            FusionKind::Concat => format!("{}-concat", self.components),
            _ => self.components.to_string(),
        }
    }

    /// `ABLATION label components fusion selected_epoch n srcc plcc krcc rmse`.
    pub fn to_record(&self) -> String {
        format!(
            "ABLATION\t{}\t{}\t{}\t{}\t{}",
            self.label(),
            self.components,
            self.fusion.as_str(),
            self.record.selected_epoch,
            self.test.to_record()
        )
    }
}

/// The eight ablation configurations: every non-empty mask (singles, pairs,
/// full) with gating, then the full mask with concatenation instead.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out: Vec<TrainConfig> = ComponentMask::ablation_order()
        .into_iter()
        .map(|mask| TrainConfig {
            components: mask,
            moe: true,
            ..base.clone()
        })
        .collect();
    out.push(TrainConfig {
        components: ComponentMask::FULL,
        moe: false,
        ..base.clone()
    });
    out
}

/// Train and test every ablation configuration on one shared split.
/// Runs proceed in parallel; each is deterministic on its own.
pub fn ablate(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    sources: FeatureSources<'_>,
) -> Result<Vec<AblationRow>> {
    let full = TrainConfig {
        components: ComponentMask::FULL,
        ..config.clone()
    };
    let data = prepare(&full, manifest, sources)?;
    let rows: Vec<Result<AblationRow>> = ablation_configs(config)
        .into_par_iter()
        .map(|cfg| {
            let (record, net) = train_prepared(&cfg, &data)?;
            let test = evaluate_samples(&net, &data.test)?;
            let fusion = match net.afm().fusion() {
                Fusion::Single => FusionKind::Single,
                Fusion::Gated(_) => FusionKind::Moe,
                Fusion::Concat => FusionKind::Concat,
            };
            Ok(AblationRow {
                components: cfg.components,
                fusion,
                record,
                test,
            })
        })
        .collect();
    rows.into_iter().collect()
}

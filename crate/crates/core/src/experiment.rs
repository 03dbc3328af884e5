//! The four comparison arms and a runner that trains one arm on a dataset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::eval::{validate_linear_hypothesis, HypothesisReport};
use crate::gfk::GeodesicFlowKernel;
use crate::par;
use crate::scene::{featurize_view, Dataset, Split, NUM_CLASSES};
use crate::segmodel::{
    feasible_dim, fit_pair_clipped, mask_vector, train, MetricKind, SegModel, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Source-only training: λ_I = λ_P = 0, plain prompts.
    NoAdapt,
    /// Geometric and prompt terms measured with Q = I.
    Euclidean,
    /// Geometric term with the geodesic flow kernel, no prompt term.
    Geodesic,
    /// Geometric term plus the view-condition prompt term.
    GeodesicViewPrompt,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoAdapt, Arm::Euclidean, Arm::Geodesic, Arm::GeodesicViewPrompt];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::NoAdapt => "no-adapt",
            Arm::Euclidean => "euclidean",
            Arm::Geodesic => "geodesic",
            Arm::GeodesicViewPrompt => "geodesic-view-prompt",
        }
    }

    /// Specializes `base` for this arm; loss weights not switched off keep their values.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Arm::NoAdapt => {
                cfg.adapt.lambda_i = 0.0;
                cfg.adapt.lambda_p = 0.0;
                cfg.view_prompts = false;
            }
            Arm::Euclidean => {
                cfg.metric = MetricKind::Euclidean;
                cfg.view_prompts = true;
            }
            Arm::Geodesic => {
                cfg.metric = MetricKind::Geodesic;
                cfg.adapt.lambda_p = 0.0;
                cfg.view_prompts = false;
            }
            Arm::GeodesicViewPrompt => {
                cfg.metric = MetricKind::Geodesic;
                cfg.view_prompts = true;
            }
        }
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm {s:?}")))
    }
}

/// What `train` reads from its `--config` file. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arm: Arm,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arm: Arm::GeodesicViewPrompt,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// The `report.json` body of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub seed: u64,
    pub report: TrainReport,
}

/// One row of the arm comparison: per-class IoU and mIoU averaged over runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRow {
    pub arm: Arm,
    pub runs: usize,
    /// `None` where no run scored the class.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Groups runs by arm (in [`Arm::ALL`] order) and averages their test scores.
/// Runs without a test score are rejected.
pub fn arm_table(records: &[RunRecord]) -> Result<Vec<ArmRow>> {
    let mut rows = Vec::new();
    for arm in Arm::ALL {
        let scores = records
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| {
                r.report.target_test.as_ref().ok_or_else(|| {
                    Error::InvalidConfig(format!("run of arm {arm} (seed {}) has no test score", r.seed))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if scores.is_empty() {
            continue;
        }
        let classes = scores.iter().map(|s| s.per_class_iou.len()).max().unwrap_or(0);
        let per_class_iou = (0..classes)
            .map(|c| {
                let vals: Vec<f64> = scores
                    .iter()
                    .filter_map(|s| s.per_class_iou.get(c).copied().flatten())
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        rows.push(ArmRow {
            arm,
            runs: scores.len(),
            per_class_iou,
            miou: scores.iter().map(|s| s.miou).sum::<f64>() / scores.len() as f64,
        });
    }
    Ok(rows)
}

/// Trains `arm` on the `source` / `target` splits and scores it on `target_test`.
pub fn run_arm(dataset: &Dataset, arm: Arm, base: &TrainConfig, seed: u64) -> Result<(SegModel, TrainReport)> {
    let mut cfg = arm.configure(base);
    cfg.adapt.seed = seed;
    let test = dataset.split("target_test").ok();
    train(
        &cfg,
        NUM_CLASSES,
        dataset.split("source")?,
        dataset.split("target")?,
        test,
    )
}

fn image_vectors(split: &Split, side: usize) -> Result<Vec<DVector<f64>>> {
    par::try_map_range(split.views.len(), |i| {
        featurize_view(&split.views[i], side).map(DVector::from_vec)
    })
}

fn label_vectors(split: &Split, side: usize) -> Result<Vec<DVector<f64>>> {
    par::try_map_range(split.views.len(), |i| {
        let v = &split.views[i];
        mask_vector(&v.mask, NUM_CLASSES, v.width, v.height, side)
    })
}

/// Measures the image/segmentation distance relation on a paired dataset
/// (`source` and `target` splits hold the two views of the same scenes),
/// using the featurizers, centering and subspace size of `cfg`.
pub fn hypothesis_study(dataset: &Dataset, cfg: &TrainConfig, max_pairs: usize, seed: u64) -> Result<HypothesisReport> {
    let (s, t) = (dataset.split("source")?, dataset.split("target")?);
    if !dataset.manifest.spec.paired {
        return Err(Error::InvalidConfig(
            "the hypothesis study needs a paired dataset".into(),
        ));
    }
    let (xs, xt) = (image_vectors(s, cfg.image_side)?, image_vectors(t, cfg.image_side)?);
    let (ys, yt) = (label_vectors(s, cfg.seg_side)?, label_vectors(t, cfg.seg_side)?);
    let n = xs.len().min(xt.len());
    let kernel = |a: &[DVector<f64>], b: &[DVector<f64>], center: bool| -> Result<GeodesicFlowKernel> {
        let dim = feasible_dim(cfg.adapt.subspace_dim, n, a[0].len(), center);
        let (ps, pt) = fit_pair_clipped(a, b, dim, center)?;
        GeodesicFlowKernel::build_with(&ps, &pt, cfg.adapt.small_angle_eps)
    };
    let kx = kernel(&xs, &xt, cfg.center_images)?;
    let ky = kernel(&ys, &yt, cfg.center_segmentation)?;
    validate_linear_hypothesis(&kx, &ky, &xs, &xt, &ys, &yt, max_pairs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.as_str().parse::<Arm>().unwrap(), a);
        }
        assert!("bogus".parse::<Arm>().is_err());
    }

    #[test]
    fn no_adapt_switches_off_both_terms() {
        let c = Arm::NoAdapt.configure(&TrainConfig::default());
        assert_eq!((c.adapt.lambda_i, c.adapt.lambda_p), (0.0, 0.0));
        assert!(!c.adapts());
        let g = Arm::GeodesicViewPrompt.configure(&TrainConfig::default());
        assert_eq!((g.adapt.lambda_i, g.adapt.lambda_p), (1.0, 0.5));
    }

    #[test]
    fn experiment_config_accepts_partial_json() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"arm": "euclidean", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.arm, Arm::Euclidean);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.adapt.alpha, 1.5);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    fn record(arm: Arm, seed: u64, ious: Vec<Option<f64>>) -> RunRecord {
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        RunRecord {
            arm,
            seed,
            report: TrainReport {
                seed,
                config: TrainConfig::default(),
                epochs: Vec::new(),
                image_subspace_dim: 1,
                prompt_subspace_dim: 1,
                seg_subspace_dim: 1,
                prompt_distance: 0.0,
                source_prompt: String::new(),
                target_prompt: String::new(),
                source_condition: Vec::new(),
                target_condition: Vec::new(),
                target_test: Some(crate::eval::MiouResult {
                    miou: present.iter().sum::<f64>() / present.len() as f64,
                    per_class_iou: ious,
                }),
                warnings: Vec::new(),
            },
        }
    }

    #[test]
    fn arm_table_averages_per_arm() {
        let runs = [
            record(Arm::Geodesic, 1, vec![Some(0.5), None]),
            record(Arm::NoAdapt, 1, vec![Some(0.2), Some(0.4)]),
            record(Arm::Geodesic, 2, vec![Some(0.7), Some(0.1)]),
        ];
        let t = arm_table(&runs).unwrap();
        assert_eq!(
            t.iter().map(|r| r.arm).collect::<Vec<_>>(),
            [Arm::NoAdapt, Arm::Geodesic]
        );
        let g = &t[1];
        assert_eq!(g.runs, 2);
        assert!((g.per_class_iou[0].unwrap() - 0.6).abs() < 1e-12);
        assert!((g.per_class_iou[1].unwrap() - 0.1).abs() < 1e-12);
        assert!((g.miou - (0.5 + 0.4) / 2.0).abs() < 1e-12);
        let mut untested = record(Arm::Euclidean, 3, vec![Some(1.0)]);
        untested.report.target_test = None;
        assert!(arm_table(&[untested]).is_err());
    }
}

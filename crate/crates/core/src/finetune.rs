//! Per-episode finetuning: backbone features, optional distribution
//! calibration, prototype classifier with optional selected sampling, and
//! full-batch Adam updates on the support set.
//!
//! Each epoch is one full-batch step. Within an epoch the calibration
//! statistics and the prototypes are treated as constants by the backward
//! pass (statistics can optionally be differentiated). Query examples are
//! only ever scored; nothing computed from them feeds back into training.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, MlpParams};
use crate::classifier::{self, ClassifierHead, Prototypes};
use crate::dcm::{self, DcmState, DcmStats};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::{self, ProposalConfig};
use crate::seed::{self, tag};

/// Lower bound kept on the learnable temperature.
pub const TEMPERATURE_FLOOR: f64 = 1e-3;

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// B: update backbone weights.
    pub backbone: bool,
    /// S: learn the per-dimension scale vector.
    pub scale: bool,
    /// FN: normalize with support statistics.
    pub feature_norm: bool,
    /// SS: selected sampling for prototype estimation.
    pub selected_sampling: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation::new(false, false, false, false);
    pub const B: Ablation = Ablation::new(true, false, false, false);
    pub const B_FN: Ablation = Ablation::new(true, false, true, false);
    pub const B_FN_S: Ablation = Ablation::new(true, true, true, false);
    pub const FULL: Ablation = Ablation::new(true, true, true, true);

    /// Rows of the ablation table, in order.
    pub const TABLE: [Ablation; 5] = [
        Ablation::NONE,
        Ablation::B,
        Ablation::B_FN,
        Ablation::B_FN_S,
        Ablation::FULL,
    ];

    pub const fn new(backbone: bool, scale: bool, feature_norm: bool, selected_sampling: bool) -> Self {
        Self {
            backbone,
            scale,
            feature_norm,
            selected_sampling,
        }
    }

    /// `none`, or the enabled flags joined with `+` (e.g. `B+FN+S`).
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [
            (self.backbone, "B"),
            (self.feature_norm, "FN"),
            (self.scale, "S"),
            (self.selected_sampling, "SS"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Ablation::NONE;
        if s.trim() == "none" {
            return Ok(out);
        }
        for part in s.split('+').map(str::trim) {
            match part {
                "B" => out.backbone = true,
                "S" => out.scale = true,
                "FN" => out.feature_norm = true,
                "SS" => out.selected_sampling = true,
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub flags: Ablation,
    pub freeze_temperature: bool,
    pub temperature_init: f64,
    /// Refit calibration statistics every epoch; otherwise fit once on the
    /// initial support features.
    pub refit_stats: bool,
    /// Backpropagate through `mu`/`sigma` as functions of the support
    /// features (only meaningful with `refit_stats`).
    pub differentiate_stats: bool,
    pub sigma_walk: f64,
    pub max_chain_len: usize,
    pub epsilon: f64,
    /// Record query loss/accuracy in every epoch trace.
    pub trace_query: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 25,
            adam: AdamConfig::default(),
            flags: Ablation::FULL,
            freeze_temperature: false,
            temperature_init: 10.0,
            refit_stats: true,
            differentiate_stats: false,
            sigma_walk: 0.1,
            max_chain_len: 20,
            epsilon: dcm::DEFAULT_EPSILON,
            trace_query: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::Config("temperature_init must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.proposal(0).validate()
    }

    /// Proposal settings for the chains run at `epoch`; `epochs` itself is
    /// the final evaluation pass.
    pub fn proposal(&self, epoch: usize) -> ProposalConfig {
        ProposalConfig {
            sigma_walk: self.sigma_walk,
            max_chain_len: self.max_chain_len,
            seed: seed::derive(seed::derive(self.seed, tag::SAMPLING), epoch as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    /// 1-based; metrics are taken from the forward pass before this
    /// epoch's update.
    pub epoch: usize,
    pub support_loss: f64,
    pub support_acc: f64,
    pub query_loss: Option<f64>,
    pub query_acc: Option<f64>,
    pub mean_chain_length: f64,
    pub temperature: f64,
    /// `|w_c - m_c|` per class when a reference population is supplied.
    pub bias_norms: Option<Vec<f64>>,
}

/// Population sample per episode class, used only to estimate the true
/// class means in the current feature space for bias diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReference {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub epoch: usize,
    pub chain_lengths: Vec<usize>,
    pub per_class_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub backbone: MlpParams,
    pub dcm: DcmState,
    pub temperature: f64,
    pub traces: Vec<EpochTrace>,
    /// Calibration state at every epoch (after that epoch's refit, before
    /// its update).
    pub dcm_history: Vec<DcmState>,
    pub augmentation_log: Vec<AugmentationRecord>,
    pub final_prototypes: Prototypes,
    pub query_logits: Matrix,
    pub query_predictions: Vec<usize>,
    pub query_features: Matrix,
    pub query_accuracy: f64,
    pub query_loss: f64,
    /// Number of `p(y|x)` values clamped in the loss over the whole run.
    pub clamped: usize,
}

/// Support pipeline state for one pass: calibrated features and the
/// prototypes the classifier scores against.
struct SupportPass {
    cache: backbone::ForwardCache,
    calibrated: dcm::Calibrated,
    prototypes: Prototypes,
    augmentation: Option<AugmentationRecord>,
    mean_chain_length: f64,
}

#[allow(clippy::too_many_arguments)]
fn support_pass(
    net: &MlpParams,
    dcm_state: &mut DcmState,
    inputs: &Matrix,
    labels: &[usize],
    num_ways: usize,
    head: &ClassifierHead,
    config: &FinetuneConfig,
    epoch: usize,
) -> Result<SupportPass> {
    let (raw, cache) = backbone::forward(net, inputs)?;
    if config.flags.feature_norm {
        if config.refit_stats || dcm_state.stats.is_none() {
            dcm_state.fit(&raw)?;
        }
    } else {
        dcm_state.stats = Some(DcmStats::identity(dcm_state.dim()));
    }
    let calibrated = dcm::calibrate_with_cache(&raw, dcm_state)?;
    let prototypes = classifier::compute_prototypes(&calibrated.output, labels, num_ways)?;
    let (prototypes, augmentation, mean_chain_length) = if config.flags.selected_sampling {
        let aug = sampling::augment_support(
            &calibrated.output,
            labels,
            &prototypes,
            head,
            &config.proposal(epoch),
        )?;
        let record = AugmentationRecord {
            epoch,
            chain_lengths: aug.chains.iter().map(|c| c.len()).collect(),
            per_class_counts: aug.per_class_counts.clone(),
        };
        (aug.prototypes(num_ways)?, Some(record), aug.mean_chain_length())
    } else {
        (prototypes, None, 0.0)
    };
    Ok(SupportPass {
        cache,
        calibrated,
        prototypes,
        augmentation,
        mean_chain_length,
    })
}

struct Scored {
    logits: Matrix,
    loss: f64,
    accuracy: f64,
    clamped: usize,
    logit_grad: Matrix,
}

fn score(features: &Matrix, labels: &[usize], prototypes: &Prototypes, head: &ClassifierHead) -> Result<Scored> {
    let logits = classifier::logits(features, prototypes, head)?;
    let probs = classifier::softmax_rows(&logits)?;
    let ce = classifier::cross_entropy(&probs, labels)?;
    let accuracy = classifier::accuracy(&classifier::predict_from_logits(&logits), labels);
    Ok(Scored {
        logits,
        loss: ce.loss,
        accuracy,
        clamped: ce.clamped,
        logit_grad: ce.logit_grad,
    })
}

fn eval_features(net: &MlpParams, dcm_state: &DcmState, inputs: &Matrix) -> Result<Matrix> {
    let (raw, _) = backbone::forward(net, inputs)?;
    dcm::calibrate(&raw, dcm_state)
}

fn bias_norms(
    net: &MlpParams,
    dcm_state: &DcmState,
    reference: &ClassReference,
    prototypes: &Prototypes,
) -> Result<Vec<f64>> {
    let features = eval_features(net, dcm_state, &reference.inputs)?;
    let means = classifier::compute_prototypes(&features, &reference.labels, prototypes.num_ways())?;
    Ok(classifier::bias_diagnostics(prototypes, Some(&means.rows))?.norms)
}

/// Finetunes on the episode's support set and evaluates its query set with
/// the final parameters.
pub fn finetune_episode(
    episode: &Episode,
    pretrained: &MlpParams,
    config: &FinetuneConfig,
    reference: Option<&ClassReference>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    episode.validate()?;
    if episode.dim() != pretrained.input_dim() {
        return Err(Error::Shape(format!(
            "episode inputs have dimension {}, backbone expects {}",
            episode.dim(),
            pretrained.input_dim()
        )));
    }
    if episode.query.is_empty() {
        return Err(Error::Config("episode has an empty query set".into()));
    }
    let flags = config.flags;
    let num_ways = episode.num_ways;
    let support_x = episode.support_inputs();
    let support_y = episode.support_labels();
    let query_x = episode.query_inputs();
    let query_y = episode.query_labels();

    let mut net = pretrained.clone();
    let mut dcm_state = DcmState::new(net.output_dim());
    dcm_state.epsilon = config.epsilon;
    let mut temperature = config.temperature_init;
    let mut adam = Adam::new(config.adam);
    let mut traces = Vec::with_capacity(config.epochs);
    let mut dcm_history = Vec::with_capacity(config.epochs);
    let mut augmentation_log = Vec::new();
    let mut clamped = 0;

    for epoch in 0..config.epochs {
        let head = ClassifierHead { temperature };
        let pass = support_pass(
            &net,
            &mut dcm_state,
            &support_x,
            &support_y,
            num_ways,
            &head,
            config,
            epoch,
        )?;
        let scored = score(&pass.calibrated.output, &support_y, &pass.prototypes, &head)?;
        if !scored.loss.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                loss: scored.loss,
            });
        }
        clamped += scored.clamped;

        let (query_loss, query_acc) = if config.trace_query {
            let q = eval_features(&net, &dcm_state, &query_x)?;
            let qs = score(&q, &query_y, &pass.prototypes, &head)?;
            (Some(qs.loss), Some(qs.accuracy))
        } else {
            (None, None)
        };
        let norms = reference
            .map(|r| bias_norms(&net, &dcm_state, r, &pass.prototypes))
            .transpose()?;
        traces.push(EpochTrace {
            epoch: epoch + 1,
            support_loss: scored.loss,
            support_acc: scored.accuracy,
            query_loss,
            query_acc,
            mean_chain_length: pass.mean_chain_length,
            temperature,
            bias_norms: norms,
        });
        dcm_history.push(dcm_state.clone());
        augmentation_log.extend(pass.augmentation);

        let back = classifier::cosine_backward(
            &pass.calibrated.output,
            &pass.prototypes,
            temperature,
            &scored.logit_grad,
        )?;
        if flags.backbone {
            let raw_grad = if flags.feature_norm && config.refit_stats && config.differentiate_stats {
                dcm::stats_gradient_full(&back.feature_grad, &pass.calibrated.normalized, &dcm_state)?
            } else {
                dcm::stats_gradient_passthrough(&back.feature_grad, &dcm_state)?
            };
            let (grads, _) = backbone::backward(&net, &pass.cache, &raw_grad)?;
            for (i, (p, g)) in net.buffers_mut().into_iter().zip(grads.buffers()).enumerate() {
                let name = format!("backbone.{}.{}", i / 2, if i % 2 == 0 { "weights" } else { "bias" });
                adam.step(&name, p, g, config.lr, true)?;
            }
        }
        if flags.scale {
            let grad = dcm::scale_gradient(&back.feature_grad, &pass.calibrated.normalized)?;
            adam.step("scale", &mut dcm_state.scale, &grad, config.lr, true)?;
        }
        let mut tau = [temperature];
        adam.step(
            "temperature",
            &mut tau,
            &[back.temperature_grad],
            config.lr,
            !config.freeze_temperature,
        )?;
        temperature = tau[0].max(TEMPERATURE_FLOOR);
    }

    // Final evaluation: support statistics and (augmented) prototypes from
    // the final parameters, then the query set scored once.
    let head = ClassifierHead { temperature };
    let pass = support_pass(
        &net,
        &mut dcm_state,
        &support_x,
        &support_y,
        num_ways,
        &head,
        config,
        config.epochs,
    )?;
    augmentation_log.extend(pass.augmentation);
    let query_features = eval_features(&net, &dcm_state, &query_x)?;
    let q = score(&query_features, &query_y, &pass.prototypes, &head)?;
    Ok(FinetuneOutcome {
        backbone: net,
        dcm: dcm_state,
        temperature,
        traces,
        dcm_history,
        augmentation_log,
        query_predictions: classifier::predict_from_logits(&q.logits),
        query_logits: q.logits,
        query_features,
        query_accuracy: q.accuracy,
        query_loss: q.loss,
        final_prototypes: pass.prototypes,
        clamped,
    })
}

/// Query accuracy of the untouched backbone with support-mean prototypes
/// and the cosine head at the initial temperature.
pub fn prototype_baseline(episode: &Episode, pretrained: &MlpParams, temperature: f64) -> Result<f64> {
    let (support, _) = backbone::forward(pretrained, &episode.support_inputs())?;
    let prototypes = classifier::compute_prototypes(&support, &episode.support_labels(), episode.num_ways)?;
    let (query, _) = backbone::forward(pretrained, &episode.query_inputs())?;
    let predicted = classifier::predict(&query, &prototypes, &ClassifierHead { temperature })?;
    Ok(classifier::accuracy(&predicted, &episode.query_labels()))
}

/// Sum over classes of the trace of the within-class covariance of
/// `features` (population normalization).
pub fn within_class_variance(features: &Matrix, labels: &[usize], num_ways: usize) -> Result<f64> {
    let means = classifier::compute_prototypes(features, labels, num_ways)?;
    let mut counts = vec![0usize; num_ways];
    let mut totals = vec![0.0; num_ways];
    for (row, &y) in features.iter_rows().zip(labels) {
        let diff = linalg::sub(row, means.rows.row(y));
        totals[y] += linalg::dot(&diff, &diff);
        counts[y] += 1;
    }
    Ok(totals.iter().zip(&counts).map(|(t, &n)| t / n as f64).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_novel_dataset, sample_episode, DomainShift, Shots, SyntheticDomainSpec};

    fn setup() -> (Episode, MlpParams) {
        let spec = SyntheticDomainSpec {
            dim: 6,
            num_base_classes: 4,
            num_novel_classes: 5,
            cluster_spread: 0.8,
            mean_scale: 1.5,
            domain_shift: DomainShift::skewed(6, 0.5, 1.0, 3.0, 1),
            contamination_rate: 0.1,
        };
        let novel = generate_novel_dataset(&spec, 30, 4).unwrap();
        let ep = sample_episode(&novel.dataset, 3, Shots::Fixed(3), 6, 8).unwrap();
        let net = MlpParams::new(&[6, 12, 12, 5], 2).unwrap();
        (ep, net)
    }

    #[test]
    fn ablation_names_round_trip() {
        let names: Vec<String> = Ablation::TABLE.iter().map(Ablation::name).collect();
        assert_eq!(names, ["none", "B", "B+FN", "B+FN+S", "B+FN+S+SS"]);
        for a in Ablation::TABLE {
            assert_eq!(Ablation::parse(&a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("B+X").is_err());
    }

    #[test]
    fn no_flags_matches_prototype_baseline() {
        let (ep, net) = setup();
        let cfg = FinetuneConfig {
            flags: Ablation::NONE,
            lr: 1e-2,
            ..FinetuneConfig::default()
        };
        let out = finetune_episode(&ep, &net, &cfg, None).unwrap();
        assert_eq!(out.backbone, net);
        assert_eq!(out.query_accuracy, prototype_baseline(&ep, &net, 10.0).unwrap());
        assert!(out.dcm.scale.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (ep, net) = setup();
        let cfg = FinetuneConfig {
            lr: 0.0,
            ..FinetuneConfig::default()
        };
        let out = finetune_episode(&ep, &net, &cfg, None).unwrap();
        assert_eq!(out.backbone, net);
        assert_eq!(out.dcm.scale, vec![1.0; 5]);
        assert_eq!(out.temperature, 10.0);
        // every epoch sees identical parameters, so identical support loss
        // up to the sampling noise in the prototypes
        assert!(out.traces.iter().all(|t| t.support_loss.is_finite()));
    }

    #[test]
    fn runs_are_deterministic() {
        let (ep, net) = setup();
        let cfg = FinetuneConfig {
            lr: 1e-3,
            seed: 5,
            ..FinetuneConfig::default()
        };
        let a = finetune_episode(&ep, &net, &cfg, None).unwrap();
        let b = finetune_episode(&ep, &net, &cfg, None).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.query_logits, b.query_logits);
    }

    #[test]
    fn disabled_groups_stay_fixed() {
        let (ep, net) = setup();
        let cfg = FinetuneConfig {
            lr: 1e-2,
            flags: Ablation::new(false, false, true, true),
            ..FinetuneConfig::default()
        };
        let out = finetune_episode(&ep, &net, &cfg, None).unwrap();
        assert_eq!(out.backbone.flatten(), net.flatten());
        assert_eq!(out.dcm.scale, vec![1.0; 5]);
        assert_ne!(out.temperature, 10.0);

        let frozen = FinetuneConfig {
            freeze_temperature: true,
            flags: Ablation::FULL,
            ..cfg
        };
        let out = finetune_episode(&ep, &net, &frozen, None).unwrap();
        assert_eq!(out.temperature, 10.0);
        assert_ne!(out.backbone, net);
        assert!(out.dcm.scale.iter().any(|&s| s != 1.0));
    }

    #[test]
    fn query_tracing_does_not_touch_training() {
        let (ep, net) = setup();
        let traced = FinetuneConfig {
            lr: 1e-3,
            ..FinetuneConfig::default()
        };
        let untraced = FinetuneConfig {
            trace_query: false,
            ..traced.clone()
        };
        let a = finetune_episode(&ep, &net, &traced, None).unwrap();
        let b = finetune_episode(&ep, &net, &untraced, None).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.query_logits, b.query_logits);
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.support_loss, y.support_loss);
            assert!(x.query_acc.is_some() && y.query_acc.is_none());
        }
    }

    #[test]
    fn query_labels_do_not_influence_training() {
        let (ep, net) = setup();
        let mut scrambled = ep.clone();
        for (i, q) in scrambled.query.iter_mut().enumerate() {
            q.label = (q.label + i) % scrambled.num_ways;
            q.input.iter_mut().for_each(|v| *v = -*v);
        }
        let cfg = FinetuneConfig {
            lr: 1e-3,
            ..FinetuneConfig::default()
        };
        let a = finetune_episode(&ep, &net, &cfg, None).unwrap();
        let b = finetune_episode(&scrambled, &net, &cfg, None).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.dcm, b.dcm);
        assert_eq!(a.final_prototypes, b.final_prototypes);
    }

    #[test]
    fn frozen_backbone_shares_the_first_loss() {
        let (ep, net) = setup();
        let full = FinetuneConfig {
            lr: 1e-3,
            ..FinetuneConfig::default()
        };
        let frozen = FinetuneConfig {
            flags: Ablation::new(false, true, true, true),
            ..full.clone()
        };
        let a = finetune_episode(&ep, &net, &full, None).unwrap();
        let b = finetune_episode(&ep, &net, &frozen, None).unwrap();
        assert_eq!(a.traces[0].support_loss, b.traces[0].support_loss);
        assert_ne!(a.backbone, b.backbone);
        assert_eq!(b.backbone, net);
    }

    #[test]
    fn bias_norms_are_reported_with_a_reference() {
        let (ep, net) = setup();
        let reference = ClassReference {
            inputs: ep.query_inputs(),
            labels: ep.query_labels(),
        };
        let cfg = FinetuneConfig {
            epochs: 2,
            ..FinetuneConfig::default()
        };
        let out = finetune_episode(&ep, &net, &cfg, Some(&reference)).unwrap();
        assert_eq!(out.traces[0].bias_norms.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn empty_query_is_rejected() {
        let (mut ep, net) = setup();
        ep.query.clear();
        ep.query_indices.clear();
        assert!(finetune_episode(&ep, &net, &FinetuneConfig::default(), None).is_err());
    }

    #[test]
    fn within_class_variance_of_known_points() {
        let f = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]]).unwrap();
        let v = within_class_variance(&f, &[0, 0, 1], 2).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}

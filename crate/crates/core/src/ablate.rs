//! Ablation harness: modality subsets, fusion mechanisms and decision rules,
//! each trained under the same seed and budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, ModalSample};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionMethod};
use crate::model::{FeatureFusion, Model, ModelConfig};
use crate::preprocess::NUM_CLASSES;
use crate::train::{compute_metrics, confusion_matrix, evaluate, fit_learned_fusion, train, Evaluation, MetricsReport, Split, TrainConfig};

/// Which report sections to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub modalities: bool,
    pub mechanisms: bool,
    pub decisions: bool,
    /// Adam steps for the learned-fusion baseline.
    pub lf_steps: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            modalities: true,
            mechanisms: true,
            decisions: true,
            lf_steps: 200,
        }
    }
}

impl AblationPlan {
    pub fn parse(s: &str) -> Result<Self> {
        let mut plan = Self {
            modalities: false,
            mechanisms: false,
            decisions: false,
            ..Self::default()
        };
        for part in s.split(',').map(str::trim) {
            match part {
                "all" => plan = Self::default(),
                "modalities" => plan.modalities = true,
                "mechanisms" => plan.mechanisms = true,
                "decisions" => plan.decisions = true,
                other => return Err(Error::Config(format!("unknown ablation section `{other}`"))),
            }
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub modalities: Vec<Modality>,
    pub arpm: String,
    pub er: bool,
    pub params: usize,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub modality_rows: Vec<AblationRow>,
    pub mechanism_rows: Vec<AblationRow>,
    pub decision_rows: Vec<AblationRow>,
}

/// Modality subsets in the order wave, audio, image, then pairs, then all.
pub fn modality_subsets() -> Vec<Vec<Modality>> {
    use Modality::*;
    vec![
        vec![Wave],
        vec![Audio],
        vec![Image],
        vec![Audio, Wave],
        vec![Image, Wave],
        vec![Image, Audio],
        vec![Image, Audio, Wave],
    ]
}

fn subset_config(base: &ModelConfig, mods: &[Modality]) -> ModelConfig {
    let fusion = if mods.len() == 1 { FeatureFusion::None } else { FeatureFusion::Arpm };
    ModelConfig {
        modalities: mods.to_vec(),
        fusion,
        ..base.clone()
    }
}

fn mechanism_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    let all = Modality::ALL.to_vec();
    let mut out = vec![ModelConfig {
        modalities: all.clone(),
        fusion: FeatureFusion::Concat,
        ..base.clone()
    }];
    for m in Modality::ALL {
        out.push(ModelConfig {
            modalities: all.clone(),
            fusion: FeatureFusion::ArpmPrimary(m),
            ..base.clone()
        });
    }
    out.push(ModelConfig {
        modalities: all.clone(),
        fusion: FeatureFusion::None,
        ..base.clone()
    });
    out.push(ModelConfig {
        modalities: all,
        fusion: FeatureFusion::Arpm,
        ..base.clone()
    });
    out
}

fn names(mods: &[Modality]) -> String {
    mods.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
}

struct Trained {
    model: Model,
    best_epoch: usize,
    test: Evaluation,
}

fn row(label: String, t: &Trained) -> AblationRow {
    let cfg = &t.model.cfg;
    let arpm = match cfg.fusion {
        FeatureFusion::Arpm if cfg.modalities.len() > 1 => "all".to_string(),
        FeatureFusion::ArpmPrimary(m) => m.name().to_string(),
        _ => "none".to_string(),
    };
    AblationRow {
        label,
        modalities: cfg.modalities.clone(),
        arpm,
        er: cfg.uses_er(),
        params: t.model.num_params(),
        best_epoch: t.best_epoch,
        metrics: t.test.metrics.clone(),
    }
}

/// Runs the requested sections. Every configuration starts from the same
/// seed and training budget; the trimodal ARPM+ER model is trained once and
/// shared between sections.
pub fn run_ablation(
    data: &[ModalSample],
    split: &Split,
    base: &ModelConfig,
    tc: &TrainConfig,
    plan: AblationPlan,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    if split.test.is_empty() {
        return Err(Error::Empty("ablation needs a non-empty test subset".into()));
    }
    let mut cache: Vec<(ModelConfig, Trained)> = Vec::new();
    let mut fit = |cfg: ModelConfig, progress: &mut dyn FnMut(&str)| -> Result<usize> {
        if let Some(i) = cache.iter().position(|(c, _)| *c == cfg) {
            return Ok(i);
        }
        let desc = format!("{} / {:?}", names(&cfg.modalities), cfg.fusion);
        progress(&format!("training {desc}"));
        let mut model = Model::new(cfg.clone(), tc.seed)?;
        let summary = train(&mut model, data, split, tc, None, false, &mut |r| {
            progress(&format!("  epoch {} loss {:.4} val {:.2}%", r.epoch, r.train_loss, r.val_acc))
        })?;
        let test = evaluate(&model, data, &split.test)?;
        progress(&format!("  test accuracy {:.2}%", test.metrics.accuracy));
        cache.push((
            cfg,
            Trained {
                model,
                best_epoch: summary.best_epoch,
                test,
            },
        ));
        Ok(cache.len() - 1)
    };

    let mut report = AblationReport {
        seed: tc.seed,
        modality_rows: Vec::new(),
        mechanism_rows: Vec::new(),
        decision_rows: Vec::new(),
    };
    let mut rows = Vec::new();
    if plan.modalities {
        for mods in modality_subsets() {
            let i = fit(subset_config(base, &mods), progress)?;
            rows.push((0, names(&mods), i));
        }
    }
    if plan.mechanisms {
        for cfg in mechanism_configs(base) {
            let label = match cfg.fusion {
                FeatureFusion::Concat => "concat".to_string(),
                FeatureFusion::ArpmPrimary(m) => format!("arpm[{}]", m.name()),
                FeatureFusion::None => "er".to_string(),
                FeatureFusion::Arpm => "arpm+er".to_string(),
            };
            let i = fit(cfg, progress)?;
            rows.push((1, label, i));
        }
    }
    let full = if plan.decisions {
        Some(fit(subset_config(base, &Modality::ALL), progress)?)
    } else {
        None
    };
    for (section, label, i) in rows {
        let r = row(label, &cache[i].1);
        if section == 0 {
            report.modality_rows.push(r);
        } else {
            report.mechanism_rows.push(r);
        }
    }
    if let Some(i) = full {
        let t = &cache[i].1;
        let train_eval = evaluate(&t.model, data, &split.train)?;
        let train_evs: Vec<_> = train_eval.predictions.iter().map(|p| p.evidences.clone()).collect();
        let lf = fit_learned_fusion(&train_evs, &train_eval.labels, plan.lf_steps, 0.05, tc.seed)?;
        for method in FusionMethod::ALL {
            let mut decided = Vec::with_capacity(t.test.labels.len());
            for p in &t.test.predictions {
                let joint = match fusion::fuse(method, &p.evidences, Some(&lf)) {
                    Err(Error::DegenerateCombination { .. }) => fusion::prob_average(&p.evidences)?,
                    other => other?,
                };
                decided.push(fusion::decide(&joint));
            }
            let metrics = compute_metrics(&confusion_matrix(&t.test.labels, &decided, NUM_CLASSES))?;
            report.decision_rows.push(AblationRow {
                label: method.name().to_string(),
                metrics,
                ..row(method.name().to_string(), t)
            });
        }
    }
    Ok(report)
}

fn table(out: &mut String, title: &str, rows: &[AblationRow], mod_cols: bool) {
    let _ = writeln!(out, "{title}");
    let mut head = format!("{:<18}", "config");
    if mod_cols {
        for m in [Modality::Wave, Modality::Audio, Modality::Image] {
            let _ = write!(head, " {:>6}", m.name());
        }
    } else {
        let _ = write!(head, " {:>6} {:>3}", "arpm", "er");
    }
    let _ = write!(head, " {:>8} {:>9} {:>7} {:>7} {:>9}", "accuracy", "precision", "recall", "f1", "params_m");
    let _ = writeln!(out, "{head}");
    for r in rows {
        let mut line = format!("{:<18}", r.label);
        if mod_cols {
            for m in [Modality::Wave, Modality::Audio, Modality::Image] {
                let _ = write!(line, " {:>6}", if r.modalities.contains(&m) { "yes" } else { "no" });
            }
        } else {
            let _ = write!(line, " {:>6} {:>3}", r.arpm, if r.er { "yes" } else { "no" });
        }
        let m = &r.metrics;
        out.push_str(&line);
        let _ = writeln!(
            out,
            " {:>8.2} {:>9.2} {:>7.2} {:>7.2} {:>9.4}",
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            r.params as f64 / 1e6
        );
    }
    out.push('\n');
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("seed {}\n\n", self.seed);
        if !self.modality_rows.is_empty() {
            table(&mut out, "modality subsets", &self.modality_rows, true);
        }
        if !self.mechanism_rows.is_empty() {
            table(&mut out, "fusion mechanisms", &self.mechanism_rows, false);
        }
        if !self.decision_rows.is_empty() {
            table(&mut out, "decision fusion (trimodal arpm model)", &self.decision_rows, false);
        }
        out
    }

    pub fn find<'a>(rows: &'a [AblationRow], label: &str) -> Option<&'a AblationRow> {
        rows.iter().find(|r| r.label == label)
    }
}

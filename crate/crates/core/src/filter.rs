//! Three-stage pool filtering: label check, lowest-loss selection per class,
//! and average-loss balancing across classes. The stages always run in that
//! order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelCheckMode {
    /// Label-token likelihood under the base LM.
    LmLikelihood,
    /// Same rule with a separately trained classifier checkpoint.
    ExternalClassifier,
    Off,
}

impl std::str::FromStr for LabelCheckMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm-likelihood" => Ok(Self::LmLikelihood),
            "external-classifier" => Ok(Self::ExternalClassifier),
            "off" => Ok(Self::Off),
            _ => Err(Error::InvalidArgument(format!("unknown label check mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Budget per class.
    pub r: usize,
    pub mode: LabelCheckMode,
    /// Maximum gap between class average losses; `None` means 10% of the
    /// pool's median loss.
    pub tol: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            r: 20,
            mode: LabelCheckMode::LmLikelihood,
            tol: None,
        }
    }
}

/// The part of a candidate the filters look at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub index: usize,
    pub class: usize,
    pub loss: f64,
}

/// Class whose label token is most probable after `[bos] + ids`; ties go to
/// the lower class index.
pub fn predict_class(ids: &[usize], checker: &ModelParams, label_ids: &[usize]) -> Result<usize> {
    if label_ids.is_empty() {
        return Err(Error::InvalidArgument("no label tokens".into()));
    }
    let probs = checker.next_token_probs(ids)?;
    let mut best = 0;
    for (c, &id) in label_ids.iter().enumerate() {
        if probs[id] > probs[label_ids[best]] {
            best = c;
        }
    }
    Ok(best)
}

pub fn label_check(
    ids: &[usize],
    class: usize,
    checker: &ModelParams,
    label_ids: &[usize],
) -> Result<bool> {
    Ok(predict_class(ids, checker, label_ids)? == class)
}

/// Label-check verdicts for a whole pool, in pool order.
pub fn label_check_all(
    items: &[(Vec<usize>, usize)],
    checker: &ModelParams,
    label_ids: &[usize],
) -> Result<Vec<bool>> {
    items
        .par_iter()
        .map(|(ids, class)| label_check(ids, *class, checker, label_ids))
        .collect()
}

fn by_loss_then_index(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index))
}

/// Per class, the `r` smallest losses (ties to the lower index). Output keeps
/// input order.
pub fn select_lowest(pool: &[Scored], r: usize) -> Vec<Scored> {
    let mut keep = vec![false; pool.len()];
    let mut classes: Vec<usize> = pool.iter().map(|s| s.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut members: Vec<(usize, &Scored)> =
            pool.iter().enumerate().filter(|(_, s)| s.class == c).collect();
        members.sort_by(|a, b| by_loss_then_index(a.1, b.1));
        for (pos, _) in members.into_iter().take(r) {
            keep[pos] = true;
        }
    }
    pool.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| *s)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceOutcome {
    pub kept: Vec<Scored>,
    pub dropped: Vec<Scored>,
    /// Set when the gap is still above tolerance because the worst class is
    /// down to one member.
    pub warning: bool,
}

fn class_averages(pool: &[Scored]) -> Vec<(usize, f64, usize)> {
    let mut classes: Vec<usize> = pool.iter().map(|s| s.class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let (sum, n) = pool
                .iter()
                .filter(|s| s.class == c)
                .fold((0.0, 0), |(s, n), x| (s + x.loss, n + 1));
            (c, sum / n as f64, n)
        })
        .collect()
}

/// Repeatedly drops the highest-loss member of the class with the highest
/// average loss until the spread of class averages is within `tol`, or that
/// class has a single member left.
pub fn balance_classes(pool: &[Scored], tol: f64) -> BalanceOutcome {
    let mut kept = pool.to_vec();
    let mut dropped = Vec::new();
    loop {
        let avgs = class_averages(&kept);
        if avgs.len() < 2 {
            return BalanceOutcome {
                kept,
                dropped,
                warning: false,
            };
        }
        let hi = avgs
            .iter()
            .copied()
            .fold(avgs[0], |b, a| if a.1 > b.1 { a } else { b });
        let lo = avgs.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        if hi.1 - lo <= tol {
            return BalanceOutcome {
                kept,
                dropped,
                warning: false,
            };
        }
        if hi.2 <= 1 {
            return BalanceOutcome {
                kept,
                dropped,
                warning: true,
            };
        }
        let worst = kept
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class == hi.0)
            .max_by(|a, b| by_loss_then_index(a.1, b.1))
            .map(|(i, _)| i)
            .expect("class has members");
        dropped.push(kept.remove(worst));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub class: usize,
    pub generated: usize,
    pub after_label_check: usize,
    pub after_select: usize,
    pub after_balance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedEntry {
    pub index: usize,
    pub class: usize,
    pub loss: f64,
    pub stage: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub mode: LabelCheckMode,
    pub r: usize,
    pub tol: f64,
    pub counts: Vec<StageCounts>,
    pub dropped: Vec<DroppedEntry>,
    /// Classes for which the label check would have removed every candidate
    /// and was therefore skipped.
    pub label_check_skipped: Vec<usize>,
    pub balance_warning: bool,
    pub final_class_avg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    /// Pool indices that survive, in input order.
    pub kept: Vec<usize>,
    pub report: FilterReport,
}

/// Runs label check → select lowest → balance. `label_ok[i]` is the verdict
/// for `pool[i]` (ignored when the mode is off).
pub fn run_pipeline(
    pool: &[Scored],
    label_ok: Option<&[bool]>,
    n_classes: usize,
    cfg: &FilterConfig,
) -> Result<FilterOutcome> {
    if cfg.r == 0 {
        return Err(Error::InvalidArgument("budget r must be at least 1".into()));
    }
    if let Some(t) = cfg.tol {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {t}")));
        }
    }
    if pool.iter().any(|s| s.class >= n_classes) {
        return Err(Error::InvalidArgument("candidate class out of range".into()));
    }
    let tol = cfg.tol.unwrap_or_else(|| {
        let mut losses: Vec<f64> = pool.iter().map(|s| s.loss).collect();
        0.1 * crate::admm::median(&mut losses)
    });
    let count = |p: &[Scored], c: usize| p.iter().filter(|s| s.class == c).count();
    let mut dropped = Vec::new();

    let mut skipped = Vec::new();
    let stage1: Vec<Scored> = match (cfg.mode, label_ok) {
        (LabelCheckMode::Off, _) => pool.to_vec(),
        (_, None) => {
            return Err(Error::InvalidArgument("label check verdicts missing".into()));
        }
        (_, Some(ok)) => {
            if ok.len() != pool.len() {
                return Err(Error::shape("label_check", &[ok.len()], &[pool.len()]));
            }
            for c in 0..n_classes {
                let members = pool.iter().zip(ok).filter(|(s, _)| s.class == c);
                let (total, passing) = members.fold((0, 0), |(t, p), (_, &k)| (t + 1, p + k as usize));
                if total > 0 && passing == 0 {
                    skipped.push(c);
                }
            }
            let mut out = Vec::new();
            for (s, &k) in pool.iter().zip(ok) {
                if k || skipped.contains(&s.class) {
                    out.push(*s);
                } else {
                    dropped.push(DroppedEntry {
                        index: s.index,
                        class: s.class,
                        loss: s.loss,
                        stage: "label_check".into(),
                        reason: "predicted label differs".into(),
                    });
                }
            }
            out
        }
    };

    let stage2 = select_lowest(&stage1, cfg.r);
    for s in &stage1 {
        if !stage2.iter().any(|k| k.index == s.index) {
            dropped.push(DroppedEntry {
                index: s.index,
                class: s.class,
                loss: s.loss,
                stage: "select_lowest".into(),
                reason: format!("not among the {} lowest losses", cfg.r),
            });
        }
    }

    let bal = balance_classes(&stage2, tol);
    for s in &bal.dropped {
        dropped.push(DroppedEntry {
            index: s.index,
            class: s.class,
            loss: s.loss,
            stage: "balance".into(),
            reason: "highest loss in the class with the highest average".into(),
        });
    }

    let counts = (0..n_classes)
        .map(|c| StageCounts {
            class: c,
            generated: count(pool, c),
            after_label_check: count(&stage1, c),
            after_select: count(&stage2, c),
            after_balance: count(&bal.kept, c),
        })
        .collect();
    let final_class_avg = (0..n_classes)
        .map(|c| {
            let v: Vec<f64> = bal.kept.iter().filter(|s| s.class == c).map(|s| s.loss).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    Ok(FilterOutcome {
        kept: bal.kept.iter().map(|s| s.index).collect(),
        report: FilterReport {
            mode: cfg.mode,
            r: cfg.r,
            tol,
            counts,
            dropped,
            label_check_skipped: skipped,
            balance_warning: bal.warning,
            final_class_avg,
        },
    })
}

//! Evaluation: label accuracy, embedding-distribution distance (FID),
//! nearest-real distances and loss-threshold membership inference.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::predict_class;
use crate::lm::model::{ModelParams, TokenSequence};
use crate::rng::SeedStream;

/// Ridge added to both covariances before the matrix square root.
pub const FID_RIDGE: f64 = 1e-6;

/// Fraction of `test` whose most probable label token is the gold one.
pub fn accuracy(params: &ModelParams, test: &[TokenSequence], label_ids: &[usize]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let correct: Vec<bool> = test
        .par_iter()
        .map(|s| {
            let gold = s.label.ok_or_else(|| Error::Data("unlabelled test example".into()))?;
            Ok(predict_class(&s.prompt, params, label_ids)? == gold)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / test.len() as f64)
}

/// Mean of the final hidden states over the text positions of `ids` (the
/// `<bos>` state alone for empty text).
pub fn embedding(params: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
    let h = params.hidden_states(ids)?;
    let d = h.cols();
    let rows: Vec<usize> = if ids.is_empty() { vec![0] } else { (1..h.rows()).collect() };
    let mut out = vec![0.0; d];
    for &r in &rows {
        crate::autodiff::axpy(1.0, h.row(r), &mut out);
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub fn embed_all(params: &ModelParams, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    seqs.par_iter().map(|ids| embedding(params, ids)).collect()
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("FID needs at least two vectors per set".into()));
    }
    let d = x[0].len();
    if x.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidArgument("embedding dimensions differ".into()));
    }
    let n = x.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in x {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn checked_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    if let Some(&bad) = e.eigenvalues.iter().find(|&&l| l < -1e-8) {
        return Err(Error::NonFinite(format!(
            "covariance product has negative eigenvalue {bad:e}"
        )));
    }
    Ok(e)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = checked_eigen(m)?;
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// `‖μp − μq‖² + Tr(Σp + Σq − 2(Σp^½ Σq Σp^½)^½)` with a `1e-6·I` ridge on
/// both covariances.
pub fn fid(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let (mp, cp) = mean_cov(p)?;
    let (mq, cq) = mean_cov(q)?;
    if mp.len() != mq.len() {
        return Err(Error::InvalidArgument("embedding dimensions differ".into()));
    }
    let d = mp.len();
    let ridge = DMatrix::identity(d, d) * FID_RIDGE;
    let cp = cp + &ridge;
    let cq = cq + &ridge;
    let sp = psd_sqrt(cp.clone())?;
    let inner = checked_eigen(&sp * &cq * &sp)?;
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&mp - &mq).norm_squared();
    Ok((diff + cp.trace() + cq.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Distance from each synthetic vector to its closest real vector.
pub fn nearest_real_distances(syn: &[Vec<f64>], real: &[Vec<f64>]) -> Result<Vec<f64>> {
    if syn.is_empty() || real.is_empty() {
        return Err(Error::InvalidArgument("empty embedding set".into()));
    }
    Ok(syn
        .par_iter()
        .map(|s| {
            real.iter()
                .map(|r| {
                    s.iter()
                        .zip(r)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Equal-width histogram over `[min, max]` of `values`: `(bin_left, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c))
        .collect()
}

/// `2·(balanced accuracy − ½)` of "loss < threshold ⇒ member".
fn advantage(members: &[f64], nonmembers: &[f64], thr: f64) -> f64 {
    let tpr = members.iter().filter(|&&l| l < thr).count() as f64 / members.len() as f64;
    let tnr = nonmembers.iter().filter(|&&l| l >= thr).count() as f64 / nonmembers.len() as f64;
    2.0 * (0.5 * (tpr + tnr) - 0.5)
}

/// Picks the threshold maximizing the advantage on the calibration losses
/// (candidates: every calibration loss and +∞; ties to the smaller
/// threshold) and reports the advantage on the test losses.
pub fn mia_advantage_split(
    cal_members: &[f64],
    cal_nonmembers: &[f64],
    test_members: &[f64],
    test_nonmembers: &[f64],
) -> Result<f64> {
    if [cal_members, cal_nonmembers, test_members, test_nonmembers]
        .iter()
        .any(|s| s.is_empty())
    {
        return Err(Error::InvalidArgument("membership inference needs N >= 1 per group".into()));
    }
    let mut cands: Vec<f64> = cal_members.iter().chain(cal_nonmembers).copied().collect();
    cands.push(f64::INFINITY);
    cands.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &t in &cands {
        let a = advantage(cal_members, cal_nonmembers, t);
        if a > best.0 {
            best = (a, t);
        }
    }
    Ok(advantage(test_members, test_nonmembers, best.1))
}

/// Randomly halves members and non-members into calibration and test parts
/// and runs [`mia_advantage_split`].
pub fn mia_advantage(members: &[f64], nonmembers: &[f64], seed: SeedStream) -> Result<f64> {
    if members.len() < 2 || nonmembers.len() < 2 {
        return Err(Error::InvalidArgument("membership inference needs at least two losses per group".into()));
    }
    let mut rng = seed.rng();
    let mut m = members.to_vec();
    let mut n = nonmembers.to_vec();
    m.shuffle(&mut rng);
    n.shuffle(&mut rng);
    let (mc, mt) = m.split_at(m.len() / 2);
    let (nc, nt) = n.split_at(n.len() / 2);
    mia_advantage_split(mc, nc, mt, nt)
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(metric: &str, split: &str, value: f64, seed: u64) -> Self {
        Self {
            metric: metric.into(),
            split: split.into(),
            value,
            seed,
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,split,value,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.metric, r.split, r.value, r.seed));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(path: &Path, hist: &[(f64, usize)]) -> Result<()> {
    let mut s = String::from("bin_left,count\n");
    for (left, count) in hist {
        s.push_str(&format!("{left},{count}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn fid_self_is_zero_and_shift_is_squared_norm() {
        let p: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert!(fid(&p, &p).unwrap() <= 1e-6);
        let q: Vec<Vec<f64>> = p.iter().map(|v| vec![v[0] + 3.0, v[1] - 4.0]).collect();
        assert!((fid(&p, &q).unwrap() - 25.0).abs() < 1e-6);
        assert!(fid(&p[..1], &q).is_err());
    }

    #[test]
    fn distances_examples() {
        let real = vec![vec![0.0, 0.0]];
        assert_eq!(nearest_real_distances(&[vec![3.0, 4.0]], &real).unwrap(), vec![5.0]);
        assert_eq!(nearest_real_distances(&real, &real).unwrap(), vec![0.0]);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2);
        assert_eq!(h, vec![(0.0, 1), (0.5, 3)]);
        assert_eq!(histogram(&[2.0, 2.0], 3)[0], (2.0, 2));
    }

    #[test]
    fn separated_losses_give_full_advantage() {
        let m = [0.1, 0.2, 0.15];
        let n = [0.9, 0.8, 0.85];
        assert_eq!(mia_advantage_split(&m, &n, &m, &n).unwrap(), 1.0);
        let swapped = mia_advantage_split(&n, &m, &m, &n).unwrap();
        assert!((-1.0..=1.0).contains(&swapped));
        assert!(mia_advantage_split(&[], &n, &m, &n).is_err());
    }

    #[test]
    fn constant_predictor_scores_half() {
        let cfg = ModelConfig {
            layers: 1,
            dim: 4,
            heads: 1,
            n_max: 8,
            vocab_size: 8,
            ..ModelConfig::default()
        };
        let p = ModelParams::uniform(cfg, SeedStream::new(0)).unwrap();
        let test = vec![
            TokenSequence::new(vec![6], vec![4], Some(0)),
            TokenSequence::new(vec![7], vec![5], Some(1)),
        ];
        assert_eq!(accuracy(&p, &test, &[4, 5]).unwrap(), 0.5);
        assert!(accuracy(&p, &[], &[4, 5]).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = [MetricRow::new("accuracy", "test", 0.75, 3)];
        assert_eq!(metrics_csv(&rows), "metric,split,value,seed\naccuracy,test,0.75,3\n");
    }
}

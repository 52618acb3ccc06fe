//! AUC, RIG and log-loss, with per-segment breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Predictions are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` before taking logs.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric undefined: labels contain a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} scores, {1} labels")]
    Length(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricError::NonFinite(i));
    }
    Ok(())
}

/// Cross-entropy with the prediction clamped away from 0 and 1.
#[inline]
pub fn clamped_cross_entropy(pred: f64, label: bool) -> f64 {
    let p = pred.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary entropy in nats.
pub fn entropy(rate: f64) -> f64 {
    if rate <= 0.0 || rate >= 1.0 {
        return 0.0;
    }
    -rate * rate.ln() - (1.0 - rate) * (1.0 - rate).ln()
}

/// Area under the ROC curve from average ranks (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j) as u128;
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean clamped cross-entropy.
pub fn mean_log_loss(preds: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(&p, &l)| clamped_cross_entropy(p, l)).sum::<f64>() / preds.len() as f64)
}

/// Relative information gain `1 - CE / H(r)` with `r` the positive rate of
/// the evaluated labels.
pub fn rig(preds: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let ce = mean_log_loss(preds, labels)?;
    let r = labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64;
    if r == 0.0 || r == 1.0 {
        return Err(MetricError::SingleClass);
    }
    Ok(1.0 - ce / entropy(r))
}

/// Metrics over one evaluated set. `auc` and `rig` are `None` when the set
/// holds a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub rig: Option<f64>,
    pub mean_log_loss: f64,
    pub n_samples: usize,
    pub n_positives: usize,
    pub base_rate: f64,
    pub segments: BTreeMap<String, EvalReport>,
}

impl EvalReport {
    fn compute(preds: &[f64], labels: &[bool]) -> Result<Self, MetricError> {
        let mean_log_loss = mean_log_loss(preds, labels)?;
        let n_positives = labels.iter().filter(|&&l| l).count();
        let base_rate = n_positives as f64 / labels.len() as f64;
        let defined = n_positives > 0 && n_positives < labels.len();
        Ok(Self {
            auc: if defined { Some(auc(preds, labels)?) } else { None },
            rig: if defined {
                Some(1.0 - mean_log_loss / entropy(base_rate))
            } else {
                None
            },
            mean_log_loss,
            n_samples: labels.len(),
            n_positives,
            base_rate,
            segments: BTreeMap::new(),
        })
    }

    /// `(segment, metric, value)` rows, overall first under segment `all`.
    pub fn rows(&self) -> Vec<(String, &'static str, String)> {
        let mut out = Vec::new();
        self.push_rows("all", &mut out);
        for (name, seg) in &self.segments {
            seg.push_rows(name, &mut out);
        }
        out
    }

    fn push_rows(&self, segment: &str, out: &mut Vec<(String, &'static str, String)>) {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        for (metric, value) in [
            ("auc", opt(self.auc)),
            ("rig", opt(self.rig)),
            ("log_loss", format!("{:.6}", self.mean_log_loss)),
            ("n_samples", self.n_samples.to_string()),
            ("n_positives", self.n_positives.to_string()),
            ("base_rate", format!("{:.6}", self.base_rate)),
        ] {
            out.push((segment.to_string(), metric, value));
        }
    }

    /// Comma-separated table with header `segment,metric,value`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("segment,metric,value\n");
        for (seg, metric, value) in self.rows() {
            let _ = writeln!(s, "{seg},{metric},{value}");
        }
        s
    }
}

/// Overall metrics plus one sub-report per distinct segment label.
pub fn evaluate<S: AsRef<str>>(preds: &[f64], labels: &[bool], segments: Option<&[S]>) -> Result<EvalReport, MetricError> {
    let mut report = EvalReport::compute(preds, labels)?;
    if let Some(segs) = segments {
        if segs.len() != labels.len() {
            return Err(MetricError::Length(segs.len(), labels.len()));
        }
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for ((p, l), s) in preds.iter().zip(labels).zip(segs) {
            let g = groups.entry(s.as_ref()).or_default();
            g.0.push(*p);
            g.1.push(*l);
        }
        for (name, (p, l)) in groups {
            report.segments.insert(name.to_string(), EvalReport::compute(&p, &l)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn random_case(rng: &mut Rng, n: usize, levels: u64) -> (Vec<f64>, Vec<bool>) {
        let mut labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores = (0..n)
            .map(|_| if levels > 0 { rng.below(levels as usize) as f64 / levels as f64 } else { rng.uniform() })
            .collect();
        (scores, labels)
    }

    #[test]
    fn auc_examples() {
        let labels = [true, false, true, false, false];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &labels).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass));
        assert_eq!(auc(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = Rng::new(31);
        for case in 0..20 {
            let levels = [0, 3, 10, 1000][case % 4];
            let (s, l) = random_case(&mut rng, 2000, levels);
            assert!((auc(&s, &l).unwrap() - pair_count_auc(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_examples() {
        let labels = [true, false, true, false];
        assert!(rig(&[0.5; 4], &labels).unwrap().abs() < 1e-12);
        let clamped: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        assert!(rig(&clamped, &labels).unwrap() > 0.999);
        // 1 - (ln(1/0.8) + ln(1/0.6)) / (2 ln 2), evaluated at 50 digits
        let v = rig(&[0.8, 0.2, 0.6, 0.4], &labels).unwrap();
        assert!((v - 0.470_553_155_473_215_7).abs() < 1e-12, "{v}");
        assert_eq!(rig(&[0.5], &[true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn rig_base_rate_predictor_is_zero() {
        let mut rng = Rng::new(8);
        let (_, l) = random_case(&mut rng, 777, 0);
        let r = l.iter().filter(|&&x| x).count() as f64 / l.len() as f64;
        assert!(rig(&vec![r; l.len()], &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rig_increases_along_mixture_path() {
        let mut rng = Rng::new(9);
        let (_, l) = random_case(&mut rng, 500, 0);
        let r = l.iter().filter(|&&x| x).count() as f64 / l.len() as f64;
        let mut last = f64::NEG_INFINITY;
        for g in [0.0, 0.25, 0.5, 0.75] {
            let p: Vec<f64> = l.iter().map(|&y| (1.0 - g) * r + g * if y { 1.0 } else { 0.0 }).collect();
            let v = rig(&p, &l).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn evaluate_segments() {
        let mut rng = Rng::new(10);
        let (s, l) = random_case(&mut rng, 600, 0);
        let one = vec!["x"; s.len()];
        let rep = evaluate(&s, &l, Some(&one)).unwrap();
        let seg = &rep.segments["x"];
        assert_eq!((seg.auc, seg.rig, seg.mean_log_loss), (rep.auc, rep.rig, rep.mean_log_loss));

        let two: Vec<&str> = (0..s.len()).map(|i| if i % 3 == 0 { "a" } else { "b" }).collect();
        let rep = evaluate(&s, &l, Some(&two)).unwrap();
        for name in ["a", "b"] {
            let (ps, ls): (Vec<f64>, Vec<bool>) = s
                .iter()
                .zip(&l)
                .zip(&two)
                .filter(|(_, &t)| t == name)
                .map(|((p, y), _)| (*p, *y))
                .unzip();
            let direct = evaluate::<&str>(&ps, &ls, None).unwrap();
            assert_eq!(rep.segments[name], direct);
        }
        let weighted: f64 = rep
            .segments
            .values()
            .map(|r| r.mean_log_loss * r.n_samples as f64)
            .sum::<f64>()
            / rep.n_samples as f64;
        assert!((weighted - rep.mean_log_loss).abs() < 1e-12);
    }

    #[test]
    fn single_class_segment_is_flagged() {
        let rep = evaluate(&[0.2, 0.7, 0.4], &[false, true, false], Some(&["a", "b", "a"])).unwrap();
        assert!(rep.auc.is_some());
        assert_eq!(rep.segments["b"].auc, None);
        assert_eq!(rep.segments["b"].rig, None);
        assert!(rep.to_table().contains("b,auc,undefined"));
        assert!(rep.to_table().starts_with("segment,metric,value\nall,auc,"));
        assert_eq!(evaluate::<&str>(&[], &[], None), Err(MetricError::Empty));
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transforms(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let (s, l) = random_case(&mut rng, 200, 7);
            let base = auc(&s, &l).unwrap();
            let exp: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let aff: Vec<f64> = s.iter().map(|x| a * x + b).collect();
            prop_assert!((auc(&exp, &l).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&aff, &l).unwrap() - base).abs() < 1e-12);
            prop_assert!((base - pair_count_auc(&s, &l)).abs() < 1e-12);
        }
    }
}

//! Segmentation metrics: accuracy, Cohen's kappa, ROC/AUC and the
//! maximum-average-accuracy threshold sweep, plus their CSV forms.
//!
//! Unless asked otherwise only field-of-view pixels are scored.

use crate::data::FundusSample;
use crate::ensemble::ProbabilityMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Undefined(
                "accuracy of an empty confusion matrix".into(),
            ));
        }
        Ok((self.tp + self.tn) as f64 / self.total() as f64)
    }

    /// `(p_o − p_e) / (1 − p_e)`, evaluated as an exact integer ratio so
    /// that hand-computable cases come out exactly.
    pub fn kappa(&self) -> Result<f64> {
        let (tp, tn, fp, fn_) = (
            self.tp as i128,
            self.tn as i128,
            self.fp as i128,
            self.fn_ as i128,
        );
        let n = tp + tn + fp + fn_;
        if n == 0 {
            return Err(Error::Undefined(
                "kappa of an empty confusion matrix".into(),
            ));
        }
        let chance = (tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp);
        let denom = n * n - chance;
        if denom == 0 {
            return Err(Error::Undefined(
                "kappa: expected agreement is 1 (single class in prediction and truth)".into(),
            ));
        }
        Ok((n * (tp + tn) - chance) as f64 / denom as f64)
    }
}

/// Counts over pixels where `fov` is set (all pixels when `fov` is
/// `None`). Maps are 0/1 per pixel.
pub fn confusion(pred: &[u8], truth: &[u8], fov: Option<&[u8]>) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() || fov.is_some_and(|f| f.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "confusion maps differ in size: pred {}, truth {}, fov {:?}",
            pred.len(),
            truth.len(),
            fov.map(<[u8]>::len)
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if fov.is_some_and(|f| f[i] == 0) {
            continue;
        }
        match (p != 0, t != 0) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Scores and labels of the evaluated pixels of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImage {
    pub id: u32,
    pub scores: Vec<f32>,
    pub labels: Vec<u8>,
}

impl ScoredImage {
    pub fn new(id: u32, scores: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(ScoredImage { id, scores, labels })
    }

    /// Pairs a prediction with its ground truth, keeping FOV pixels only
    /// unless `include_exterior`.
    pub fn from_map(
        map: &ProbabilityMap,
        sample: &FundusSample,
        include_exterior: bool,
    ) -> Result<Self> {
        if (map.width(), map.height()) != (sample.width(), sample.height()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} for image {} of {}x{}",
                map.width(),
                map.height(),
                sample.id(),
                sample.width(),
                sample.height()
            )));
        }
        let (scores, labels) = map
            .values()
            .iter()
            .zip(sample.truth())
            .zip(sample.fov())
            .filter(|(_, &f)| include_exterior || f == 1)
            .map(|((&p, &t), _)| (p, t))
            .unzip();
        Self::new(sample.id(), scores, labels)
    }

    /// Confusion counts when predicting vessel for `score >= threshold`.
    pub fn confusion_at(&self, threshold: f64) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            match (s as f64 >= threshold, l != 0) {
                (true, true) => cm.tp += 1,
                (false, false) => cm.tn += 1,
                (true, false) => cm.fp += 1,
                (false, true) => cm.fn_ += 1,
            }
        }
        cm
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Vessel is predicted for `score >= threshold`; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Above this many distinct scores the curve is sampled at
/// [`ROC_SAMPLED_THRESHOLDS`] evenly spaced thresholds.
pub const ROC_MAX_DISTINCT: usize = 1_000_000;
pub const ROC_SAMPLED_THRESHOLDS: usize = 1001;

/// ROC of pooled pixels across all images.
pub fn roc(images: &[ScoredImage]) -> Result<RocCurve> {
    let scores: Vec<f64> = images
        .iter()
        .flat_map(|im| im.scores.iter().map(|&s| s as f64))
        .collect();
    let labels: Vec<u8> = images
        .iter()
        .flat_map(|im| im.labels.iter().copied())
        .collect();
    roc_scores(&scores, &labels)
}

/// ROC over every distinct score (descending), from (0,0) at +∞ to (1,1)
/// at the smallest score; AUC by the trapezoid rule.
pub fn roc_scores(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("ROC scores contain NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined(
            "ROC needs both vessel and background pixels".into(),
        ));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s, l != 0))
        .collect();
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let distinct = 1 + pairs.windows(2).filter(|w| w[0].0 != w[1].0).count();
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    let mut advance_to = |t: f64, tp: &mut usize, fp: &mut usize| {
        while i < pairs.len() && pairs[i].0 >= t {
            if pairs[i].1 {
                *tp += 1;
            } else {
                *fp += 1;
            }
            i += 1;
        }
    };
    if distinct <= ROC_MAX_DISTINCT {
        let thresholds: Vec<f64> = {
            let mut t: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            t.dedup();
            t
        };
        for t in thresholds {
            advance_to(t, &mut tp, &mut fp);
            points.push(RocPoint {
                threshold: t,
                fpr: fp as f64 / n,
                tpr: tp as f64 / p,
            });
        }
    } else {
        let (hi, lo) = (pairs[0].0, pairs[pairs.len() - 1].0);
        let steps = (ROC_SAMPLED_THRESHOLDS - 1) as f64;
        for k in 0..ROC_SAMPLED_THRESHOLDS {
            let t = if k + 1 == ROC_SAMPLED_THRESHOLDS {
                lo
            } else {
                hi - (hi - lo) * k as f64 / steps
            };
            advance_to(t, &mut tp, &mut fp);
            points.push(RocPoint {
                threshold: t,
                fpr: fp as f64 / n,
                tpr: tp as f64 / p,
            });
        }
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Number of sweep thresholds, `k/255` for `k = 0..=255`.
pub const SWEEP_LEVELS: usize = 256;

/// Outcome of the threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub threshold: f64,
    /// Mean over images of per-image accuracy at `threshold` (the maximised
    /// quantity).
    pub mean_accuracy: f64,
    /// Kappa of the pooled counts at `threshold`.
    pub kappa: std::result::Result<f64, String>,
    pub pooled_accuracy: f64,
    /// Mean of the per-image kappas that are defined at `threshold`.
    pub mean_image_kappa: Option<f64>,
    pub per_image: Vec<(u32, f64)>,
}

/// Largest `k` with `score >= k/255`, or `None` below every level.
fn level_of(score: f32) -> Option<usize> {
    let s = score as f64;
    if s.is_nan() || s < 0.0 {
        return None;
    }
    let mut k = ((s * 255.0).floor() as usize).min(SWEEP_LEVELS - 1);
    while k > 0 && (k as f64 / 255.0) > s {
        k -= 1;
    }
    while k + 1 < SWEEP_LEVELS && ((k + 1) as f64 / 255.0) <= s {
        k += 1;
    }
    Some(k)
}

/// Per-level confusion counts of one image, for all 256 thresholds at once.
fn sweep_counts(image: &ScoredImage) -> Vec<ConfusionMatrix> {
    let mut hist = [[0u64; SWEEP_LEVELS]; 2];
    let mut below = [0u64; 2];
    for (&s, &l) in image.scores.iter().zip(&image.labels) {
        let class = usize::from(l != 0);
        match level_of(s) {
            Some(k) => hist[class][k] += 1,
            None => below[class] += 1,
        }
    }
    let totals = [
        below[0] + hist[0].iter().sum::<u64>(),
        below[1] + hist[1].iter().sum::<u64>(),
    ];
    // at level k, positives predicted = pixels with level >= k
    let mut at_or_above = [0u64; 2];
    let mut out = vec![ConfusionMatrix::default(); SWEEP_LEVELS];
    for k in (0..SWEEP_LEVELS).rev() {
        at_or_above[0] += hist[0][k];
        at_or_above[1] += hist[1][k];
        out[k] = ConfusionMatrix {
            tp: at_or_above[1],
            fn_: totals[1] - at_or_above[1],
            fp: at_or_above[0],
            tn: totals[0] - at_or_above[0],
        };
    }
    out
}

/// Maximises the image-averaged accuracy over thresholds `k/255`; the
/// smallest threshold wins ties.
pub fn max_avg_accuracy(images: &[ScoredImage]) -> Result<SweepResult> {
    if images.is_empty() {
        return Err(Error::Undefined("no images to evaluate".into()));
    }
    let labels = images.iter().flat_map(|im| &im.labels);
    let positives = labels.clone().filter(|&&l| l != 0).count();
    if positives == 0 || positives == labels.count() {
        return Err(Error::Undefined("ground truth has a single class".into()));
    }
    let counts: Vec<Vec<ConfusionMatrix>> = images.iter().map(sweep_counts).collect();
    let mean_at = |k: usize| -> Result<f64> {
        let mut sum = 0.0;
        for c in &counts {
            sum += c[k].accuracy()?;
        }
        Ok(sum / images.len() as f64)
    };
    let mut best = (0, mean_at(0)?);
    for k in 1..SWEEP_LEVELS {
        let acc = mean_at(k)?;
        if acc > best.1 {
            best = (k, acc);
        }
    }
    let (k, mean_accuracy) = best;
    let pooled = counts
        .iter()
        .fold(ConfusionMatrix::default(), |acc, c| acc.add(&c[k]));
    let image_kappas: Vec<f64> = counts.iter().filter_map(|c| c[k].kappa().ok()).collect();
    Ok(SweepResult {
        threshold: k as f64 / 255.0,
        mean_accuracy,
        kappa: pooled.kappa().map_err(|e| e.to_string()),
        pooled_accuracy: pooled.accuracy()?,
        mean_image_kappa: (!image_kappas.is_empty())
            .then(|| image_kappas.iter().sum::<f64>() / image_kappas.len() as f64),
        per_image: images
            .iter()
            .zip(&counts)
            .map(|(im, c)| Ok((im.id, c[k].accuracy()?)))
            .collect::<Result<_>>()?,
    })
}

/// The evaluation report as written to and read from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub per_image: Vec<(u32, f64)>,
    pub max_avg_accuracy: f64,
    /// `None` when kappa is undefined.
    pub kappa: Option<f64>,
    pub auc: f64,
    pub threshold: f64,
    pub pooled_accuracy: f64,
    pub mean_image_kappa: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl Report {
    pub fn new(sweep: &SweepResult, roc: &RocCurve) -> Self {
        Report {
            per_image: sweep.per_image.clone(),
            max_avg_accuracy: sweep.mean_accuracy,
            kappa: sweep.kappa.as_ref().ok().copied(),
            auc: roc.auc,
            threshold: sweep.threshold,
            pooled_accuracy: sweep.pooled_accuracy,
            mean_image_kappa: sweep.mean_image_kappa,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,accuracy\n");
        for (id, acc) in &self.per_image {
            s += &format!("{id:02},{acc:.6}\n");
        }
        s += &format!("max_avg_accuracy,{:.6}\n", self.max_avg_accuracy);
        s += &format!("kappa,{}\n", fmt_opt(self.kappa));
        s += &format!("auc,{:.6}\n", self.auc);
        s += &format!("threshold,{:.6}\n", self.threshold);
        s += &format!("pooled_accuracy,{:.6}\n", self.pooled_accuracy);
        s += &format!("mean_image_kappa,{}\n", fmt_opt(self.mean_image_kappa));
        s
    }

    pub fn summary_line(&self) -> String {
        format!(
            "max_avg_accuracy={:.6} kappa={} auc={:.6}",
            self.max_avg_accuracy,
            fmt_opt(self.kappa),
            self.auc
        )
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("report line {line}: {what}"));
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some("image_id,accuracy") {
            return Err(bad(1, "expected header `image_id,accuracy`"));
        }
        let mut per_image = Vec::new();
        let mut summary: Vec<(String, Option<f64>)> = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(',')
                .ok_or_else(|| bad(i + 1, "expected two columns"))?;
            let value = match value {
                "undefined" => None,
                v => Some(v.parse::<f64>().map_err(|_| bad(i + 1, "invalid number"))?),
            };
            match key.parse::<u32>() {
                Ok(id) if summary.is_empty() => {
                    per_image.push((id, value.ok_or_else(|| bad(i + 1, "undefined accuracy"))?))
                }
                _ => summary.push((key.to_string(), value)),
            }
        }
        let get = |key: &str| -> Result<Option<f64>> {
            summary
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Data(format!("report lacks `{key}`")))
        };
        let required = |key: &str| {
            get(key)?.ok_or_else(|| Error::Data(format!("report `{key}` is undefined")))
        };
        Ok(Report {
            per_image,
            max_avg_accuracy: required("max_avg_accuracy")?,
            kappa: get("kappa")?,
            auc: required("auc")?,
            threshold: required("threshold")?,
            pooled_accuracy: required("pooled_accuracy")?,
            mean_image_kappa: get("mean_image_kappa")?,
        })
    }
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            s += &format!("{},{},{}\n", p.threshold, p.fpr, p.tpr);
        }
        s += &format!("# auc={}\n", self.auc);
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("ROC line {line}: {what}"));
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim()) != Some("threshold,fpr,tpr") {
            return Err(bad(1, "expected header `threshold,fpr,tpr`"));
        }
        let mut points = Vec::new();
        let mut auc = None;
        for (i, line) in lines {
            if let Some(v) = line.trim().strip_prefix("# auc=") {
                auc = Some(v.parse().map_err(|_| bad(i + 1, "invalid auc"))?);
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i + 1, "invalid number"))?;
            let [threshold, fpr, tpr] = cols[..] else {
                return Err(bad(i + 1, "expected three columns"));
            };
            points.push(RocPoint {
                threshold,
                fpr,
                tpr,
            });
        }
        Ok(RocCurve {
            points,
            auc: auc.ok_or_else(|| Error::Data("ROC file lacks `# auc=` line".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn cm(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionMatrix {
        ConfusionMatrix { tp, tn, fp, fn_ }
    }

    /// Fraction of (positive, negative) pairs ordered correctly, ties 1/2.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    fn random_instance(rng: &mut Rng, n: usize, levels: u64) -> (Vec<f64>, Vec<u8>) {
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.3) as u8).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let scores = labels
            .iter()
            .map(|&l| (rng.below(levels) as f64 + 2.0 * l as f64) / levels as f64)
            .collect();
        (scores, labels)
    }

    #[test]
    fn hand_computed_accuracy_and_kappa() {
        let c = cm(40, 40, 10, 10);
        assert_eq!(c.accuracy().unwrap(), 0.8);
        assert_eq!(c.kappa().unwrap(), 0.6);
        assert_eq!(cm(30, 70, 0, 0).kappa().unwrap(), 1.0);
    }

    #[test]
    fn kappa_undefined_for_single_class() {
        assert!(matches!(cm(0, 10, 0, 0).kappa(), Err(Error::Undefined(_))));
        assert!(ConfusionMatrix::default().accuracy().is_err());
    }

    #[test]
    fn constant_predictor_has_zero_kappa() {
        assert_eq!(cm(0, 80, 0, 20).kappa().unwrap(), 0.0);
        assert_eq!(cm(20, 0, 80, 0).kappa().unwrap(), 0.0);
    }

    #[test]
    fn confusion_contracts() {
        let truth = [1, 0, 1, 0, 1];
        let fov = [1, 1, 1, 1, 0];
        let c = confusion(&truth, &truth, Some(&fov)).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp, c.tn), (0, 0, 2, 2));
        let inverted: Vec<u8> = truth.iter().map(|t| 1 - t).collect();
        let c = confusion(&inverted, &truth, Some(&fov)).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let mut outside = truth;
        outside[4] = 0;
        assert_eq!(
            confusion(&outside, &truth, Some(&fov)).unwrap(),
            confusion(&truth, &truth, Some(&fov)).unwrap()
        );
        assert!(confusion(&truth, &truth[..3], None).is_err());
    }

    #[test]
    fn roc_simple_cases() {
        let r = roc_scores(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        let first = r.points[0];
        let last = *r.points.last().unwrap();
        assert_eq!(
            (first.fpr, first.tpr, last.fpr, last.tpr),
            (0.0, 0.0, 1.0, 1.0)
        );
        assert!(first.threshold.is_infinite());
        assert_eq!(roc_scores(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap().auc, 0.5);
        assert!(matches!(
            roc_scores(&[0.1, 0.2], &[1, 1]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn roc_matches_pairwise_oracle() {
        let mut rng = Rng::new(42);
        for trial in 0..1000 {
            let n = 2 + rng.below(499) as usize;
            let levels = if trial % 2 == 0 { 10 } else { 1 << 30 };
            let (scores, labels) = random_instance(&mut rng, n, levels);
            let auc = roc_scores(&scores, &labels).unwrap().auc;
            assert!(
                (auc - pairwise_auc(&scores, &labels)).abs() < 1e-9,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn roc_downsamples_many_distinct_scores() {
        let mut rng = Rng::new(3);
        let n = ROC_MAX_DISTINCT + 10;
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.2) as u8).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| rng.next_f64() * 0.8 + 0.2 * l as f64)
            .collect();
        let r = roc_scores(&scores, &labels).unwrap();
        assert_eq!(r.points.len(), ROC_SAMPLED_THRESHOLDS + 1);
        let last = r.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(r
            .points
            .windows(2)
            .all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    }

    proptest! {
        #[test]
        fn auc_invariants(seed in any::<u64>(), n in 2usize..200) {
            let mut rng = Rng::new(seed);
            let (scores, labels) = random_instance(&mut rng, n, 1000);
            let auc = roc_scores(&scores, &labels).unwrap().auc;
            let squared: Vec<f64> = scores.iter().map(|s| s * s).collect();
            prop_assert!((roc_scores(&squared, &labels).unwrap().auc - auc).abs() < 1e-9);
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((roc_scores(&scores, &flipped).unwrap().auc + auc - 1.0).abs() < 1e-9);
            let curve = roc_scores(&scores, &labels).unwrap();
            prop_assert!(curve.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        }

        #[test]
        fn level_of_matches_definition(s in 0f32..=1.0) {
            let k = level_of(s).unwrap();
            prop_assert!(k as f64 / 255.0 <= s as f64);
            prop_assert!(k == 255 || (k + 1) as f64 / 255.0 > s as f64);
        }

        #[test]
        fn sweep_is_exact_on_quantized_maps(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let images: Vec<ScoredImage> = (0..3).map(|id| {
                let labels: Vec<u8> = (0..60).map(|i| (i % 4 == 0) as u8).collect();
                let scores = labels.iter().map(|&l| ((rng.below(200) + 55 * l as u64) as f32) / 255.0).collect();
                ScoredImage::new(id, scores, labels).unwrap()
            }).collect();
            let coarse = max_avg_accuracy(&images).unwrap().mean_accuracy;
            let fine = (0..=2550).map(|j| {
                let t = j as f64 / 2550.0;
                images.iter().map(|im| im.confusion_at(t).accuracy().unwrap()).sum::<f64>() / 3.0
            }).fold(0.0, f64::max);
            prop_assert!((coarse - fine).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_on_perfect_and_blank_maps() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 5 == 0) as u8).collect();
        let exact: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        let r = max_avg_accuracy(&[ScoredImage::new(1, exact.clone(), labels.clone()).unwrap()])
            .unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.kappa, Ok(1.0));
        assert!(r.threshold > 0.0);
        let blank = ScoredImage::new(1, vec![0.0; 50], labels.clone()).unwrap();
        let r = max_avg_accuracy(&[blank]).unwrap();
        assert!((r.mean_accuracy - 0.8).abs() < 1e-12);
        assert_eq!(r.threshold, 1.0 / 255.0);
    }

    #[test]
    fn sweep_breaks_ties_toward_smaller_threshold() {
        // accuracy is 1 for any threshold in (0.2, 0.8]
        let im = ScoredImage::new(3, vec![0.2, 0.8], vec![0, 1]).unwrap();
        let r = max_avg_accuracy(&[im]).unwrap();
        assert_eq!(r.threshold, 52.0 / 255.0);
        assert_eq!(r.mean_accuracy, 1.0);
    }

    #[test]
    fn sweep_matches_direct_thresholding() {
        let mut rng = Rng::new(9);
        let images: Vec<ScoredImage> = (0..4)
            .map(|id| {
                let labels: Vec<u8> = (0..200).map(|_| (rng.next_f64() < 0.15) as u8).collect();
                let scores = labels
                    .iter()
                    .map(|&l| (rng.next_f64() * 0.7 + 0.3 * l as f64) as f32)
                    .collect();
                ScoredImage::new(id, scores, labels).unwrap()
            })
            .collect();
        let r = max_avg_accuracy(&images).unwrap();
        let direct: f64 = images
            .iter()
            .map(|im| im.confusion_at(r.threshold).accuracy().unwrap())
            .sum::<f64>()
            / 4.0;
        assert_eq!(r.mean_accuracy, direct);
        let pooled = images.iter().fold(ConfusionMatrix::default(), |a, im| {
            a.add(&im.confusion_at(r.threshold))
        });
        assert_eq!(r.kappa, Ok(pooled.kappa().unwrap()));
    }

    #[test]
    fn report_round_trips_at_six_decimals() {
        let report = Report {
            per_image: vec![(1, 0.9512346), (2, 0.94)],
            max_avg_accuracy: 0.947,
            kappa: Some(0.7031),
            auc: 0.9283,
            threshold: 128.0 / 255.0,
            pooled_accuracy: 0.9461,
            mean_image_kappa: None,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with(
            "image_id,accuracy\n01,0.951235\n02,0.940000\nmax_avg_accuracy,0.947000\n"
        ));
        let back = Report::parse_csv(&csv).unwrap();
        assert_eq!(back.per_image.len(), 2);
        assert!((back.per_image[0].1 - 0.951235).abs() < 1e-12);
        assert!((back.threshold - report.threshold).abs() < 5e-7);
        assert_eq!(back.kappa, Some(0.7031));
        assert_eq!(back.mean_image_kappa, None);
        assert_eq!(Report::parse_csv(&back.to_csv()).unwrap(), back);
        assert_eq!(
            report.summary_line(),
            "max_avg_accuracy=0.947000 kappa=0.703100 auc=0.928300"
        );
    }

    #[test]
    fn roc_csv_round_trip() {
        let r = roc_scores(&[0.9, 0.4, 0.4, 0.1], &[1, 0, 1, 0]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
        assert!(csv.trim_end().ends_with(&format!("# auc={}", r.auc)));
        assert_eq!(RocCurve::parse_csv(&csv).unwrap(), r);
    }
}

//! Speaker-verification privacy evaluation: trial lists, cosine scoring,
//! EER, Cllr, PAV-calibrated minCllr and linear attribute probes.
//!
//! EER convention: candidate thresholds are the observed scores. At
//! threshold `t`, FRR is the fraction of targets scoring below `t` and FAR
//! the fraction of nontargets scoring at or above `t`. The threshold with
//! the smallest `|FAR - FRR|` wins (lowest threshold on ties) and the EER is
//! `(FAR + FRR) / 2` there. No interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aan::accuracy;
use crate::anonymizer::{anonymize_corpus, AnonymizationMethod};
use crate::dataset::{Attribute, Corpus};
use crate::error::{Error, Result};
use crate::neural::{
    softmax_cross_entropy, Activation, AdamConfig, DenseLayer, GradStore, Optimizer,
    OptimizerConfig,
};

/// One verification trial: an enrolled speaker model against an utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_speaker: String,
    pub trial_utterance: String,
    pub is_target: bool,
    pub gender: String,
}

/// Trials with aligned scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoredTrials {
    /// Synthetic trial set from bare target / nontarget scores.
    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let mut trials = Vec::with_capacity(targets.len() + nontargets.len());
        let mut scores = Vec::with_capacity(trials.capacity());
        for (is_target, set) in [(true, targets), (false, nontargets)] {
            for (i, &s) in set.iter().enumerate() {
                trials.push(Trial {
                    enroll_speaker: String::new(),
                    trial_utterance: format!("{}{i}", if is_target { "t" } else { "n" }),
                    is_target,
                    gender: String::new(),
                });
                scores.push(s);
            }
        }
        ScoredTrials { trials, scores }
    }

    /// (target scores, nontarget scores), each in trial order.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for (trial, &s) in self.trials.iter().zip(&self.scores) {
            if trial.is_target {
                t.push(s);
            } else {
                n.push(s);
            }
        }
        (t, n)
    }

    fn classes(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.trials.len() != self.scores.len() {
            return Err(Error::Shape {
                context: "scored trials",
                expected: self.trials.len(),
                actual: self.scores.len(),
            });
        }
        let (t, n) = self.split();
        if t.is_empty() || n.is_empty() {
            return Err(Error::Metric(format!(
                "need at least one target and one nontarget, got {} and {}",
                t.len(),
                n.len()
            )));
        }
        if t.iter().chain(&n).any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite score".into()));
        }
        Ok((t, n))
    }
}

/// Builds one target trial per trial utterance and `n_nontarget` nontarget
/// trials against distinct same-gender enrolled speakers, sampled without
/// replacement.
pub fn make_trials(
    enroll: &Corpus,
    trial: &Corpus,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    if enroll.vocabs() != trial.vocabs() {
        return Err(Error::Trials(
            "enroll and trial corpora use different vocabularies".into(),
        ));
    }
    let mut speaker_gender: BTreeMap<&str, &str> = BTreeMap::new();
    for e in enroll.embeddings() {
        speaker_gender.insert(&e.speaker_id, &e.gender);
    }
    let mut by_gender: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (spk, g) in &speaker_gender {
        by_gender.entry(g).or_default().push(spk);
    }
    for (g, speakers) in &by_gender {
        if speakers.len() < 2 {
            return Err(Error::Trials(format!(
                "gender `{g}` has {} enrolled speaker(s), nontargets need at least 2",
                speakers.len()
            )));
        }
        if n_nontarget > speakers.len() - 1 {
            return Err(Error::Trials(format!(
                "gender `{g}` has only {} other speakers for {n_nontarget} nontargets",
                speakers.len() - 1
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(trial.len() * (1 + n_nontarget));
    for e in trial.embeddings() {
        let Some(&g) = speaker_gender.get(e.speaker_id.as_str()) else {
            return Err(Error::Trials(format!(
                "speaker `{}` has no enrollment",
                e.speaker_id
            )));
        };
        trials.push(Trial {
            enroll_speaker: e.speaker_id.clone(),
            trial_utterance: e.utterance_id.clone(),
            is_target: true,
            gender: g.to_owned(),
        });
        let others: Vec<&str> = by_gender[g]
            .iter()
            .copied()
            .filter(|s| *s != e.speaker_id)
            .collect();
        for i in index::sample(&mut rng, others.len(), n_nontarget) {
            trials.push(Trial {
                enroll_speaker: others[i].to_owned(),
                trial_utterance: e.utterance_id.clone(),
                is_target: false,
                gender: g.to_owned(),
            });
        }
    }
    Ok(trials)
}

pub fn write_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["enroll_speaker", "trial_utterance", "is_target", "gender"])?;
    for t in trials {
        let target = if t.is_target { "1" } else { "0" };
        w.write_record([&t.enroll_speaker, &t.trial_utterance, target, &t.gender])?;
    }
    let mut inner = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r.headers()?.clone();
    if header
        .iter()
        .ne(["enroll_speaker", "trial_utterance", "is_target", "gender"])
    {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "expected header enroll_speaker,trial_utterance,is_target,gender".into(),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let is_target = match &rec[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("is_target must be 0 or 1, got `{other}`"),
                })
            }
        };
        out.push(Trial {
            enroll_speaker: rec[0].to_owned(),
            trial_utterance: rec[1].to_owned(),
            is_target,
            gender: rec[3].to_owned(),
        });
    }
    Ok(out)
}

/// Per-speaker arithmetic mean of the enrollment vectors.
pub fn enroll_speaker_models(enroll: &Corpus) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for e in enroll.embeddings() {
        let entry = sums
            .entry(e.speaker_id.clone())
            .or_insert_with(|| (vec![0.0; e.vector.len()], 0));
        entry.0.iter_mut().zip(&e.vector).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(spk, (mut sum, n))| {
            sum.iter_mut().for_each(|s| *s /= n as f64);
            (spk, sum)
        })
        .collect()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "cosine operands",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "zero-norm operand in cosine score".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scores each trial as the cosine between the enrolled speaker model and
/// the trial utterance vector.
pub fn score_trials(
    trials: &[Trial],
    models: &BTreeMap<String, Vec<f64>>,
    trial_corpus: &Corpus,
) -> Result<ScoredTrials> {
    let utterances: HashMap<&str, &[f64]> = trial_corpus
        .embeddings()
        .iter()
        .map(|e| (e.utterance_id.as_str(), e.vector.as_slice()))
        .collect();
    let scores = trials
        .iter()
        .map(|t| {
            let model = models.get(&t.enroll_speaker).ok_or_else(|| {
                Error::Trials(format!("no model for speaker `{}`", t.enroll_speaker))
            })?;
            let utt = utterances.get(t.trial_utterance.as_str()).ok_or_else(|| {
                Error::Trials(format!("unknown trial utterance `{}`", t.trial_utterance))
            })?;
            cosine_score(model, utt)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoredTrials {
        trials: trials.to_vec(),
        scores,
    })
}

/// Operating point at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Error counts at every distinct observed score, ascending:
/// (threshold, false accepts, false rejects).
fn sweep(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = t.iter().chain(&n).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut ti, mut ni) = (0, 0);
    thresholds
        .into_iter()
        .map(|th| {
            while ti < t.len() && t[ti] < th {
                ti += 1;
            }
            while ni < n.len() && n[ni] < th {
                ni += 1;
            }
            (th, n.len() - ni, ti)
        })
        .collect()
}

/// Raw (threshold, FAR, FRR) points over every observed score.
pub fn det_points(scored: &ScoredTrials) -> Result<Vec<DetPoint>> {
    let (t, n) = scored.classes()?;
    Ok(sweep(&t, &n)
        .into_iter()
        .map(|(threshold, fa, fr)| DetPoint {
            threshold,
            far: fa as f64 / n.len() as f64,
            frr: fr as f64 / t.len() as f64,
        })
        .collect())
}

/// EER as a fraction in `[0, 1]` (see the module docs for the convention).
pub fn compute_eer(scored: &ScoredTrials) -> Result<f64> {
    let (t, n) = scored.classes()?;
    Ok(eer_from_scores(&t, &n))
}

pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> f64 {
    let (nt, nn) = (targets.len() as u128, nontargets.len() as u128);
    let mut best: Option<(u128, usize, usize)> = None;
    for (_, fa, fr) in sweep(targets, nontargets) {
        // |fa/nn - fr/nt| compared exactly as |fa*nt - fr*nn|.
        let gap = (fa as u128 * nt).abs_diff(fr as u128 * nn);
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, fa, fr));
        }
    }
    let (_, fa, fr) = best.expect("at least one score");
    (fa as f64 / nn as f64 + fr as f64 / nt as f64) / 2.0
}

/// `log2(1 + e^x)` without overflow.
fn softplus_bits(x: f64) -> f64 {
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) / std::f64::consts::LN_2
}

fn cllr_of(targets: &[f64], nontargets: &[f64]) -> f64 {
    let t = targets.iter().map(|&s| softplus_bits(-s)).sum::<f64>() / targets.len() as f64;
    let n = nontargets.iter().map(|&s| softplus_bits(s)).sum::<f64>() / nontargets.len() as f64;
    0.5 * (t + n)
}

/// Cllr in bits, reading raw scores as natural-log likelihood ratios.
pub fn compute_cllr(scored: &ScoredTrials) -> Result<f64> {
    let (t, n) = scored.classes()?;
    Ok(cllr_of(&t, &n))
}

/// Posterior probability bounds applied after PAV.
const PAV_CLIP: f64 = 1e-12;

/// Target posteriors from pool-adjacent-violators isotonic regression of the
/// target indicator on score. Tied scores share one block. Returns the
/// posteriors aligned to `targets` and `nontargets`.
pub fn pav_posteriors(targets: &[f64], nontargets: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut items: Vec<(f64, bool, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, true, i))
        .chain(nontargets.iter().enumerate().map(|(i, &s)| (s, false, i)))
        .collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Blocks: (target count, total count, items covered).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        let mut hits = 0.0;
        while j < items.len() && items[j].0 == items[i].0 {
            if items[j].1 {
                hits += 1.0;
            }
            j += 1;
        }
        blocks.push((hits, (j - i) as f64, j - i));
        while blocks.len() > 1 {
            let (h1, w1, c1) = blocks[blocks.len() - 2];
            let (h2, w2, c2) = blocks[blocks.len() - 1];
            // Merge while the earlier block's mean exceeds the later one.
            if h1 * w2 > h2 * w1 {
                blocks.pop();
                blocks.pop();
                blocks.push((h1 + h2, w1 + w2, c1 + c2));
            } else {
                break;
            }
        }
        i = j;
    }

    let mut pt = vec![0.0; targets.len()];
    let mut pn = vec![0.0; nontargets.len()];
    let mut pos = 0;
    for (hits, weight, count) in blocks {
        let p = hits / weight;
        for &(_, is_target, idx) in &items[pos..pos + count] {
            if is_target {
                pt[idx] = p;
            } else {
                pn[idx] = p;
            }
        }
        pos += count;
    }
    (pt, pn)
}

/// Cllr after optimal monotone calibration: PAV posteriors, clipped to
/// `[1e-12, 1 - 1e-12]`, converted to LLRs by removing the empirical prior
/// log-odds.
pub fn compute_min_cllr(scored: &ScoredTrials) -> Result<f64> {
    let (t, n) = scored.classes()?;
    Ok(min_cllr_from_scores(&t, &n))
}

pub fn min_cllr_from_scores(targets: &[f64], nontargets: &[f64]) -> f64 {
    let (pt, pn) = pav_posteriors(targets, nontargets);
    let prior_log_odds = (targets.len() as f64 / nontargets.len() as f64).ln();
    let to_llr = |p: f64| {
        let p = p.clamp(PAV_CLIP, 1.0 - PAV_CLIP);
        (p / (1.0 - p)).ln() - prior_log_odds
    };
    let lt: Vec<f64> = pt.into_iter().map(to_llr).collect();
    let ln: Vec<f64> = pn.into_iter().map(to_llr).collect();
    cllr_of(&lt, &ln)
}

/// Training settings of the linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the probe weights (not the bias).
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.02,
            weight_decay: 0.01,
        }
    }
}

/// Trains a softmax-linear classifier for `attribute` on standardized
/// `train` vectors (full-batch Adam) and returns top-1 accuracy on `test`.
pub fn probe_attack(
    train: &Corpus,
    test: &Corpus,
    attribute: Attribute,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train.vocabs() != test.vocabs() {
        return Err(Error::invalid(
            "probe",
            "train and test corpora use different vocabularies",
        ));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape {
            context: "probe test dimension",
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    let classes = train.vocabs().get(attribute).len();
    if classes < 2 {
        return Err(Error::invalid(
            "attribute",
            format!(
                "`{}` has {classes} class, probing needs at least 2",
                attribute.name()
            ),
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let x_train = train.matrix();
    let mean = x_train.mean_axis(Axis(0)).expect("non-empty");
    let std: Array1<f64> = x_train
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let standardize = |m: Array2<f64>| (m - &mean) / &std;
    let x_train = standardize(x_train);
    let x_test = standardize(test.matrix());
    let y_train = train.label_indices(attribute);
    let y_test = test.label_indices(attribute);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = DenseLayer::uniform(train.dim(), classes, Activation::Linear, 0.01, &mut rng);
    let mut opt = Optimizer::new(
        OptimizerConfig::Adam(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        }),
        [&layer],
    );
    for _ in 0..config.epochs {
        let (logits, cache) = layer.forward(&x_train)?;
        let (_, g) = softmax_cross_entropy(&logits, &y_train)?;
        let (_, mut grads) = layer.backward(&cache, &g)?;
        if config.weight_decay > 0.0 {
            grads
                .weights
                .scaled_add(config.weight_decay, &layer.weights);
        }
        opt.step(
            &mut [&mut layer],
            &GradStore {
                layers: vec![grads],
            },
        )?;
    }
    let (logits, _) = layer.forward(&x_test)?;
    Ok(accuracy(&logits, &y_test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    #[serde(rename = "o")]
    Original,
    #[serde(rename = "a")]
    Anonymized,
}

impl Condition {
    pub fn code(self) -> &'static str {
        match self {
            Condition::Original => "o",
            Condition::Anonymized => "a",
        }
    }
}

/// The reported (enroll, trial) pairs; a-o is omitted.
pub const CONDITIONS: [(Condition, Condition); 3] = [
    (Condition::Original, Condition::Original),
    (Condition::Original, Condition::Anonymized),
    (Condition::Anonymized, Condition::Anonymized),
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeAccuracies {
    pub speaker: f64,
    pub gender: f64,
    pub accent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub system: String,
    pub dataset: String,
    pub enroll: Condition,
    pub trial: Condition,
    pub gender: String,
    pub eer_pct: f64,
    pub min_cllr: f64,
    pub cllr: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Probe accuracies on the trial-side representation; absent when
    /// probing was disabled.
    pub probe: Option<ProbeAccuracies>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const REPORT_COLUMNS: [&str; 14] = [
    "system",
    "index",
    "dataset",
    "eer_pct",
    "min_cllr",
    "cllr",
    "enroll",
    "trial",
    "gender",
    "n_target",
    "n_nontarget",
    "probe_speaker",
    "probe_gender",
    "probe_accent",
];

impl MetricsReport {
    pub fn find(
        &self,
        system: &str,
        enroll: Condition,
        trial: Condition,
        gender: &str,
    ) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| {
            r.system == system && r.enroll == enroll && r.trial == trial && r.gender == gender
        })
    }

    pub fn rows_for<'a>(&'a self, system: &'a str) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| r.system == system)
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        self.rows
            .iter()
            .map(|r| {
                let i = index.entry(r.system.as_str()).or_insert(0);
                *i += 1;
                let probe = |f: fn(&ProbeAccuracies) -> f64| {
                    r.probe
                        .as_ref()
                        .map_or_else(String::new, |p| format!("{:.4}", f(p)))
                };
                vec![
                    r.system.clone(),
                    i.to_string(),
                    r.dataset.clone(),
                    format!("{:.3}", r.eer_pct),
                    format!("{:.3}", r.min_cllr),
                    format!("{:.3}", r.cllr),
                    r.enroll.code().into(),
                    r.trial.code().into(),
                    r.gender.clone(),
                    r.n_target.to_string(),
                    r.n_nontarget.to_string(),
                    probe(|p| p.speaker),
                    probe(|p| p.gender),
                    probe(|p| p.accent),
                ]
            })
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Aligned plain-text table, one block per system.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let mut widths: Vec<usize> = REPORT_COLUMNS.iter().map(|c| c.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str(" | ");
                }
                let _ = write!(s, "{c:>w$}");
            }
            s.trim_end().to_owned()
        };
        let header: Vec<String> = REPORT_COLUMNS.iter().map(|s| s.to_string()).collect();
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        let mut prev: Option<&str> = None;
        for (row, r) in cells.iter().zip(&self.rows) {
            if prev.is_some_and(|p| p != r.system) {
                out.push('\n');
            }
            prev = Some(&r.system);
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Inputs of one evaluated dataset: `train` feeds the probes, `enroll` and
/// `trial` the verification trials.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub tag: String,
    pub train: Corpus,
    pub enroll: Corpus,
    pub trial: Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub n_nontarget_per_target: usize,
    pub seed: u64,
    /// `None` skips the attribute probes.
    pub probe: Option<ProbeConfig>,
    pub probe_seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_nontarget_per_target: 10,
            seed: 0,
            probe: Some(ProbeConfig::default()),
            probe_seed: 0,
        }
    }
}

fn probe_all(
    train: &Corpus,
    test: &Corpus,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeAccuracies> {
    Ok(ProbeAccuracies {
        speaker: probe_attack(train, test, Attribute::Speaker, cfg, seed)?,
        gender: probe_attack(train, test, Attribute::Gender, cfg, seed)?,
        accent: probe_attack(train, test, Attribute::Accent, cfg, seed)?,
    })
}

/// Runs every (enroll, trial) condition of [`CONDITIONS`] for every system
/// and gender. The trial list is shared by all systems and conditions.
pub fn evaluate_conditions(
    set: &EvalSet,
    systems: &[(String, AnonymizationMethod)],
    config: &TrialConfig,
) -> Result<MetricsReport> {
    let trials = make_trials(
        &set.enroll,
        &set.trial,
        config.n_nontarget_per_target,
        config.seed,
    )?;
    let genders = set.enroll.vocabs().gender.labels().to_vec();

    let original_probe = match &config.probe {
        Some(cfg) => Some(probe_all(&set.train, &set.trial, cfg, config.probe_seed)?),
        None => None,
    };
    let original_models = Arc::new(enroll_speaker_models(&set.enroll));

    let mut report = MetricsReport::default();
    for (name, method) in systems {
        let anon_enroll = anonymize_corpus(&set.enroll, method)?;
        let anon_trial = anonymize_corpus(&set.trial, method)?;
        let anon_models = Arc::new(enroll_speaker_models(&anon_enroll));
        let anon_probe = match &config.probe {
            Some(cfg) => {
                let anon_train = anonymize_corpus(&set.train, method)?;
                Some(probe_all(&anon_train, &anon_trial, cfg, config.probe_seed)?)
            }
            None => None,
        };
        for (enroll_c, trial_c) in CONDITIONS {
            let models = match enroll_c {
                Condition::Original => &original_models,
                Condition::Anonymized => &anon_models,
            };
            let (trial_corpus, probe) = match trial_c {
                Condition::Original => (&set.trial, original_probe),
                Condition::Anonymized => (&anon_trial, anon_probe),
            };
            let scored = score_trials(&trials, models, trial_corpus)?;
            for g in &genders {
                let mut subset = ScoredTrials {
                    trials: Vec::new(),
                    scores: Vec::new(),
                };
                for (t, &s) in scored.trials.iter().zip(&scored.scores) {
                    if &t.gender == g {
                        subset.trials.push(t.clone());
                        subset.scores.push(s);
                    }
                }
                let (tg, nt) = subset.classes()?;
                report.rows.push(MetricsRow {
                    system: name.clone(),
                    dataset: set.tag.clone(),
                    enroll: enroll_c,
                    trial: trial_c,
                    gender: g.clone(),
                    eer_pct: 100.0 * eer_from_scores(&tg, &nt),
                    min_cllr: min_cllr_from_scores(&tg, &nt),
                    cllr: cllr_of(&tg, &nt),
                    n_target: tg.len(),
                    n_nontarget: nt.len(),
                    probe,
                });
            }
        }
    }
    Ok(report)
}
